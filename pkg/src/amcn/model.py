"""The attention-based downscaling network and its binary model format.

Layout of the residual branch::

    precip (upsampled)  --embed_p-->  F_P ---------------------+
    ancillary (joint)   --embed_a-->  F_A  --> GCA (F_P, F_A)  |--> cascade 1x1 --> RDAM --> recon --> xi
    ancillary[i]        --mfca.embed{i}--> MFCA (F_P, F_A_i)  -+

The prediction is ``f_u(lr) + std_precip * xi``, so a zero ``recon`` layer
reproduces plain bilinear upsampling exactly.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import nn
from .grid import GeoGrid, ExtentError
from .preprocess import NormStats
from .resample import resample_array, resample_mask

MODEL_MAGIC = b"AMCN"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class AmcnConfig:
    base_channels: int = 32
    n_ancillary: int = 9
    scale_factor: int = 10
    rdb_layers: int = 6
    rdb_growth: int = 16
    n_levels: int = 3
    kernel: int = 3
    use_gca: bool = True
    use_mfca: bool = True
    use_degradation_loss: bool = True

    def __post_init__(self):
        if self.base_channels < 1 or self.rdb_growth < 1:
            raise ValueError("base_channels and rdb_growth must be >= 1")
        if self.rdb_layers < 1 or self.n_levels < 1:
            raise ValueError("rdb_layers and n_levels must be >= 1")
        if self.scale_factor < 2:
            raise ValueError("scale_factor must be >= 2")
        if self.n_ancillary < 1:
            raise ValueError("n_ancillary must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be a positive odd integer")

    @property
    def cascade_channels(self):
        C = self.base_channels
        n = C * (int(self.use_gca) + int(self.use_mfca))
        # without attention the plain precipitation and ancillary embeddings feed the cascade
        return n if n else 2 * C

    @classmethod
    def from_mapping(cls, mapping):
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in mapping.items():
            if key not in kinds:
                continue
            if kinds[key] in (bool, "bool"):
                kwargs[key] = value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes", "on")
            else:
                kwargs[key] = int(value)
        return cls(**kwargs)


def param_shapes(cfg):
    """Ordered (name, shape) list of every parameter for ``cfg``."""
    C, G, k, A = cfg.base_channels, cfg.rdb_growth, cfg.kernel, cfg.n_ancillary
    shapes = []

    def conv(name, c_in, c_out, ksize=k):
        shapes.append((f"{name}.w", (c_out, c_in, ksize, ksize)))
        shapes.append((f"{name}.b", (c_out,)))

    def croa(prefix):
        for part in ("hasa1", "hasa2", "lpca1", "lpca2"):
            conv(f"{prefix}.{part}", C, C)

    conv("embed_p", 1, C)
    if cfg.use_gca or not cfg.use_mfca:
        conv("embed_a", A, C)
    if cfg.use_gca:
        croa("gca")
    if cfg.use_mfca:
        for i in range(A):
            conv(f"mfca.embed{i}", 1, C)
        for i in range(A):
            croa(f"mfca.croa{i}")
        conv("mfca.proj", A * C, C, 1)
    conv("cascade", cfg.cascade_channels, C, 1)
    for lvl in range(cfg.n_levels):
        pre = f"rdam.level{lvl}"
        for j in range(cfg.rdb_layers):
            conv(f"{pre}.rdb.conv{j}", C + j * G, G)
        conv(f"{pre}.rdb.fuse", C + cfg.rdb_layers * G, C, 1)
        shapes.append((f"{pre}.rab.fc.w", (C, C)))
        shapes.append((f"{pre}.rab.fc.b", (C,)))
        conv(f"{pre}.rab.sa", C, 1)
        conv(f"{pre}.rab.out", C, C)
    conv("rdam.fuse", cfg.n_levels * C, C, 1)
    conv("recon", C, 1)
    return shapes


# scaled-down init for the layers that feed residual sums
_SMALL_INIT = ("recon.w", ".rab.out.w", ".rdb.fuse.w")


def init_params(cfg, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg):
        if name.endswith(".b"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            if name.endswith(_SMALL_INIT):
                data *= 0.1
        params[name] = nn.Parameter(data.astype(dtype), name)
    return params


class AmcnModel:
    def __init__(self, config, params=None, norm_stats=None, seed=0, dtype=np.float32):
        self.config = config
        self.params = params if params is not None else init_params(config, seed, dtype)
        self.norm_stats = norm_stats
        expected = param_shapes(config)
        if [(n, tuple(p.shape)) for n, p in self.params.items()] != expected:
            raise ModelFormatError("parameter set does not match the configuration")

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameters(self):
        return list(self.params.values())

    def n_parameters(self):
        return sum(p.data.size for p in self.params.values())

    def astype(self, dtype):
        params = {n: nn.Parameter(p.data.astype(dtype), n) for n, p in self.params.items()}
        return AmcnModel(self.config, params, self.norm_stats)

    def copy(self):
        return self.astype(self.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------- blocks

def _conv(params, name, x):
    return nn.conv2d(x, params[f"{name}.w"], params[f"{name}.b"])


def _shared_convs(params, names, x):
    """Convs that read the same input, evaluated as one product and split apart."""
    if len(names) == 1:
        return [_conv(params, names[0], x)]
    w = nn.concat_leading([params[f"{n}.w"] for n in names])
    b = nn.concat_leading([params[f"{n}.b"] for n in names])
    return nn.split_channels(nn.conv2d(x, w, b), [params[f"{n}.b"].shape[0] for n in names])


def croa_blocks(f_p, f_as, params, prefixes):
    """Several cross-attention blocks that share one precipitation feature map."""
    for f_a in f_as:
        if f_a.shape != f_p.shape:
            raise ValueError(f"croa_block: shape mismatch {f_p.shape} vs {f_a.shape}")
    from_p = _shared_convs(params, [f"{pre}.{part}" for pre in prefixes for part in ("hasa1", "lpca2")], f_p)
    outs = []
    for i, (f_a, pre) in enumerate(zip(f_as, prefixes)):
        p_hasa, p_gate = from_p[2 * i], from_p[2 * i + 1]
        a_gate, a_lpca = _shared_convs(params, [f"{pre}.hasa2", f"{pre}.lpca1"], f_a)
        hasa = nn.mul(p_hasa, nn.sigmoid(a_gate))
        lpca = nn.mul(a_lpca, nn.sigmoid(p_gate))
        outs.append(nn.add(hasa, lpca))
    return outs


def croa_block(f_p, f_a, params, prefix):
    """Mutual recalibration of precipitation and ancillary feature maps.

    Ancillary-derived sigmoid gates weight the precipitation features and
    precipitation-derived gates weight the ancillary features; the two
    weighted maps are summed. No pooling is involved.
    """
    return croa_blocks(f_p, [f_a], params, [prefix])[0]


def gca_forward(f_p, f_a_joint, params):
    return croa_block(f_p, f_a_joint, params, "gca")


def _mfca_prefixes(params):
    n_blocks = sum(1 for name in params if name.startswith("mfca.croa") and name.endswith(".hasa1.w"))
    return [f"mfca.croa{i}" for i in range(n_blocks)]


def mfca_concat(f_p, factor_feats, params):
    """The per-factor cross-attention outputs, concatenated (before projection)."""
    return nn.concat_channels(croa_blocks(f_p, list(factor_feats), params, _mfca_prefixes(params)))


def mfca_forward(f_p, factor_feats, params):
    factor_feats = list(factor_feats)
    n_blocks = len(_mfca_prefixes(params))
    if len(factor_feats) != n_blocks:
        raise ValueError(f"mfca_forward: expected {n_blocks} factor feature maps, got {len(factor_feats)}")
    return _conv(params, "mfca.proj", mfca_concat(f_p, factor_feats, params))


def rdb_forward(x, params, prefix, n_layers):
    feats = [x]
    for j in range(n_layers):
        inp = feats[0] if j == 0 else nn.concat_channels(feats)
        feats.append(nn.relu(_conv(params, f"{prefix}.conv{j}", inp)))
    fused = _conv(params, f"{prefix}.fuse", nn.concat_channels(feats))
    return nn.add(x, fused)


def rab_forward(x, params, prefix):
    """Channel and spatial gating summed, projected, plus the local residual."""
    ca_gate = nn.sigmoid(nn.fully_connected(nn.global_avg_pool(x),
                                            params[f"{prefix}.fc.w"], params[f"{prefix}.fc.b"]))
    f_ca = nn.scale_channels(x, ca_gate)
    f_sa = nn.scale_spatial(x, nn.sigmoid(_conv(params, f"{prefix}.sa", x)))
    return nn.add(x, _conv(params, f"{prefix}.out", nn.add(f_ca, f_sa)))


def rdam_concat(x, params, cfg):
    levels = []
    for lvl in range(cfg.n_levels):
        pre = f"rdam.level{lvl}"
        x = rab_forward(rdb_forward(x, params, f"{pre}.rdb", cfg.rdb_layers), params, f"{pre}.rab")
        levels.append(x)
    return nn.concat_channels(levels)


def rdam_forward(x, params, cfg):
    return _conv(params, "rdam.fuse", rdam_concat(x, params, cfg))


def cascade_input(precip_n, anc_n, model):
    """Cascade features ahead of the 1x1 projection (GCA and/or MFCA outputs).

    All cross-attention blocks share the precipitation embedding, so their
    precipitation-side convolutions run together.
    """
    cfg, params = model.config, model.params
    f_p = nn.relu(_conv(params, "embed_p", precip_n))
    f_a = None
    if cfg.use_gca or not cfg.use_mfca:
        f_a = nn.relu(_conv(params, "embed_a", anc_n))
    if not (cfg.use_gca or cfg.use_mfca):
        return nn.concat_channels([f_p, f_a])
    f_as, prefixes = [], []
    if cfg.use_gca:
        f_as.append(f_a)
        prefixes.append("gca")
    if cfg.use_mfca:
        for i in range(cfg.n_ancillary):
            f_as.append(nn.relu(_conv(params, f"mfca.embed{i}", nn.slice_channels(anc_n, i, i + 1))))
            prefixes.append(f"mfca.croa{i}")
    outs = croa_blocks(f_p, f_as, params, prefixes)
    parts = []
    if cfg.use_gca:
        parts.append(outs[0])
    if cfg.use_mfca:
        parts.append(_conv(params, "mfca.proj", nn.concat_channels(outs[int(cfg.use_gca):])))
    return parts[0] if len(parts) == 1 else nn.concat_channels(parts)


def residual_forward(model, precip_n, anc_n):
    """xi in normalized precipitation units from normalized inputs."""
    params = model.params
    feats = _conv(params, "cascade", cascade_input(precip_n, anc_n, model))
    return _conv(params, "recon", rdam_forward(feats, params, model.config))


def normalize_inputs(model, up, anc):
    """Normalized (precip, ancillary) arrays in the model dtype."""
    if model.norm_stats is None:
        raise ValueError("model has no normalization statistics")
    mean, std = model.norm_stats.arrays()
    dt = model.dtype
    p = ((up - mean[0]) / std[0]).astype(dt)
    a = ((anc - mean[1:, None, None]) / std[1:, None, None]).astype(dt)
    return p, a


def upsample(model, lr):
    # resampled in float64 like the grid path, so a zero residual reproduces it exactly
    lr = np.asarray(lr, dtype=np.float64)
    r = model.config.scale_factor
    return resample_array(lr, (lr.shape[-2] * r, lr.shape[-1] * r)).astype(model.dtype)


def amcn_forward(model, lr_precip, ancillary):
    """Downscale a batch: returns (prediction Tensor in mm, xi Tensor, upsampled array).

    ``lr_precip`` is (B, 1, h, w) in mm and ``ancillary`` (B, A, r*h, r*w) in
    raw units, both with nodata already filled.
    """
    lr_precip = np.asarray(lr_precip)
    ancillary = np.asarray(ancillary)
    r = model.config.scale_factor
    if lr_precip.ndim != 4 or ancillary.ndim != 4 or lr_precip.shape[1] != 1:
        raise ValueError("expected lr_precip (B,1,h,w) and ancillary (B,A,H,W)")
    if ancillary.shape[1] != model.config.n_ancillary:
        raise ValueError(f"expected {model.config.n_ancillary} ancillary channels, got {ancillary.shape[1]}")
    if ancillary.shape[0] != lr_precip.shape[0] or \
            ancillary.shape[2:] != (lr_precip.shape[2] * r, lr_precip.shape[3] * r):
        raise ExtentError(f"ancillary {ancillary.shape} is not {r}x the precipitation grid {lr_precip.shape}")
    up = upsample(model, lr_precip)
    p_n, a_n = normalize_inputs(model, up, ancillary)
    xi = residual_forward(model, nn.Tensor(p_n), nn.Tensor(a_n))
    std_p = model.norm_stats.std[0]
    pred = nn.add_const(nn.scale(xi, std_p), up)
    return pred, xi, up


def downscale(model, lr_grid, ancillary_stack):
    """Grid-level inference; nodata in any input propagates to the output."""
    r = model.config.scale_factor
    tmpl = ancillary_stack.template
    if tmpl.nrows != lr_grid.nrows * r or tmpl.ncols != lr_grid.ncols * r \
            or abs(lr_grid.x_min - tmpl.x_min) > 1e-9 or abs(lr_grid.y_min - tmpl.y_min) > 1e-9:
        raise ExtentError("ancillary stack does not cover the precipitation grid at the model scale")
    if len(ancillary_stack) != model.config.n_ancillary:
        raise ValueError(f"expected {model.config.n_ancillary} ancillary channels, got {len(ancillary_stack)}")
    mask = ancillary_stack.mask | resample_mask(lr_grid.mask, tmpl.shape)
    lr_arr = lr_grid.filled(0.0)[None, None]
    anc = ancillary_stack.to_array(fill=0.0)
    # fill nodata with the channel means so normalized inputs are zero there
    mean, _ = model.norm_stats.arrays()
    for i, ch in enumerate(ancillary_stack.channels):
        anc[i][ch.mask] = mean[i + 1]
    pred, _, _ = amcn_forward(model, lr_arr, anc[None])
    return GeoGrid.from_masked(pred.data[0, 0].astype(np.float64), mask, tmpl, name="precip")


# ---------------------------------------------------------------- model file

_CONFIG = struct.Struct("<7IB")


def _config_bytes(cfg):
    flags = int(cfg.use_gca) | int(cfg.use_mfca) << 1 | int(cfg.use_degradation_loss) << 2
    return _CONFIG.pack(cfg.base_channels, cfg.n_ancillary, cfg.scale_factor, cfg.rdb_layers,
                        cfg.rdb_growth, cfg.n_levels, cfg.kernel, flags)


def model_bytes(model):
    parts = [MODEL_MAGIC, struct.pack("<I", MODEL_VERSION), _config_bytes(model.config),
             struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", p.data.ndim) + struct.pack(f"<{p.data.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    ns = model.norm_stats
    if ns is None:
        parts.append(struct.pack("<I", 0))
    else:
        parts.append(struct.pack("<I", len(ns.mean)))
        for name, m, s in zip(ns.channel_names, ns.mean, ns.std):
            raw = name.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<dd", m, s))
    return b"".join(parts)


def save_model(model, path):
    Path(path).write_bytes(model_bytes(model))


class _Reader:
    def __init__(self, data, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ModelFormatError(f"{self.path}: truncated model file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def name(self):
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def load_model(path):
    data = Path(path).read_bytes()
    rd = _Reader(data, path)
    if rd.take(4) != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: not an AMCN model file")
    (version,) = rd.unpack("<I")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported model version {version}")
    C, A, r, L, G, n, k, flags = rd.unpack(_CONFIG.format)
    try:
        cfg = AmcnConfig(C, A, r, L, G, n, k, bool(flags & 1), bool(flags & 2), bool(flags & 4))
    except ValueError as exc:
        raise ModelFormatError(f"{path}: invalid configuration: {exc}") from exc
    expected = param_shapes(cfg)
    (count,) = rd.unpack("<I")
    if count != len(expected):
        raise ModelFormatError(f"{path}: {count} parameters stored, configuration needs {len(expected)}")
    params = {}
    for exp_name, exp_shape in expected:
        name = rd.name()
        (ndim,) = rd.unpack("<B")
        shape = rd.unpack(f"<{ndim}I")
        if name != exp_name or tuple(shape) != tuple(exp_shape):
            raise ModelFormatError(f"{path}: parameter {name}{shape} does not match configuration "
                                   f"({exp_name}{exp_shape})")
        size = int(np.prod(shape))
        arr = np.frombuffer(rd.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        params[name] = nn.Parameter(arr, name)
    (nch,) = rd.unpack("<I")
    norm = None
    if nch:
        names, means, stds = [], [], []
        for _ in range(nch):
            names.append(rd.name())
            m, s = rd.unpack("<dd")
            means.append(m)
            stds.append(s)
        norm = NormStats(tuple(means), tuple(stds), tuple(names))
    if rd.pos != len(data):
        raise ModelFormatError(f"{path}: {len(data) - rd.pos} trailing bytes")
    return AmcnModel(cfg, params, norm)


def with_flags(cfg, **flags):
    return replace(cfg, **flags)
