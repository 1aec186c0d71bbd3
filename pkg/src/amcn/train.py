"""Patch assembly and the mini-batch training loop."""
from __future__ import annotations

import csv
import math
from fractions import Fraction
from dataclasses import dataclass, fields, replace

import numpy as np

from . import nn
from .grid import GridStack, bilinear_resample, extract_patches
from .losses import EPSILON, LOSS_COLUMNS, charbonnier_loss, degradation_loss, weighted_total
from .model import AmcnConfig, AmcnModel, amcn_forward
from .preprocess import ANCILLARY_CHANNELS, CANONICAL_CHANNELS, fit_norm_stats


class TrainingDivergedError(FloatingPointError):
    """The loss or a forward value became NaN/Inf."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr0: float = 1e-3
    lr_halving_period: int = 20
    batch_size: int = 8
    patch: int = 32
    stride: int = 32
    scale: int = 4
    seed: int = 0
    use_gca: bool = True
    use_mfca: bool = True
    use_degradation_loss: bool = True
    eps: float = EPSILON
    per_patch: bool = True

    def __post_init__(self):
        for name in ("epochs", "batch_size", "patch", "stride", "scale", "lr_halving_period"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.lr0 > 0 or not self.eps > 0:
            raise ValueError("lr0 and eps must be positive")
        if self.patch % self.scale:
            raise ValueError(f"patch size {self.patch} is not divisible by the scale {self.scale}")

    @classmethod
    def canonical(cls, **overrides):
        """Settings of the original protocol: 100 epochs, batch 64, 40-pixel patches, 10x."""
        base = dict(epochs=100, lr0=1e-3, lr_halving_period=50, batch_size=64,
                    patch=40, stride=40, scale=10)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_mapping(cls, mapping):
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in mapping.items():
            if key not in kinds:
                continue
            kind = kinds[key]
            if kind in (bool, "bool"):
                kwargs[key] = value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes", "on")
            elif kind in (float, "float"):
                kwargs[key] = float(value)
            else:
                kwargs[key] = int(value)
        return cls(**kwargs)

    def model_flags(self):
        return dict(use_gca=self.use_gca, use_mfca=self.use_mfca,
                    use_degradation_loss=self.use_degradation_loss)


def scene_input_stack(scene, scale):
    """Canonical 10-channel input: upsampled precipitation followed by the ancillary channels."""
    if tuple(scene.ancillary.channel_names) != ANCILLARY_CHANNELS:
        raise ValueError(f"ancillary channels {scene.ancillary.channel_names} are not in canonical "
                         f"order {ANCILLARY_CHANNELS}")
    up = bilinear_resample(scene.lr, Fraction(scale))
    return GridStack.from_grids([up.with_values(up.values, name="precip"), *scene.ancillary.channels],
                                CANONICAL_CHANNELS)


def build_training_set(scenes, config):
    """All valid patches of ``scenes`` plus normalization statistics fitted on them."""
    scenes = list(scenes)
    if not scenes:
        raise ValueError("no scenes given")
    ref = scenes[0].hr
    patches = []
    for sc in scenes:
        if sc.hr.shape != ref.shape or abs(sc.hr.cell_size - ref.cell_size) > 1e-12:
            raise ValueError("scenes do not share one grid specification")
        stack = scene_input_stack(sc, config.scale)
        patches.extend(extract_patches(stack, sc.hr, sc.lr, config.patch, config.stride))
    if len(patches) < 2:
        raise ValueError(f"only {len(patches)} valid patches; training needs at least two")
    return patches, fit_norm_stats(patches)


@dataclass
class PatchArrays:
    lr: np.ndarray      # (N, 1, q, q) mm
    anc: np.ndarray     # (N, A, p, p) raw units
    label: np.ndarray   # (N, 1, p, p) mm

    @classmethod
    def from_patches(cls, patches):
        lr = np.stack([p.lr_precip.filled(0.0)[None] for p in patches])
        anc = np.stack([p.input.to_array()[1:] for p in patches])
        label = np.stack([p.label.filled(0.0)[None] for p in patches])
        return cls(lr, anc, label)

    def __len__(self):
        return len(self.lr)

    def take(self, idx):
        return PatchArrays(self.lr[idx], self.anc[idx], self.label[idx])


def batch_losses(model, batch, eps=EPSILON, per_patch=True):
    """(L_c, L_d) tensors for one batch; both in normalized precipitation units."""
    std_p = model.norm_stats.std[0]
    _, xi, up = amcn_forward(model, batch.lr, batch.anc)
    rho = (batch.label - up) / std_p
    l_c = charbonnier_loss(xi, rho, eps, per_patch)
    # hr prediction in normalized units is f_u(lr)/std + xi
    hr_n = nn.add_const(xi, (up / std_p).astype(xi.dtype))
    lr_n = (batch.lr / std_p).astype(xi.dtype)
    l_d = degradation_loss(lr_n, hr_n, eps, model.config.scale_factor, per_patch)
    return l_c, l_d


def train(model, patches, config, on_iteration=None):
    """Adam over seeded shuffled mini-batches; returns (model, history).

    ``history`` holds one row per iteration with the columns of
    ``LOSS_COLUMNS``. The last partial batch of each epoch is dropped.
    """
    data = patches if isinstance(patches, PatchArrays) else PatchArrays.from_patches(patches)
    n = len(data)
    if n == 0:
        raise ValueError("empty patch set")
    if model.norm_stats is None:
        raise ValueError("model needs normalization statistics before training")
    bs = min(config.batch_size, n)
    n_batches = n // bs
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    state = nn.AdamState.for_params(params, lr=config.lr0)
    use_deg = config.use_degradation_loss
    history = []
    it = 0
    for epoch in range(config.epochs):
        state.lr = nn.step_lr(epoch, config.lr0, config.lr_halving_period)
        order = rng.permutation(n)
        for b in range(n_batches):
            batch = data.take(np.sort(order[b * bs:(b + 1) * bs]))
            model.zero_grad()
            try:
                l_c, l_d = batch_losses(model, batch, config.eps, config.per_patch)
                total, report = weighted_total(l_c, l_d, use_deg)
            except nn.NonFiniteError as exc:
                raise TrainingDivergedError(f"epoch {epoch} iteration {it}: {exc}") from exc
            if not math.isfinite(report.L_total):
                raise TrainingDivergedError(f"epoch {epoch} iteration {it}: loss is {report.L_total}")
            total.backward()
            grads = [p.grad for p in params]
            for p, g in zip(params, grads):
                if g is not None and not np.all(np.isfinite(g)):
                    raise TrainingDivergedError(f"epoch {epoch} iteration {it}: non-finite gradient "
                                                f"for {p.name}")
            nn.adam_step(params, grads, state)
            row = (epoch, it, report.L_c, report.L_d, report.alpha, report.beta, report.L_total)
            history.append(row)
            if on_iteration is not None:
                on_iteration(row)
            it += 1
    model.zero_grad()
    return model, history


def new_model(norm_stats, config, model_config=None):
    """Freshly initialized model (seeded by the run seed) with the run's ablation flags."""
    mc = model_config or AmcnConfig(base_channels=16, rdb_growth=8, scale_factor=config.scale)
    mc = replace(mc, scale_factor=config.scale, **config.model_flags())
    return AmcnModel(mc, norm_stats=norm_stats, seed=config.seed)


def write_history(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for row in history:
            w.writerow([row[0], row[1], *(repr(float(v)) for v in row[2:])])


def read_history(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != LOSS_COLUMNS:
        raise ValueError(f"{path}: not a loss history file")
    return [(int(r[0]), int(r[1]), *map(float, r[2:])) for r in rows[1:]]
