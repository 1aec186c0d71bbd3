"""Ancillary index channels, outlier screening, gap filling and normalization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial import cKDTree

from .grid import GeoGrid, GridStack, ExtentError

CANONICAL_CHANNELS = ("precip", "lon", "lat", "dem", "lstd", "lstn", "evi", "tvdi", "ndwi", "lswi")
ANCILLARY_CHANNELS = CANONICAL_CHANNELS[1:]


class DegenerateEdgeError(ValueError):
    """Wet/dry edges are missing, vertical, crossed or too close together."""


class ZeroVarianceError(ValueError):
    pass


@dataclass(frozen=True)
class EdgeFit:
    wet_intercept: float
    wet_slope: float
    dry_intercept: float
    dry_slope: float
    n_bins: int

    def wet(self, evi):
        return self.wet_intercept + self.wet_slope * evi

    def dry(self, evi):
        return self.dry_intercept + self.dry_slope * evi


def _check_coregistered(*grids):
    for g in grids[1:]:
        if not grids[0].same_grid(g):
            raise ExtentError("input grids are not co-registered")


def _line_fit(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xm = x.mean()
    sxx = ((x - xm) ** 2).sum()
    if sxx <= 1e-12 * max(1.0, (x * x).sum()):
        raise DegenerateEdgeError("edge points share one EVI value; the fitted line would be vertical")
    slope = ((x - xm) * (y - y.mean())).sum() / sxx
    return y.mean() - slope * xm, slope


def fit_tvdi_edges(lst, evi, n_bins=20):
    """Fit the wet and dry edges of the LST/EVI feature space.

    Valid pixels are split into ``n_bins`` equal-width EVI bins. The pixel
    with the highest LST in each bin is a dry-edge point and the lowest a
    wet-edge point (each at its own EVI); a least-squares line goes through
    each point set.
    """
    _check_coregistered(lst, evi)
    ok = ~(lst.mask | evi.mask)
    t = lst.values[ok].astype(np.float64)
    e = evi.values[ok].astype(np.float64)
    if e.size == 0:
        raise DegenerateEdgeError("no valid pixels")
    lo, hi = e.min(), e.max()
    if hi <= lo:
        raise DegenerateEdgeError("fewer than 2 non-empty EVI bins")
    idx = np.minimum(((e - lo) / ((hi - lo) / n_bins)).astype(np.intp), n_bins - 1)
    dry_x, dry_y, wet_x, wet_y = [], [], [], []
    for b in range(n_bins):
        sel = np.flatnonzero(idx == b)
        if sel.size == 0:
            continue
        i_max = sel[np.argmax(t[sel])]
        i_min = sel[np.argmin(t[sel])]
        dry_x.append(e[i_max])
        dry_y.append(t[i_max])
        wet_x.append(e[i_min])
        wet_y.append(t[i_min])
    if len(dry_x) < 2:
        raise DegenerateEdgeError("fewer than 2 non-empty EVI bins")
    wet_i, wet_s = _line_fit(wet_x, wet_y)
    dry_i, dry_s = _line_fit(dry_x, dry_y)
    fit = EdgeFit(float(wet_i), float(wet_s), float(dry_i), float(dry_s), n_bins)
    if not all(np.isfinite([wet_i, wet_s, dry_i, dry_s])):
        raise DegenerateEdgeError("non-finite edge coefficients")
    if fit.dry(lo) <= fit.wet(lo) or fit.dry(hi) <= fit.wet(hi):
        raise DegenerateEdgeError("dry edge does not lie above the wet edge over the EVI range")
    return fit


def compute_tvdi(lst, evi, edges):
    """(T - T_wet) / (T_dry - T_wet) with edges evaluated at each pixel's EVI, clamped to [0, 1]."""
    _check_coregistered(lst, evi)
    mask = lst.mask | evi.mask
    e = evi.values.astype(np.float64)
    t = lst.values.astype(np.float64)
    tmin = edges.wet(e)
    span = edges.dry(e) - tmin
    if np.any(span[~mask] < 1e-6):
        raise DegenerateEdgeError("dry and wet edges are closer than 1e-6 at some pixel")
    with np.errstate(divide="ignore", invalid="ignore"):
        tvdi = np.clip((t - tmin) / span, 0.0, 1.0)
    return GeoGrid.from_masked(tvdi, mask, lst, name="tvdi")


def _normalized_difference(a, b, name):
    _check_coregistered(a, b)
    va = a.values.astype(np.float64)
    vb = b.values.astype(np.float64)
    den = va + vb
    mask = a.mask | b.mask | (den <= 1e-9)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (va - vb) / den
    return GeoGrid.from_masked(out, mask, a, name=name)


def compute_ndwi(nir, mir):
    return _normalized_difference(nir, mir, "ndwi")


def compute_lswi(nir, swir2):
    return _normalized_difference(nir, swir2, "lswi")


def screen_outliers(grid, window=3, k=3.0):
    """Set to nodata pixels that deviate from their neighbors by more than k sigma.

    The statistics use the valid pixels of the ``window`` x ``window``
    neighborhood excluding the center pixel itself; a pixel with fewer than
    two valid neighbors is left alone.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be an odd integer >= 3, got {window}")
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    h = window // 2
    mask = grid.mask
    v = grid.filled(0.0)
    valid = (~mask).astype(np.float64)
    vp = np.pad(v, h)
    wp = np.pad(valid, h)
    ring = np.ones((window, window))
    ring[h, h] = 0.0
    vw = sliding_window_view(vp, (window, window))
    ww = sliding_window_view(wp, (window, window)) * ring
    n = ww.sum(axis=(2, 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        mean = (vw * ww).sum(axis=(2, 3)) / n
        dev2 = ((vw - mean[:, :, None, None]) ** 2 * ww).sum(axis=(2, 3))
        std = np.sqrt(dev2 / n)
        flag = (~mask) & (n >= 2) & (np.abs(v - mean) > k * std)
    if not flag.any():
        return grid
    out = grid.values.copy()
    out[flag] = np.float32(grid.nodata)
    return grid.with_values(out)


def idw_weights_sum(dist, values, power):
    """Weighted mean along the last axis with weights d**-power."""
    w = 1.0 / dist ** power
    return (w * values).sum(axis=-1) / w.sum(axis=-1)


def idw_fill(grid, power=2.0, max_neighbors=8):
    """Fill every nodata pixel from its nearest valid pixels by inverse-distance weighting."""
    mask = grid.mask
    if mask.all():
        raise ValueError("cannot fill a grid with no valid pixels")
    if not mask.any():
        return grid
    valid_rc = np.argwhere(~mask)
    hole_rc = np.argwhere(mask)
    k = min(max_neighbors, len(valid_rc))
    dist, idx = cKDTree(valid_rc.astype(np.float64)).query(hole_rc.astype(np.float64), k=k)
    dist = np.asarray(dist, dtype=np.float64).reshape(len(hole_rc), k)
    idx = np.asarray(idx).reshape(len(hole_rc), k)
    vals = grid.values[~mask].astype(np.float64)[idx]
    out = grid.values.astype(np.float64)
    out[mask] = idw_weights_sum(dist, vals, power)
    return grid.with_values(out)


def aggregate_time(stack):
    """Per-pixel mean over the valid members of a list of co-registered grids."""
    grids = list(stack)
    if not grids:
        raise ValueError("aggregate_time needs at least one grid")
    _check_coregistered(*grids)
    total = np.zeros(grids[0].shape, dtype=np.float64)
    count = np.zeros(grids[0].shape, dtype=np.int64)
    for g in grids:
        ok = ~g.mask
        total[ok] += g.values[ok]
        count += ok
    with np.errstate(divide="ignore", invalid="ignore"):
        mean = total / count
    return GeoGrid.from_masked(mean, count == 0, grids[0])


# ---------------------------------------------------------------- normalization

@dataclass(frozen=True)
class NormStats:
    mean: tuple
    std: tuple
    channel_names: tuple = CANONICAL_CHANNELS

    def __post_init__(self):
        if not (len(self.mean) == len(self.std) == len(self.channel_names)):
            raise ValueError("mean, std and channel_names must have equal length")
        if any(not s > 0 for s in self.std):
            raise ZeroVarianceError("every channel needs a positive standard deviation")

    def arrays(self, dtype=np.float64):
        return np.asarray(self.mean, dtype=dtype), np.asarray(self.std, dtype=dtype)


def fit_norm_stats(patches, channel_names=None):
    """Per-channel mean and population std over the input channels of all patches."""
    patches = list(patches)
    if len(patches) < 2:
        raise ValueError("fit_norm_stats needs at least two patches")
    names = tuple(channel_names or patches[0].input.channel_names)
    data = np.stack([p.input.to_array() for p in patches])  # (N, C, H, W) float64
    mean = data.mean(axis=(0, 2, 3))
    std = np.sqrt(((data - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3)))
    for name, m, s in zip(names, mean, std):
        if not s > 1e-12 * max(1.0, abs(m)):
            raise ZeroVarianceError(f"channel {name!r} has zero variance")
    return NormStats(tuple(float(m) for m in mean), tuple(float(s) for s in std), names)


def apply_norm(x, stats, channels=None, axis=-3):
    """z-score the channel axis of an array (channels selects a subset of stats)."""
    mean, std = stats.arrays()
    if channels is not None:
        mean, std = mean[list(channels)], std[list(channels)]
    shape = [1] * np.ndim(x)
    shape[axis] = len(mean)
    x = np.asarray(x)
    return ((x - mean.reshape(shape)) / std.reshape(shape)).astype(x.dtype, copy=False)


def invert_norm(z, stats, channels=None, axis=-3):
    mean, std = stats.arrays()
    if channels is not None:
        mean, std = mean[list(channels)], std[list(channels)]
    shape = [1] * np.ndim(z)
    shape[axis] = len(mean)
    z = np.asarray(z)
    return (z * std.reshape(shape) + mean.reshape(shape)).astype(z.dtype, copy=False)


def normalize_stack(stack, stats):
    """Normalized copy of a GridStack; nodata pixels stay nodata."""
    arr = apply_norm(stack.to_array(), stats)
    mask = stack.mask
    return GridStack(tuple(GeoGrid.from_masked(a, mask | c.mask, c)
                           for a, c in zip(arr, stack.channels)), stack.channel_names)


def derive_indices(raw, n_bins=20, window=3, k=3.0, power=2.0, max_neighbors=8):
    """Screen/fill optical bands and derive the drought and water indices from a raw band stack.

    ``raw`` must contain lstd, lstn, evi, nir, mir and swir2; the result holds
    lstd, lstn, evi, tvdi, ndwi and lswi.
    """
    def clean(name):
        return idw_fill(screen_outliers(raw[name], window, k), power, max_neighbors)

    bands = {name: clean(name) for name in ("lstd", "lstn", "evi", "nir", "mir", "swir2")}
    edges = fit_tvdi_edges(bands["lstd"], bands["evi"], n_bins)
    out = [bands["lstd"], bands["lstn"], bands["evi"],
           compute_tvdi(bands["lstd"], bands["evi"], edges),
           compute_ndwi(bands["nir"], bands["mir"]),
           compute_lswi(bands["nir"], bands["swir2"])]
    names = ("lstd", "lstn", "evi", "tvdi", "ndwi", "lswi")
    return GridStack.from_grids(out, names), edges
