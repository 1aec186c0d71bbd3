"""Synthetic desk-scale scenes standing in for satellite precipitation and predictors.

Precipitation is a sum of skewed smooth rain cells modulated by fine
terrain and vegetation texture, so the coarse field misses detail that the
high-resolution ancillary channels can explain.
"""
from __future__ import annotations

from fractions import Fraction
from typing import NamedTuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .grid import GeoGrid, GridStack, StationRecord, StationSet, bilinear_resample, make_coordinate_channels
from .preprocess import ANCILLARY_CHANNELS, derive_indices

TILE_COLS, TILE_ROWS = 5, 4
RAW_BANDS = ("dem", "lstd", "lstn", "evi", "nir", "mir", "swir2")


class Scene(NamedTuple):
    hr: GeoGrid
    lr: GeoGrid
    ancillary: GridStack
    stations: StationSet


def _unit(a):
    a = a - a.mean()
    s = a.std()
    return a / s if s > 0 else a


def _texture(rng, shape, sigma):
    return _unit(gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect"))


def _bumps(rng, shape, n, sigma_range, amp_sigma):
    rows, cols = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    out = np.zeros(shape)
    for _ in range(n):
        r0, c0 = rng.uniform(-4, shape[0] + 4), rng.uniform(-4, shape[1] + 4)
        s1, s2 = rng.uniform(*sigma_range, size=2)
        theta = rng.uniform(0, np.pi)
        dr, dc = rows - r0, cols - c0
        u = dr * np.cos(theta) + dc * np.sin(theta)
        v = -dr * np.sin(theta) + dc * np.cos(theta)
        amp = rng.lognormal(0.0, amp_sigma)
        out += amp * np.exp(-0.5 * ((u / s1) ** 2 + (v / s2) ** 2))
    return out


def raw_fields(seed, nrows, ncols):
    """Float64 arrays: precipitation (mm/month) and the raw predictor bands."""
    rng = np.random.default_rng(seed)
    shape = (nrows, ncols)
    hills = _unit(_bumps(rng, shape, 6, (10, 25), 0.3))
    terrain_fine = _texture(rng, shape, 1.2)
    veg_fine = _texture(rng, shape, 1.5)
    dem = 1500.0 + 500.0 * hills + 120.0 * terrain_fine

    cells = _bumps(rng, shape, int(rng.integers(6, 11)), (3, 10), 0.8)
    smooth = 8.0 + 120.0 * cells
    precip = smooth * np.exp(0.35 * terrain_fine + 0.2 * veg_fine)

    wet = _unit(gaussian_filter(cells, 2.0))
    evi = np.clip(0.45 + 0.12 * wet + 0.06 * veg_fine + 0.03 * _texture(rng, shape, 2.0), 0.05, 0.9)
    lstd = 300.0 - 20.0 * evi - 3.0 * wet - 0.004 * (dem - 1500.0) + 0.8 * _texture(rng, shape, 1.0)
    lstn = 283.0 - 0.006 * (dem - 1500.0) - 1.5 * wet + 0.5 * _texture(rng, shape, 1.0)
    nir = np.clip(0.25 + 0.25 * evi + 0.01 * _texture(rng, shape, 1.0), 0.01, 0.95)
    mir = np.clip(0.22 - 0.03 * wet - 0.02 * terrain_fine + 0.01 * _texture(rng, shape, 1.0), 0.01, 0.95)
    swir2 = np.clip(0.15 - 0.02 * wet - 0.03 * veg_fine + 0.01 * _texture(rng, shape, 1.0), 0.01, 0.95)
    bands = dict(dem=dem, lstd=lstd, lstn=lstn, evi=evi, nir=nir, mir=mir, swir2=swir2)
    return np.maximum(precip, 0.0), bands, rng


def synth_scene(seed, nrows=64, ncols=64, r=4, n_stations=24, station_bias=2.0, station_noise=1.0,
                x_min=None, y_min=None, cell_size=0.01):
    """One synthetic scene: HR precipitation, its coarse version, 9 ancillary channels, stations."""
    if nrows % r or ncols % r:
        raise ValueError(f"scene size {nrows}x{ncols} is not divisible by the scale factor {r}")
    precip, bands, rng = raw_fields(seed, nrows, ncols)
    # scenes tile one fixed 5x4 region so coordinate channels stay in range
    tile = seed % (TILE_COLS * TILE_ROWS)
    if x_min is None:
        x_min = 100.0 + (tile % TILE_COLS) * ncols * cell_size
    if y_min is None:
        y_min = 25.0 + (tile // TILE_COLS) * nrows * cell_size
    hr = GeoGrid(precip.astype(np.float32), x_min, y_min, cell_size, name="precip")
    lr = bilinear_resample(hr, Fraction(1, r))
    raw = GridStack.from_grids([hr.with_values(bands[b], name=b) for b in RAW_BANDS], RAW_BANDS)
    indices, _ = derive_indices(raw)
    lon, lat = make_coordinate_channels(hr)
    channels = {"lon": lon, "lat": lat, "dem": raw["dem"]}
    for name in indices.channel_names:
        channels[name] = indices[name]
    ancillary = GridStack.from_grids([channels[n] for n in ANCILLARY_CHANNELS], ANCILLARY_CHANNELS)

    n_stations = min(n_stations, nrows * ncols)
    flat = rng.choice(nrows * ncols, size=n_stations, replace=False)
    records = []
    for i, k in enumerate(sorted(flat)):
        row, col = divmod(int(k), ncols)
        lon_c = x_min + (col + 0.5) * cell_size
        lat_c = y_min + (nrows - row - 0.5) * cell_size
        value = float(hr.values[row, col]) + station_bias + station_noise * rng.standard_normal()
        # stored values are float32-representable so gauge and raster arithmetic agree
        records.append(StationRecord(f"S{seed:03d}_{i:03d}", lon_c, lat_c,
                                     float(np.float32(max(value, 0.0)))))
    return Scene(hr, lr, ancillary, StationSet(tuple(records)))
