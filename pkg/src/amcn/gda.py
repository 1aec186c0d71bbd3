"""Geographic difference analysis: additive station-residual correction by IDW.

Residuals are interpolated on the fine grid using planar distances in
degrees. A pixel whose center coincides with a station takes that
station's residual exactly, so calibrated values reproduce the gauges.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .grid import GeoGrid, locate, pixel_centers

HIT_DISTANCE = 1e-9
RESIDUAL_COLUMNS = ("station_id", "lon", "lat", "observed", "predicted", "delta")


class NoStationsError(ValueError):
    """No station has both a value and a valid pixel."""


@dataclass(frozen=True)
class Residual:
    station_id: str
    lon: float
    lat: float
    observed: float
    predicted: float

    @property
    def delta(self):
        return self.observed - self.predicted


@dataclass
class GdaResult:
    calibrated: GeoGrid
    surface: np.ndarray        # float64 correction added to every valid pixel
    residuals: list
    skipped: int


def station_residuals(downscaled, stations):
    """Residuals (observed - predicted) and the number of stations skipped.

    Stations without a value or over a nodata pixel are skipped.
    """
    mask = downscaled.mask
    out, skipped = [], 0
    for rec in stations:
        if rec.value is None or not math.isfinite(rec.value):
            skipped += 1
            continue
        r, c = locate(downscaled, rec.lon, rec.lat)
        if mask[r, c]:
            skipped += 1
            continue
        out.append(Residual(rec.station_id, rec.lon, rec.lat, float(rec.value),
                            float(downscaled.values[r, c])))
    if not out:
        raise NoStationsError("no usable stations for calibration")
    return out, skipped


def idw_values(residuals, template, power=2.0, max_neighbors=12):
    """Float64 IDW surface of the residual deltas at every pixel center of ``template``."""
    if not residuals:
        raise NoStationsError("idw_surface needs at least one residual")
    if power <= 0 or max_neighbors < 1:
        raise ValueError("power must be positive and max_neighbors at least 1")
    pts = np.array([(r.lon, r.lat) for r in residuals], dtype=np.float64)
    deltas = np.array([r.delta for r in residuals], dtype=np.float64)
    lon, lat = pixel_centers(template)
    lon2, lat2 = np.meshgrid(lon, lat)
    query = np.column_stack([lon2.ravel(), lat2.ravel()])
    k = min(max_neighbors, len(residuals))
    dist, idx = cKDTree(pts).query(query, k=k)
    dist = np.asarray(dist, dtype=np.float64).reshape(len(query), k)
    idx = np.asarray(idx).reshape(len(query), k)
    vals = deltas[idx]
    hit = dist[:, 0] < HIT_DISTANCE
    out = np.empty(len(query))
    with np.errstate(divide="ignore"):
        w = 1.0 / dist[~hit] ** power
    out[~hit] = (w * vals[~hit]).sum(axis=1) / w.sum(axis=1)
    out[hit] = vals[hit, 0]
    return out.reshape(template.shape)


def idw_surface(residuals, template, power=2.0, max_neighbors=12):
    return GeoGrid(idw_values(residuals, template, power, max_neighbors).astype(np.float32),
                   template.x_min, template.y_min, template.cell_size, template.nodata, name="gda_delta")


def calibrate(downscaled, stations, power=2.0, max_neighbors=12):
    """Full GDA pass: residuals, surface, and the clamped calibrated raster."""
    residuals, skipped = station_residuals(downscaled, stations)
    surface = idw_values(residuals, downscaled, power, max_neighbors)
    # add in float64 so station pixels land exactly on the gauge value
    values = np.maximum(downscaled.values.astype(np.float64) + surface, 0.0)
    calibrated = GeoGrid.from_masked(values, downscaled.mask, downscaled, name=downscaled.name)
    return GdaResult(calibrated, surface, residuals, skipped)


def apply_gda(downscaled, stations, power=2.0, max_neighbors=12):
    return calibrate(downscaled, stations, power, max_neighbors).calibrated


def leave_one_out(downscaled, stations, power=2.0, max_neighbors=12):
    """For each usable station: (id, observed, estimate calibrated without it)."""
    residuals, _ = station_residuals(downscaled, stations)
    if len(residuals) < 2:
        raise NoStationsError("leave-one-out needs at least two usable stations")
    out = []
    for i, res in enumerate(residuals):
        rest = residuals[:i] + residuals[i + 1:]
        pts = np.array([(r.lon, r.lat) for r in rest])
        deltas = np.array([r.delta for r in rest])
        k = min(max_neighbors, len(rest))
        dist, idx = cKDTree(pts).query([res.lon, res.lat], k=k)
        dist = np.atleast_1d(dist)
        idx = np.atleast_1d(idx)
        if dist[0] < HIT_DISTANCE:
            delta = deltas[idx[0]]
        else:
            w = 1.0 / dist ** power
            delta = float((w * deltas[idx]).sum() / w.sum())
        out.append((res.station_id, res.observed, max(res.predicted + delta, 0.0)))
    return out


def write_residuals(residuals, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(RESIDUAL_COLUMNS)
        for r in residuals:
            w.writerow([r.station_id, repr(r.lon), repr(r.lat), repr(r.observed), repr(r.predicted),
                        repr(r.delta)])
