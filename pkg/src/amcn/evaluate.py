"""Image- and station-based metrics and the simulated downscaling experiment."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .grid import ExtentError, bilinear_resample, locate
from .model import AmcnModel, downscale


class InsufficientDataError(ValueError):
    """Fewer than two usable sample pairs."""


@dataclass(frozen=True)
class Metrics:
    r2: float
    bias: float
    rmse: float
    n: int

    def row(self):
        return (self.r2, self.bias, self.rmse, self.n)


METRIC_COLUMNS = ("r2", "bias", "rmse", "n")


def metrics_from_pairs(pred, truth):
    """bias = mean(pred - truth), rmse, and r2 as the squared Pearson correlation.

    r2 is NaN when either sample has zero variance.
    """
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"sample counts differ: {pred.size} vs {truth.size}")
    ok = np.isfinite(pred) & np.isfinite(truth)
    pred, truth = pred[ok], truth[ok]
    n = pred.size
    if n < 2:
        raise InsufficientDataError(f"need at least 2 valid pairs, got {n}")
    d = pred - truth
    bias = float(d.mean())
    rmse = float(np.sqrt((d * d).mean()))
    pc = pred - pred.mean()
    tc = truth - truth.mean()
    spp = float((pc * pc).sum())
    stt = float((tc * tc).sum())
    if spp <= 0.0 or stt <= 0.0:
        r2 = math.nan
    else:
        r = float((pc * tc).sum()) / math.sqrt(spp * stt)
        r2 = min(r * r, 1.0)
    return Metrics(r2, bias, rmse, n)


def evaluate_image(pred, truth):
    """Metrics over the pixels valid in both co-registered grids."""
    if not pred.same_grid(truth):
        raise ExtentError("prediction and truth grids are not co-registered")
    ok = ~(pred.mask | truth.mask)
    return metrics_from_pairs(pred.values[ok], truth.values[ok])


def station_pairs(pred, stations):
    """(predicted, observed) arrays for stations with a valid pixel and a value."""
    mask = pred.mask
    p, o = [], []
    for rec in stations:
        if rec.value is None or not math.isfinite(rec.value):
            continue
        r, c = locate(pred, rec.lon, rec.lat)
        if mask[r, c]:
            continue
        p.append(float(pred.values[r, c]))
        o.append(float(rec.value))
    return np.asarray(p), np.asarray(o)


def evaluate_stations(pred, stations):
    p, o = station_pairs(pred, stations)
    return metrics_from_pairs(p, o)


def degradation_rmse(pred, lr):
    """RMSE between the bilinear downsample of an HR prediction and the LR input."""
    r = Fraction(lr.nrows, pred.nrows)
    down = bilinear_resample(pred, r)
    if down.shape != lr.shape:
        raise ExtentError(f"downsampled prediction {down.shape} does not match the LR grid {lr.shape}")
    ok = ~(down.mask | lr.mask)
    d = down.values[ok].astype(np.float64) - lr.values[ok].astype(np.float64)
    if d.size == 0:
        raise InsufficientDataError("no valid pixels to compare")
    return float(np.sqrt((d * d).mean()))


@dataclass
class SceneResult:
    index: int
    image: Metrics
    stations: Metrics
    baseline_image: Metrics
    baseline_stations: Metrics
    degradation_rmse: float
    baseline_degradation_rmse: float


@dataclass
class ExperimentReport:
    scenes: list = field(default_factory=list)
    pooled_image: Metrics = None
    pooled_stations: Metrics = None
    pooled_baseline_image: Metrics = None
    pooled_baseline_stations: Metrics = None
    degradation_rmse: float = math.nan
    baseline_degradation_rmse: float = math.nan

    def rows(self):
        out = []
        for s in self.scenes:
            for kind, m, b in (("image", s.image, s.baseline_image),
                               ("stations", s.stations, s.baseline_stations)):
                out.append((str(s.index), kind, "amcn", *m.row()))
                out.append((str(s.index), kind, "bilinear", *b.row()))
        for kind, m, b in (("image", self.pooled_image, self.pooled_baseline_image),
                           ("stations", self.pooled_stations, self.pooled_baseline_stations)):
            out.append(("pooled", kind, "amcn", *m.row()))
            out.append(("pooled", kind, "bilinear", *b.row()))
        return out

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("scene", "kind", "method", *METRIC_COLUMNS))
            for row in self.rows():
                w.writerow([*row[:3], *(repr(float(v)) for v in row[3:6]), row[6]])
            w.writerow(("pooled", "degradation_rmse", "amcn", repr(self.degradation_rmse), "", "", ""))
            w.writerow(("pooled", "degradation_rmse", "bilinear", repr(self.baseline_degradation_rmse),
                        "", "", ""))

    def table(self):
        lines = [f"{'scene':>7} {'kind':>9} {'method':>9} {'r2':>8} {'bias':>9} {'rmse':>9} {'n':>6}"]
        for scene, kind, method, r2, bias, rmse, n in self.rows():
            lines.append(f"{scene:>7} {kind:>9} {method:>9} {r2:8.4f} {bias:9.3f} {rmse:9.3f} {n:6d}")
        lines.append(f"degradation RMSE: amcn {self.degradation_rmse:.4f}, "
                     f"bilinear {self.baseline_degradation_rmse:.4f}")
        return "\n".join(lines)


def _pool(pairs):
    return metrics_from_pairs(np.concatenate([p for p, _ in pairs]), np.concatenate([t for _, t in pairs]))


def simulated_experiment(model, scenes):
    """Degrade each HR truth by the model scale, downscale it back and score both ways.

    The bilinear baseline is the same pipeline with the learned residual
    switched off.
    """
    if not isinstance(model, AmcnModel):
        raise TypeError("simulated_experiment needs an AmcnModel")
    r = model.config.scale_factor
    report = ExperimentReport()
    img, img_b, st, st_b, deg, deg_b = [], [], [], [], [], []
    for i, sc in enumerate(scenes):
        if sc.hr.nrows % r or sc.hr.ncols % r:
            raise ExtentError(f"scene {i} size {sc.hr.shape} is not divisible by the model scale {r}")
        lr = bilinear_resample(sc.hr, Fraction(1, r))
        pred = downscale(model, lr, sc.ancillary)
        base = bilinear_resample(lr, Fraction(r))
        ok = ~(pred.mask | sc.hr.mask)
        ok_b = ~(base.mask | sc.hr.mask)
        img.append((pred.values[ok], sc.hr.values[ok]))
        img_b.append((base.values[ok_b], sc.hr.values[ok_b]))
        st.append(station_pairs(pred, sc.stations))
        st_b.append(station_pairs(base, sc.stations))
        d_pred = bilinear_resample(pred, Fraction(1, r))
        d_base = bilinear_resample(base, Fraction(1, r))
        deg.append((d_pred.filled().ravel(), lr.filled().ravel()))
        deg_b.append((d_base.filled().ravel(), lr.filled().ravel()))
        report.scenes.append(SceneResult(
            i, metrics_from_pairs(*img[-1]), metrics_from_pairs(*st[-1]),
            metrics_from_pairs(*img_b[-1]), metrics_from_pairs(*st_b[-1]),
            degradation_rmse(pred, lr), degradation_rmse(base, lr)))
    report.pooled_image = _pool(img)
    report.pooled_baseline_image = _pool(img_b)
    report.pooled_stations = _pool(st)
    report.pooled_baseline_stations = _pool(st_b)
    report.degradation_rmse = _pool(deg).rmse
    report.baseline_degradation_rmse = _pool(deg_b).rmse
    return report
