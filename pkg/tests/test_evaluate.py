import math

import numpy as np
import pytest

from amcn.evaluate import (
    InsufficientDataError, degradation_rmse, evaluate_image, evaluate_stations, metrics_from_pairs,
    simulated_experiment,
)
from amcn.grid import ExtentError, GeoGrid, StationRecord, StationSet, bilinear_resample
from amcn.model import AmcnConfig, AmcnModel
from amcn.synth import synth_scene
from amcn.train import TrainConfig, build_training_set


def g(values, **kw):
    return GeoGrid(np.asarray(values, dtype=np.float32), 0.0, 0.0, 1.0, **kw)


def truth(seed=0, shape=(8, 8)):
    return g(np.random.default_rng(seed).gamma(2.0, 10.0, shape))


def test_perfect_prediction():
    t = truth()
    m = evaluate_image(t, t)
    assert (m.r2, m.bias, m.rmse) == (1.0, 0.0, 0.0)
    assert m.n == 64


def test_constant_shift():
    t = truth()
    m = evaluate_image(t.with_values(t.values.astype(np.float64) + 2.0), t)
    assert m.bias == pytest.approx(2.0, abs=1e-5)
    assert m.rmse == pytest.approx(2.0, abs=1e-5)
    assert m.r2 == pytest.approx(1.0, abs=1e-12)


def test_negated_field():
    t = truth(1)
    m = evaluate_image(t.with_values(-t.values), t)
    assert m.r2 == pytest.approx(1.0, abs=1e-12)
    assert m.bias == pytest.approx(-2 * t.values.astype(np.float64).mean(), rel=1e-12)


def test_rmse_decomposition_and_invariants():
    rng = np.random.default_rng(5)
    for _ in range(200):
        n = int(rng.integers(2, 50))
        p, t = rng.normal(0, rng.uniform(0.1, 10), n), rng.normal(3, 2, n)
        m = metrics_from_pairs(p, t)
        d = p - t
        assert m.rmse ** 2 == pytest.approx(m.bias ** 2 + d.var(), rel=1e-6)
        assert m.r2 <= 1 and m.rmse >= abs(m.bias) - 1e-12
        perm = rng.permutation(n)
        m2 = metrics_from_pairs(p[perm], t[perm])
        assert m2.rmse == pytest.approx(m.rmse, rel=1e-12) and m2.r2 == pytest.approx(m.r2, rel=1e-12)


def test_zero_variance_flags_r2():
    m = metrics_from_pairs([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    assert math.isnan(m.r2) and m.bias == -1.0


def test_nodata_excluded_and_insufficient():
    t = g([[1.0, 2.0, -9999.0]])
    assert evaluate_image(t, t).n == 2
    with pytest.raises(InsufficientDataError):
        evaluate_image(g([[1.0, -9999.0]]), g([[1.0, 2.0]]))


def test_misregistered_grids():
    with pytest.raises(ExtentError):
        evaluate_image(g([[1.0, 2.0]]), GeoGrid(np.ones((1, 2), np.float32), 0.5, 0.0, 1.0))


def _stations(grid, cells, values=None):
    recs = []
    for i, (r, c) in enumerate(cells):
        v = float(grid.values[r, c]) if values is None else values[i]
        recs.append(StationRecord(f"s{i}", grid.x_min + c + 0.5, grid.y_min + grid.nrows - r - 0.5, v))
    return StationSet(tuple(recs))


def test_stations_from_pixels_are_perfect():
    t = truth(2)
    m = evaluate_stations(t, _stations(t, [(0, 0), (3, 4), (7, 7), (5, 1)]))
    assert (m.r2, m.bias, m.rmse, m.n) == (1.0, 0.0, 0.0, 4)


def test_single_usable_station():
    t = truth(3)
    with pytest.raises(InsufficientDataError):
        evaluate_stations(t, _stations(t, [(1, 1)]))


def test_station_over_nodata_excluded():
    v = truth(4).values.copy()
    v[2, 2] = -9999.0
    t = g(v)
    s = _stations(t, [(0, 0), (1, 1), (2, 2), (3, 3)], [1.0, 2.0, 3.0, 4.0])
    assert evaluate_stations(t, s).n == 3


def test_degradation_rmse_of_exact_upsample():
    lr = truth(6, (4, 4))
    assert degradation_rmse(bilinear_resample(lr, 1), lr) == 0.0
    flat = g(np.full((4, 4), 5.0))
    assert degradation_rmse(bilinear_resample(flat, 4), flat) == 0.0


def test_zero_residual_model_matches_baseline():
    scenes = [synth_scene(40 + i, 32, 32, 4) for i in range(2)]
    _, stats = build_training_set(scenes, TrainConfig(patch=16, stride=16, scale=4))
    model = AmcnModel(AmcnConfig(base_channels=8, rdb_growth=8, rdb_layers=2, n_levels=1, scale_factor=4),
                      norm_stats=stats, seed=0)
    model.params["recon.w"].data[...] = 0
    model.params["recon.b"].data[...] = 0
    rep = simulated_experiment(model, scenes)
    assert rep.pooled_image == rep.pooled_baseline_image
    assert rep.pooled_stations == rep.pooled_baseline_stations
    assert rep.degradation_rmse == rep.baseline_degradation_rmse
    assert len(rep.scenes) == 2 and len(rep.rows()) == 2 * 4 + 4
