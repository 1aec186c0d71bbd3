"""Acceptance suite: one test per criterion, each at its stated tolerance.

The summary at the end of the pytest run prints one PASS/FAIL line per
criterion. The three training criteria share one set of trained models;
together they take roughly half an hour on one core.
"""
import io
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from amcn import nn
from amcn.cli import main as cli_main
from amcn.evaluate import evaluate_image, evaluate_stations
from amcn.experiment import Suite
from amcn.gda import apply_gda
from amcn.grid import GeoGrid, bilinear_resample, read_grid, write_grid
from amcn.losses import EPSILON, charbonnier_loss, degradation_loss, total_loss
from amcn.model import AmcnConfig, AmcnModel, amcn_forward, load_model, model_bytes, save_model
from amcn.preprocess import CANONICAL_CHANNELS, EdgeFit, NormStats, compute_lswi, compute_ndwi, compute_tvdi
from amcn.resample import resample_array
from amcn.synth import synth_scene
from amcn.train import TrainConfig, build_training_set, new_model, train
from amcn.verify import network_gradcheck, tiny_config

SEEDS = (0, 1, 2)
ABLATIONS = {
    "both": {},
    "gca only": {"use_mfca": False},
    "mfca only": {"use_gca": False},
    "none": {"use_gca": False, "use_mfca": False},
}
# relative margin within which a mean RMSE counts as tied with the lowest
TIE_TOLERANCE = 0.01


def criterion(number, title):
    return pytest.mark.criterion(number, title)


# ---------------------------------------------------------------- cheap criteria

@criterion(1, "full-network gradcheck <= 1e-4 within 2 min")
def test_criterion_01_gradient_fidelity(record_property):
    t0 = time.perf_counter()
    report = network_gradcheck(tiny_config(), batch=2, patch=16, seed=0, tolerance=1e-4)
    elapsed = time.perf_counter() - t0
    record_property("max_rel_error", f"{report.max_rel_error:.2e}")
    record_property("checked", report.n_checked)
    record_property("seconds", f"{elapsed:.1f}")
    assert report.passed, "\n".join(report.lines())
    assert report.max_rel_error <= 1e-4
    assert elapsed <= 120.0


@criterion(2, "zeroed reconstruction reproduces bilinear upsampling bitwise")
def test_criterion_02_residual_identity(record_property):
    rng = np.random.default_rng(2024)
    configs = [tiny_config(), tiny_config(use_gca=False), tiny_config(use_mfca=False),
               AmcnConfig(base_channels=4, rdb_growth=4, rdb_layers=2, n_levels=2, scale_factor=2)]
    models = []
    for i, cfg in enumerate(configs):
        mean = tuple(rng.normal(0, 5, 10))
        std = tuple(rng.uniform(0.5, 20, 10))
        m = AmcnModel(cfg, norm_stats=NormStats(mean, std, CANONICAL_CHANNELS), seed=i, dtype=np.float64)
        m.params["recon.w"].data[...] = 0.0
        m.params["recon.b"].data[...] = 0.0
        models.append(m)
    for trial in range(100):
        m = models[trial % len(models)]
        r = m.config.scale_factor
        q = int(rng.integers(1, 5))
        b = int(rng.integers(1, 3))
        lr = rng.lognormal(2.0, 1.0, (b, 1, q, q))
        anc = rng.standard_normal((b, 9, q * r, q * r)) * 10
        pred, xi, _ = amcn_forward(m, lr, anc)
        expected = resample_array(lr, (q * r, q * r))
        assert pred.dtype == np.float64
        assert pred.data.tobytes() == expected.tobytes(), f"trial {trial}"
    record_property("inputs", 100)


@criterion(3, "loss identities on 10 000 random pairs")
def test_criterion_03_loss_identities(record_property):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(10_000):
        l_c, l_d = 10 ** rng.uniform(-3, 3, 2)
        rep = total_loss(l_c, l_d)
        assert rep.alpha + rep.beta == 1.0
        expected = (l_c * l_c + l_d * l_d) / (l_c + l_d)
        rel = abs(rep.L_total - expected) / expected
        worst = max(worst, rel)
        assert rel <= 1e-12
    for _ in range(20):
        shape = (int(rng.integers(1, 4)), 1, 8, 8)
        x = rng.standard_normal(shape)
        assert float(charbonnier_loss(nn.Tensor(x), x).data) == EPSILON
        # a zero coarse-scale residual: the LR field is the degradation of the prediction
        hr = rng.lognormal(1, 1, (shape[0], 1, 8, 8))
        lr = resample_array(hr, (2, 2))
        assert float(degradation_loss(lr, nn.Tensor(hr)).data) == EPSILON
    record_property("worst_rel", f"{worst:.1e}")


def _grid(values, cell=0.01):
    return GeoGrid(np.asarray(values, dtype=np.float32), 110.0, 30.0, cell)


@criterion(7, "GDA reproduces station values and removes station bias")
def test_criterion_07_gda_exactness(record_property):
    worst_bias = 0.0
    n_checked = 0
    for seed in range(5):
        sc = synth_scene(3000 + seed, 64, 64, 4, n_stations=40)
        lr = bilinear_resample(sc.hr, Fraction(1, 4))
        downscaled = bilinear_resample(lr, 4)
        calibrated = apply_gda(downscaled, sc.stations)
        for rec in sc.stations:
            col = int(math.floor((rec.lon - calibrated.x_min) / calibrated.cell_size))
            row = calibrated.nrows - 1 - int(math.floor((rec.lat - calibrated.y_min) / calibrated.cell_size))
            # stations sit at pixel centers and carry nonnegative values, so the clamp cannot fire here
            assert calibrated.values[row, col] == np.float32(rec.value)
            n_checked += 1
        m = evaluate_stations(calibrated, sc.stations)
        worst_bias = max(worst_bias, abs(m.bias))
        assert abs(m.bias) <= 1e-6
    record_property("stations", n_checked)
    record_property("max_abs_bias", f"{worst_bias:.1e}")


@criterion(8, "rmse^2 = bias^2 + var on 1 000 field pairs; perfect case")
def test_criterion_08_metric_correctness(record_property):
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(1000):
        shape = tuple(rng.integers(2, 20, 2))
        truth = _grid(rng.gamma(2.0, 20.0, shape))
        pred = _grid(truth.values * rng.uniform(0.5, 1.5) + rng.normal(rng.uniform(-5, 5), 3, shape))
        m = evaluate_image(pred, truth)
        d = pred.values.astype(np.float64) - truth.values.astype(np.float64)
        lhs, rhs = m.rmse ** 2, m.bias ** 2 + d.var()
        rel = abs(lhs - rhs) / rhs
        worst = max(worst, rel)
        assert rel <= 1e-6
    t = _grid(rng.gamma(2.0, 20.0, (16, 16)))
    m = evaluate_image(t, t)
    assert (m.r2, m.bias, m.rmse) == (1.0, 0.0, 0.0)
    record_property("worst_rel", f"{worst:.1e}")


@criterion(9, "drought and water index formulas")
def test_criterion_09_index_formulas():
    edges = EdgeFit(wet_intercept=280.0, wet_slope=-20.0, dry_intercept=300.0, dry_slope=-20.0, n_bins=20)
    # EVI values exact in float32 so the edges evaluate without rounding
    evi = _grid([[0.25, 0.5, 0.75]])
    wet = _grid([[275.0, 270.0, 265.0]])
    dry = _grid([[295.0, 290.0, 285.0]])
    mid = _grid([[285.0, 280.0, 275.0]])
    assert compute_tvdi(wet, evi, edges).values.tolist() == [[0.0, 0.0, 0.0]]
    assert compute_tvdi(dry, evi, edges).values.tolist() == [[1.0, 1.0, 1.0]]
    assert compute_tvdi(mid, evi, edges).values.tolist() == [[0.5, 0.5, 0.5]]

    assert compute_ndwi(_grid([[0.2]]), _grid([[0.2]])).values[0, 0] == 0.0
    assert compute_ndwi(_grid([[0.3]]), _grid([[0.1]])).values[0, 0] == np.float32(0.5)
    assert compute_ndwi(_grid([[0.0]]), _grid([[0.0]])).mask[0, 0]
    assert compute_lswi(_grid([[0.35]]), _grid([[0.35]])).values[0, 0] == 0.0
    assert compute_lswi(_grid([[0.4]]), _grid([[0.2]])).values[0, 0] == np.float32(1 / 3)
    assert compute_lswi(_grid([[0.0]]), _grid([[0.0]])).mask[0, 0]


TINY_TRAIN = ["--epochs", "1", "--batch-size", "4", "--patch", "16", "--stride", "16", "--scale", "4",
              "--base-channels", "8", "--rdb-growth", "8", "--rdb-layers", "2", "--n-levels", "1"]


def _cli(*argv):
    code = cli_main([str(a) for a in argv], stderr=io.StringIO())
    assert code == 0, argv
    return code


def _tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and not p.name.endswith(("manifest", "manifest.txt"))}


@criterion(10, "bitwise determinism and round-trips")
def test_criterion_10_determinism(tmp_path, record_property):
    # fixed-seed training
    cfg = TrainConfig(epochs=2, batch_size=4, patch=16, stride=16, scale=4, seed=11)
    mc = AmcnConfig(base_channels=8, rdb_growth=8, rdb_layers=2, n_levels=1, scale_factor=4)
    patches, stats = build_training_set([synth_scene(70 + i, 32, 32, 4) for i in range(2)], cfg)
    m1, h1 = train(new_model(stats, cfg, mc), patches, cfg)
    m2, h2 = train(new_model(stats, cfg, mc), patches, cfg)
    assert model_bytes(m1) == model_bytes(m2) and h1 == h2

    # model and AGRID files
    save_model(m1, tmp_path / "a.amcn")
    back = load_model(tmp_path / "a.amcn")
    assert model_bytes(back) == model_bytes(m1)
    save_model(back, tmp_path / "b.amcn")
    assert (tmp_path / "a.amcn").read_bytes() == (tmp_path / "b.amcn").read_bytes()
    sc = synth_scene(5, 32, 32, 4)
    for g in (sc.hr, sc.lr, sc.ancillary):
        write_grid(g, tmp_path / "g.agrid")
        write_grid(read_grid(tmp_path / "g.agrid"), tmp_path / "h.agrid")
        assert (tmp_path / "g.agrid").read_bytes() == (tmp_path / "h.agrid").read_bytes()

    # every CLI command, run twice into separate directories
    trees = []
    for rep in ("one", "two"):
        d = tmp_path / rep
        d.mkdir()
        _cli("synth", "--seed", 90, "--rows", 32, "--cols", 32, "--scenes", 2, "--stations", 12,
             "--out", d / "data")
        scene = d / "data" / "scene_000091"
        _cli("preprocess", "--in", scene / "raw.agrid", "--out", d / "anc.agrid")
        _cli("train", "--data", d / "data", "--out-model", d / "m.amcn", *TINY_TRAIN)
        _cli("downscale", "--model", d / "m.amcn", "--lr-precip", scene / "lr.agrid",
             "--ancillary", d / "anc.agrid", "--out", d / "pred.agrid")
        _cli("calibrate", "--in", d / "pred.agrid", "--stations", scene / "stations.csv",
             "--out", d / "cal.agrid")
        _cli("eval", "--pred", d / "cal.agrid", "--truth", scene / "hr.agrid", "--lr", scene / "lr.agrid",
             "--out", d / "metrics.csv")
        _cli("gradcheck", "--seed", 1, "--max-elements", 40, "--out", d / "grad.txt")
        trees.append(_tree_bytes(d))
    assert trees[0].keys() == trees[1].keys()
    for name in trees[0]:
        assert trees[0][name] == trees[1][name], name
    record_property("cli_files", len(trees[0]))


# ---------------------------------------------------------------- training criteria

class _Runs:
    """Trains each (ablation, seed) pair once and keeps its report and wall time."""

    def __init__(self):
        self.suite = Suite()
        self.cache = {}

    def get(self, name, seed, use_degradation_loss=True):
        key = (name, seed, use_degradation_loss)
        if key not in self.cache:
            t0 = time.perf_counter()
            _, history, report = self.suite.run(seed=seed, use_degradation_loss=use_degradation_loss,
                                                **ABLATIONS[name])
            losses = [row[-1] for row in history]
            assert all(math.isfinite(v) for v in losses)
            self.cache[key] = (report, time.perf_counter() - t0)
        return self.cache[key]


@pytest.fixture(scope="session")
def runs():
    return _Runs()


@pytest.mark.slow
@criterion(4, "degradation loss lowers coarse-scale inconsistency")
def test_criterion_04_degradation_ablation(runs, record_property):
    with_ld, without_ld, seconds = [], [], 0.0
    for seed in SEEDS:
        rep, t = runs.get("both", seed, True)
        with_ld.append(rep.degradation_rmse)
        seconds += t
        rep, t = runs.get("both", seed, False)
        without_ld.append(rep.degradation_rmse)
        seconds += t
    mean_with, mean_without = float(np.mean(with_ld)), float(np.mean(without_ld))
    record_property("deg_rmse_with", f"{mean_with:.4f}")
    record_property("deg_rmse_without", f"{mean_without:.4f}")
    record_property("minutes", f"{seconds / 60:.1f}")
    assert mean_with < mean_without
    assert seconds <= 15 * 60


@pytest.mark.slow
@criterion(5, "held-out RMSE >= 10% below bilinear and R2 >= bilinear, every seed")
def test_criterion_05_downscaling_skill(runs, record_property):
    gains = []
    for seed in SEEDS:
        rep, _ = runs.get("both", seed)
        model, base = rep.pooled_image, rep.pooled_baseline_image
        gains.append(1 - model.rmse / base.rmse)
        record_property(f"seed{seed}", f"rmse {model.rmse:.3f}/{base.rmse:.3f} r2 {model.r2:.4f}/{base.r2:.4f}")
    for seed in SEEDS:
        rep, _ = runs.get("both", seed)
        assert rep.pooled_image.rmse <= 0.9 * rep.pooled_baseline_image.rmse, f"seed {seed}"
        assert rep.pooled_image.r2 >= rep.pooled_baseline_image.r2, f"seed {seed}"
    record_property("min_gain", f"{min(gains):.1%}")


@pytest.mark.slow
@criterion(6, "all four ablations train; both modules lowest or tied-lowest RMSE")
def test_criterion_06_ablation_coverage(runs, record_property):
    means = {}
    for name in ABLATIONS:
        rmses = [runs.get(name, seed)[0].pooled_image.rmse for seed in SEEDS]
        assert all(math.isfinite(v) for v in rmses)
        means[name] = float(np.mean(rmses))
        record_property(name, f"{means[name]:.3f}")
    lowest = min(means.values())
    assert means["both"] <= lowest * (1 + TIE_TOLERANCE), means
