import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from amcn.grid import GeoGrid, GridStack, PatchPair
from amcn.preprocess import (
    DegenerateEdgeError, EdgeFit, ZeroVarianceError, aggregate_time, apply_norm, compute_lswi,
    compute_ndwi, compute_tvdi, fit_norm_stats, fit_tvdi_edges, idw_fill, invert_norm, screen_outliers,
)

ND = -9999.0


def g(values):
    return GeoGrid(np.asarray(values, dtype=np.float32), 0.0, 0.0, 1.0)


# ---------------------------------------------------------------- spectral indices

def test_ndwi_values():
    assert compute_ndwi(g([[0.2]]), g([[0.2]])).values[0, 0] == 0.0
    assert compute_ndwi(g([[0.3]]), g([[0.1]])).values[0, 0] == np.float32(0.5)
    assert compute_ndwi(g([[0.0]]), g([[0.0]])).mask[0, 0]


def test_lswi_values():
    assert compute_lswi(g([[0.35]]), g([[0.35]])).values[0, 0] == 0.0
    assert compute_lswi(g([[0.4]]), g([[0.2]])).values[0, 0] == np.float32(1 / 3)
    assert compute_lswi(g([[0.0]]), g([[0.0]])).mask[0, 0]


def test_index_nodata_propagates():
    out = compute_ndwi(g([[ND, 0.5]]), g([[0.1, 0.1]]))
    assert out.mask.tolist() == [[True, False]]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1e-4, 1.0), min_size=8, max_size=8))
def test_normalized_difference_range(vals):
    a = g(np.array(vals[:4]).reshape(2, 2))
    b = g(np.array(vals[4:]).reshape(2, 2))
    for out in (compute_ndwi(a, b), compute_lswi(a, b)):
        assert np.all(out.values >= -1) and np.all(out.values <= 1)


# ---------------------------------------------------------------- TVDI

EDGES = EdgeFit(wet_intercept=280.0, wet_slope=-20.0, dry_intercept=300.0, dry_slope=-20.0, n_bins=20)


def test_tvdi_on_wet_dry_and_mid():
    evi = g([[0.25, 0.5, 0.75]])
    wet = g([[280 - 20 * 0.25, 270.0, 265.0]])
    assert np.all(compute_tvdi(wet, evi, EDGES).values == 0.0)
    dry = g([[300 - 20 * 0.25, 290.0, 285.0]])
    assert np.all(compute_tvdi(dry, evi, EDGES).values == 1.0)
    mid = g([[290 - 20 * 0.25, 280.0, 275.0]])
    assert np.all(compute_tvdi(mid, evi, EDGES).values == 0.5)


def test_tvdi_clamped_and_nodata():
    evi = g([[0.5, 0.5, ND]])
    out = compute_tvdi(g([[250.0, 320.0, 280.0]]), evi, EDGES)
    assert out.values[0, 0] == 0.0 and out.values[0, 1] == 1.0 and out.mask[0, 2]


def test_tvdi_degenerate_edges():
    flat = EdgeFit(280.0, 0.0, 280.0 + 1e-7, 0.0, 20)
    with pytest.raises(DegenerateEdgeError):
        compute_tvdi(g([[280.0]]), g([[0.5]]), flat)


def _feature_space(seed=0, n=120):
    rng = np.random.default_rng(seed)
    evi = rng.uniform(0.1, 0.9, size=(n, n))
    frac = rng.uniform(0, 1, size=(n, n))
    wet = 280 - 20 * evi
    dry = 300 - 20 * evi
    lst = wet + frac * (dry - wet)
    # guarantee both edges are touched in every bin
    lst.flat[: n] = dry.flat[: n]
    lst.flat[n: 2 * n] = wet.flat[n: 2 * n]
    return g(lst), g(evi)


def test_edge_fit_recovers_generating_lines():
    lst, evi = _feature_space()
    fit = fit_tvdi_edges(lst, evi, 20)
    assert fit.dry_slope == pytest.approx(-20, abs=0.05)
    assert fit.wet_slope == pytest.approx(-20, abs=0.05)
    assert fit.dry_intercept == pytest.approx(300, abs=0.05)
    assert fit.wet_intercept == pytest.approx(280, abs=0.05)


def test_edge_fit_single_evi_value():
    with pytest.raises(DegenerateEdgeError):
        fit_tvdi_edges(g(np.arange(9.0).reshape(3, 3) + 280), g(np.full((3, 3), 0.4)))


def test_edge_fit_inverted_edges():
    # LST identical across each bin means the dry edge never rises above the wet edge
    evi = np.repeat(np.linspace(0.1, 0.9, 10)[None], 4, axis=0)
    with pytest.raises(DegenerateEdgeError):
        fit_tvdi_edges(g(300 - 20 * evi), g(evi), 10)


def test_tvdi_range_on_feature_space():
    lst, evi = _feature_space(3)
    out = compute_tvdi(lst, evi, fit_tvdi_edges(lst, evi))
    assert out.values.min() >= 0 and out.values.max() <= 1


# ---------------------------------------------------------------- screening and filling

def test_screen_constant_field_unchanged():
    src = g(np.full((5, 5), 4.0))
    assert screen_outliers(src).values.tobytes() == src.values.tobytes()


def test_screen_single_spike():
    v = np.ones((5, 5))
    v[2, 2] = 1e6
    out = screen_outliers(g(v), 3, 3.0)
    # hand computation: the spike's 8 neighbors are all 1 (mean 1, std 0), so it is flagged;
    # each neighbor's ring holds the spike and 7 ones (or 4 ones at edges):
    # mean = (1e6 + 7)/8, std = (1e6 - 1)*sqrt(7)/8, |1 - mean| = (1e6 - 1)/8 < 3 std
    assert out.mask[2, 2]
    assert out.mask.sum() == 1


def test_screen_leaves_mild_values():
    # checkerboard: every pixel sits exactly one neighbor-std from its neighbor mean
    v = 10 + (np.indices((20, 20)).sum(axis=0) % 2) * 2.0 - 1.0
    src = g(v)
    out = screen_outliers(src)
    changed = out.values != src.values
    assert np.all(out.mask[changed])     # never modifies a pixel it does not flag
    assert out.mask.sum() == 0


def test_screen_argument_checks():
    with pytest.raises(ValueError):
        screen_outliers(g(np.ones((3, 3))), window=4)
    with pytest.raises(ValueError):
        screen_outliers(g(np.ones((3, 3))), k=0)


def test_idw_fill_equidistant():
    out = idw_fill(g([[2.0, ND, 4.0]]))
    assert out.values[0, 1] == 3.0 and not out.mask.any()


def test_idw_fill_single_neighbor():
    out = idw_fill(g([[ND, 7.0, 1.0, 1.0]]), max_neighbors=1)
    assert out.values[0, 0] == 7.0


def test_idw_fill_hand_weights():
    # hole at column 0; value 0 at distance 1 and value 3 at distance 2 -> (1*0 + 0.25*3) / 1.25
    out = idw_fill(g([[ND, 0.0, 3.0]]), power=2, max_neighbors=2)
    assert out.values[0, 0] == np.float32(0.6)


def test_idw_fill_constant_field():
    v = np.full((6, 6), 5.5)
    v[::2, 1::3] = ND
    assert np.all(idw_fill(g(v)).values == np.float32(5.5))


def test_idw_fill_all_nodata():
    with pytest.raises(ValueError):
        idw_fill(g([[ND, ND]]))


def test_aggregate_time():
    assert aggregate_time([g([[3.0]]), g([[5.0]])]).values[0, 0] == 4.0
    assert aggregate_time([g([[7.0]]), g([[ND]])]).values[0, 0] == 7.0
    assert aggregate_time([g([[ND]]), g([[ND]])]).mask[0, 0]
    with pytest.raises(ValueError):
        aggregate_time([])


def test_aggregate_identical():
    a = g(np.random.default_rng(2).random((4, 4)))
    assert aggregate_time([a, a, a]).values.tobytes() == a.values.tobytes()


# ---------------------------------------------------------------- normalization

def _patches(rng, n=6, constant_channel=False):
    out = []
    for _ in range(n):
        chans = [g(rng.normal(10, 3, (8, 8))), g(rng.normal(-2, 0.5, (8, 8)))]
        if constant_channel:
            chans[1] = g(np.full((8, 8), 1.0))
        stack = GridStack.from_grids(chans, ["a", "b"])
        out.append(PatchPair(stack, chans[0], chans[0]))
    return out


def test_norm_stats_moments():
    patches = _patches(np.random.default_rng(0))
    stats = fit_norm_stats(patches)
    z = apply_norm(np.stack([p.input.to_array() for p in patches]), stats)
    np.testing.assert_allclose(z.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=(0, 2, 3)), 1, atol=1e-12)


def test_norm_round_trip():
    rng = np.random.default_rng(1)
    stats = fit_norm_stats(_patches(rng))
    x = rng.normal(5, 4, (3, 2, 8, 8)).astype(np.float32)
    back = invert_norm(apply_norm(x, stats), stats)
    np.testing.assert_allclose(back, x, rtol=1e-5, atol=1e-5)


def test_norm_zero_variance():
    with pytest.raises(ZeroVarianceError):
        fit_norm_stats(_patches(np.random.default_rng(0), constant_channel=True))
