import math

import numpy as np
import pytest

from shm import diagnostics as diag
from shm.calibration import Variant, init_params
from shm.errors import ConfigError
from shm.memory import run_sequence


@pytest.fixture(scope="module")
def curves():
    out = {}
    for v in diag.CURVE_VARIANTS:
        out[v] = diag.cumulative_product_curve(v, episodes=100, T=100, seed=0)
    return out


def test_fixed_c_half_is_geometric():
    cp = diag.fixed_c_cumprod(0.5, 12)
    np.testing.assert_allclose(cp, 0.5 ** np.arange(1, 13), rtol=0, atol=1e-12)
    assert cp[9] == pytest.approx(9.765625e-4, abs=1e-15)


def test_fixed_c_half_through_curve():
    p = diag.curve_params(Variant.FIXED_C, fixed_c_value=0.5)
    st = diag.cumulative_product_curve(Variant.FIXED_C, p, episodes=3, T=20)
    np.testing.assert_allclose(st.mean_below_one, 0.5 ** np.arange(1, 21), atol=1e-12)


def test_all_ones_reports_one(curves):
    st = curves[Variant.ALL_ONES]
    np.testing.assert_array_equal(st.mean_below_one, 1.0)
    np.testing.assert_array_equal(st.frac_ge_1, 1.0)


def test_curve_values_in_unit_interval(curves):
    for st in curves.values():
        assert np.all((st.mean_below_one > 0) & (st.mean_below_one <= 1))


def test_shm_above_fixed_theta_at_100(curves):
    assert curves[Variant.SHM_RANDOM_THETA].mean_below_one[99] > curves[Variant.FIXED_THETA].mean_below_one[99]


def test_ordering_chain_bootstrap(curves):
    by = {v: s.per_episode[:, 99] for v, s in curves.items()}
    chain = [(Variant.FIXED_C, "<", Variant.NEURAL_THETA),
             (Variant.NEURAL_THETA, "<=", Variant.FIXED_THETA),
             (Variant.FIXED_THETA, "<", Variant.SHM_RANDOM_THETA)]
    conf = diag.bootstrap_ordering(by, chain, resamples=1000, seed=1)
    assert all(c >= 0.95 for c in conf.values()), conf


@pytest.mark.xfail(strict=True, reason="RandomC = 1 + tanh(N(0,1)) collapses faster than SHM; "
                                       "the ShmRandomTheta <= RandomC link does not hold for this design")
def test_shm_not_above_random_c(curves):
    by = {v: s.per_episode[:, 99] for v, s in curves.items()}
    conf = diag.bootstrap_ordering(by, [(Variant.SHM_RANDOM_THETA, "<=", Variant.RANDOM_C)], seed=1)
    assert min(conf.values()) >= 0.95


def test_curve_rejects_bad_sizes():
    with pytest.raises(ConfigError):
        diag.cumulative_product_curve(Variant.SHM_RANDOM_THETA, episodes=0)


def test_overflow_is_recorded_not_fatal():
    p = diag.curve_params(Variant.FIXED_C, fixed_c_value=1e10)
    st = diag.cumulative_product_curve(Variant.FIXED_C, p, episodes=2, T=40)
    assert st.saturated == 2


def test_cumprod_csv_columns(tmp_path, curves):
    path = diag.write_cumprod_csv(tmp_path / "cumprod_curve.csv", list(curves.values()))
    lines = path.read_text().splitlines()
    assert lines[0] == "step,mean_below_one,max_entry,frac_ge_1,variant"
    assert len(lines) == 1 + 6 * 100


# --- propositions ---------------------------------------------------------------------

def test_prop4_T1_and_T50():
    one = diag.prop4_expected_product(T=1, samples=100_000, seed=3)
    assert np.all(np.abs(one.z) <= 3)
    pm = diag.prop4_expected_product(L=128, H=4, T=50, samples=100_000, seed=0)
    assert np.all(np.abs(pm.z) <= 3)
    zero = diag.prop4_expected_product(T=0, samples=10, seed=0)
    np.testing.assert_array_equal(zero.mean, 1.0)


def test_prop5_cases():
    rnd = diag.prop5_correlation_ratio(samples=100_000, seed=0)
    assert rnd.bound_holds
    assert rnd.ratio <= 1 + 3 * rnd.se
    fixed = diag.prop5_correlation_ratio(samples=100_000, seed=0, fixed_theta=True)
    assert abs(fixed.ratio - 1) <= 3 * fixed.se
    ind = diag.prop5_correlation_ratio(samples=100_000, seed=0, dependence=0.0)
    assert abs(ind.rho_v) <= 3 * ind.se_v and abs(ind.rho_uv) <= 3 * ind.se_uv


def test_prop5_ratio_tracks_theory_for_shifted_theta():
    col = np.random.default_rng(0).uniform(0, 1, 128)
    rep = diag.prop5_correlation_ratio(samples=100_000, seed=2, theta_column=col)
    assert abs(rep.ratio - rep.theory_ratio) <= 3 * rep.se / abs(rep.rho_v)


def test_prop5_ratio_undefined_without_correlation():
    rep = diag.CorrelationReport("x", 1, 0.0, 0.1, 0.01, 0.01, 1.0)
    assert rep.ratio is None


@pytest.mark.parametrize("mag,T,label", [(1.0, 200, "marginal"), (0.9, 200, "vanishing"), (1.05, 1000, "exploding")])
def test_prop3_witness(mag, T, label):
    w = diag.prop3_witness(np.array([[mag, -mag], [mag, mag]]), T)
    assert np.all(w.labels == label)
    assert w.consistent
    if label == "vanishing":
        assert w.products[0, 0] == pytest.approx(0.9 ** 200, rel=1e-12)
        assert w.products[0, 0] == pytest.approx(7.06e-10, rel=1e-3)
    if label == "exploding":
        assert w.products[0, 0] > 1e21
    if label == "marginal":
        assert w.products[0, 0] == 1.0


# --- heatmaps ------------------------------------------------------------------------

def test_heatmap_round_trip(tmp_path, rng):
    p = init_params(4, 5, 8, seed=0)
    tr = run_sequence(p, rng.standard_normal((3, 4)), rng=rng)
    paths = diag.export_heatmaps(tr, [2], tmp_path, episode=7)
    assert sorted(x.name for x in paths) == ["heatmap_C_t2.csv", "heatmap_M_t2.csv"]
    assert paths[0].read_text().splitlines()[0] == "# matrix=M step=2 episode=7"
    np.testing.assert_array_equal(diag.load_heatmap(tmp_path / "heatmap_M_t2.csv"), tr.ms[2])
    np.testing.assert_array_equal(diag.load_heatmap(tmp_path / "heatmap_C_t2.csv"), tr.cs[1])
    assert len(paths[0].read_text().splitlines()) == 1 + 5
    with pytest.raises(IndexError):
        diag.export_heatmaps(tr, [4], tmp_path)


def test_heatmaps_with_closed_gate_are_pure_decay(tmp_path, rng):
    p = init_params(4, 3, 8, seed=0)
    p.w_eta[:] = 0.0
    p.b_eta[:] = -800.0
    m0 = rng.standard_normal((3, 3))
    tr = run_sequence(p, rng.standard_normal((4, 4)), rng=rng, m0=m0)
    diag.export_heatmaps(tr, [1, 2, 3, 4], tmp_path)
    for t in range(1, 5):
        np.testing.assert_allclose(diag.load_heatmap(tmp_path / f"heatmap_M_t{t}.csv"),
                                   m0 * np.prod(tr.cs[:t], axis=0), rtol=1e-13)


def test_synthetic_contexts_are_normalized_and_dependent():
    xs = diag.synthetic_contexts(np.random.default_rng(0), 2000, D=8, rho=0.9)
    assert np.abs(xs.mean(axis=1)).max() < 1e-6
    lag1 = np.corrcoef(xs[:-1, 0], xs[1:, 0])[0, 1]
    assert lag1 > 0.7
    assert math.isclose(xs.var(axis=1).mean(), 1.0, abs_tol=1e-6)
