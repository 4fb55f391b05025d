import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import sigmoid as sigmoid_ref
from shm import calibration as cal
from shm.calibration import EPS, ThetaDraw, Variant, init_params
from shm.errors import ConfigError, DimensionError
from shm.memory import run_sequence


def test_variant_parsing():
    assert Variant.parse("shm") is Variant.SHM_RANDOM_THETA
    assert Variant.parse("all-ones") is Variant.ALL_ONES
    assert Variant.parse(3) is Variant.FIXED_C
    assert Variant.parse("NeuralTheta") is Variant.NEURAL_THETA
    assert Variant.parse("ShmRandomTheta") is Variant.SHM_RANDOM_THETA
    assert Variant.parse("AllOnes") is Variant.ALL_ONES
    with pytest.raises(ConfigError):
        Variant.parse("bogus")


def test_init_is_seeded_and_checked():
    a, b = init_params(8, 16, seed=4), init_params(8, 16, seed=4)
    for name, arr in a.arrays().items():
        np.testing.assert_array_equal(arr, b.arrays()[name])
    assert np.abs(a.w_k).max() <= 1 / math.sqrt(8)
    assert np.abs(a.theta).max() <= 1 / math.sqrt(16)
    assert np.all(a.b_eta == 0)
    with pytest.raises(ConfigError):
        init_params(0, 4)


def test_parameter_count_by_construction():
    base = 128 * 16 + 4 * (8 * 16 + 16) + (8 + 1)
    assert init_params(8, 16, 128, "shm").n_parameters() == base == 2633
    assert init_params(8, 16, 128, "fixed_c").n_parameters() == base + 16 * 16
    assert init_params(8, 16, 128, "fixed_theta").n_parameters() == base + 16
    assert init_params(8, 16, 128, "neural_theta").n_parameters() == base + (16 * 8 + 16) + (16 * 16 + 16)


def test_zero_context_gives_identity_pathway():
    p = init_params(5, 4, 16, seed=0)
    x = np.zeros(5)
    np.testing.assert_array_equal(cal.shm_calibration(p, x, 3), np.ones((4, 4)))
    # v(0) = k(0) = 0 with zero biases
    np.testing.assert_array_equal(cal.update_matrix(p, x), np.zeros((4, 4)))


def test_single_entry_reference_value():
    p = init_params(1, 1, 1, seed=0)
    p.theta[:] = 0.5
    p.w_vc[:] = 1.0
    c = cal.shm_calibration(p, np.array([1.0]), ThetaDraw(0))
    assert c[0, 0] == pytest.approx(1.0 + math.tanh(0.5), abs=1e-15)
    assert c[0, 0] == pytest.approx(1.462117, abs=1e-6)


def test_orientation_rows_theta_cols_vc(rng):
    p = init_params(3, 4, 2, seed=1)
    x = rng.standard_normal(3)
    c = cal.shm_calibration(p, x, 1)
    vc = p.w_vc @ x
    for i in range(4):
        for j in range(4):
            assert c[i, j] == pytest.approx(1 + math.tanh(p.theta[1, i] * vc[j]), abs=1e-15)


@given(seed=st.integers(0, 2**20), scale=st.floats(0.1, 1e3))
def test_shm_calibration_range(seed, scale):
    r = np.random.default_rng(seed)
    p = init_params(6, 5, 8, seed=r)
    p.theta *= scale
    x = r.standard_normal((200, 6)) * scale
    c = cal.shm_calibration(p, x, cal.sample_rows(p, r, 200))
    assert c.min() >= EPS and c.max() <= 2 - EPS


def test_shm_calibration_range_bulk():
    r = np.random.default_rng(0)
    p = init_params(4, 4, 16, seed=r)
    p.theta *= 50.0
    c = cal.shm_calibration(p, r.standard_normal((100_000, 4)) * 10, cal.sample_rows(p, r, 100_000))
    assert c.min() >= EPS and c.max() <= 2 - EPS


def test_row_sampling():
    p1 = init_params(2, 2, 1, seed=0)
    r = np.random.default_rng(0)
    assert all(cal.sample_theta_row(p1, r).row == 0 for _ in range(20))
    p = init_params(2, 2, 128, seed=0)
    counts = np.bincount(cal.sample_rows(p, np.random.default_rng(7), 1_000_000), minlength=128)
    n, prob = 1_000_000, 1 / 128
    se = math.sqrt(n * prob * (1 - prob))
    assert np.all(np.abs(counts - n * prob) <= 4.5 * se)  # max over 128 rows of |z|
    chi2 = float(((counts - n * prob) ** 2 / (n * prob)).sum())
    assert chi2 < 180.0  # chi2_{127} upper 0.1% point ~ 181.99
    a = [cal.sample_theta_row(p, np.random.default_rng(3)).row for _ in range(3)]
    assert len(set(a)) == 1


def test_variant_calibrations(rng):
    x = rng.standard_normal((7, 4))
    ones = cal.variant_calibration(init_params(4, 3, 8, "all_ones", seed=0), x)
    np.testing.assert_array_equal(ones, 1.0)
    pc = init_params(4, 3, 8, "fixed_c", seed=0)
    pc.extra["fixed_c"][:] = 0.5
    fc = cal.variant_calibration(pc, x)
    np.testing.assert_array_equal(fc, 0.5)
    pf = init_params(4, 3, 8, "fixed_theta", seed=0)
    got = cal.variant_calibration(pf, x)
    vc = x @ pf.w_vc.T
    np.testing.assert_allclose(got, 1 + np.tanh(pf.extra["theta_fixed"][None, :, None] * vc[:, None, :]), rtol=1e-15)
    pn = init_params(4, 3, 8, "neural_theta", seed=0)
    e = pn.extra
    th = np.tanh(x @ e["ffw_w1"].T + e["ffw_b1"]) @ e["ffw_w2"].T + e["ffw_b2"]
    np.testing.assert_allclose(cal.variant_calibration(pn, x),
                               1 + np.tanh(th[:, :, None] * (x @ pn.w_vc.T)[:, None, :]), rtol=1e-15)
    with pytest.raises(ConfigError):
        cal.variant_calibration(init_params(4, 3, 8, "shm", seed=0), x)


def test_random_c_mean_is_one():
    p = init_params(2, 3, 4, "random_c", seed=0)
    c = cal.variant_calibration(p, np.zeros((100_000, 2)), rng=np.random.default_rng(1))
    mean = c.mean(axis=0)
    se = c.std(axis=0, ddof=1) / math.sqrt(100_000)
    assert np.all(np.abs(mean - 1) <= 3 * se)


def test_update_matrix_cases(rng):
    p = init_params(6, 4, 8, seed=2)
    x = rng.standard_normal(6)
    u = cal.update_matrix(p, x)
    k, v = p.w_k @ x, p.w_v @ x
    eta = sigmoid_ref(float(p.w_eta @ x))
    for i in range(4):
        for j in range(4):
            assert u[i, j] == pytest.approx(eta * v[i] * k[j], rel=1e-13, abs=1e-300)
    # v = e_i, k = e_j, eta -> 1
    q = init_params(4, 4, 1, seed=0)
    q.w_v[:] = 0.0
    q.w_k[:] = 0.0
    q.b_v[:] = np.eye(4)[1]
    q.b_k[:] = np.eye(4)[2]
    q.w_eta[:] = 0.0
    q.b_eta[:] = 1e3
    want = np.zeros((4, 4))
    want[1, 2] = 1.0
    np.testing.assert_allclose(cal.update_matrix(q, np.zeros(4)), want, atol=1e-15)
    q.b_eta[:] = -1e3
    assert np.abs(cal.update_matrix(q, np.zeros(4))).max() < 1e-300


@given(seed=st.integers(0, 2**20))
def test_update_rank_at_most_one(seed):
    r = np.random.default_rng(seed)
    p = init_params(5, 6, 4, seed=r)
    s = np.linalg.svd(cal.update_matrix(p, r.standard_normal(5)), compute_uv=False)
    assert s[1] <= 1e-10 * max(s[0], 1e-300)


@given(a=st.floats(-1e4, 1e4))
def test_gate_strictly_inside_unit_interval(a):
    g = float(cal.sigmoid(np.float64(a)))
    assert 0.0 < g < 1.0


def test_recorded_rows_replay_bit_identically(rng):
    p = init_params(4, 5, 32, seed=3)
    xs = rng.standard_normal((12, 4))
    tr = run_sequence(p, xs, rng=np.random.default_rng(5))
    np.testing.assert_array_equal(cal.shm_calibration(p, xs, tr.rows), tr.cs)


def test_dimension_checks():
    p = init_params(4, 3, 8, seed=0)
    with pytest.raises(DimensionError):
        cal.update_matrix(p, np.zeros(5))


def test_params_copy_and_astype():
    p = init_params(4, 3, 8, "neural_theta", seed=0)
    q = p.copy()
    q.extra["ffw_w1"][0, 0] += 1
    assert p.extra["ffw_w1"][0, 0] != q.extra["ffw_w1"][0, 0]
    assert all(a.dtype == np.float32 for a in p.astype(np.float32).arrays().values())
