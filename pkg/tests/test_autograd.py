import numpy as np
import pytest
from hypothesis import given, strategies as st

from shm.autograd import (
    GradReport, backward, clip_gradients, critical_gradients_fixed_c, finite_difference_oracle,
    global_norm, max_relative_error,
)
from shm.calibration import Variant, init_params
from shm.errors import ConfigError, DimensionError
from shm.memory import run_sequence


def _fd_check(variant, T, H, D, B, seed, L=8):
    r = np.random.default_rng(seed)
    p = init_params(D, H, L, variant, seed=r)
    xs = r.standard_normal((T, B, D))
    w = r.standard_normal((T, B, H))
    tr = run_sequence(p, xs, rng=r)
    a = backward(p, tr, w).grads
    n = finite_difference_oracle(p, xs, lambda t: float(np.sum(t.hs * w)), rows=tr.rows, noise=tr.noise)
    return max_relative_error(a, n), a, n, tr


@pytest.mark.parametrize("variant", list(Variant))
def test_backward_matches_finite_differences(variant):
    err, a, n, _ = _fd_check(variant, T=4, H=3, D=2, B=1, seed=int(variant))
    assert err <= 1e-4


def test_batched_backward_matches_finite_differences():
    err, *_ = _fd_check(Variant.SHM_RANDOM_THETA, T=6, H=4, D=3, B=3, seed=11)
    assert err <= 1e-4


def test_zero_loss_gradient_gives_zero_report(rng):
    p = init_params(3, 4, 8, seed=0)
    tr = run_sequence(p, rng.standard_normal((5, 3)), rng=rng)
    rep = backward(p, tr, np.zeros_like(tr.hs))
    assert rep.norm == 0.0


def test_all_ones_leaves_theta_untouched():
    _, a, _, _ = _fd_check(Variant.ALL_ONES, T=4, H=3, D=2, B=1, seed=3)
    assert np.all(a["theta"] == 0) and np.all(a["w_vc"] == 0)


def test_only_drawn_rows_get_gradient():
    _, a, n, tr = _fd_check(Variant.SHM_RANDOM_THETA, T=3, H=3, D=2, B=1, seed=5, L=16)
    unused = np.setdiff1d(np.arange(16), np.asarray(tr.rows).ravel())
    assert unused.size > 0
    assert np.all(a["theta"][unused] == 0)
    assert np.all(n["theta"][unused] == 0)


def test_masked_steps_carry_no_gradient(rng):
    p = init_params(3, 3, 8, seed=2)
    xs = rng.standard_normal((6, 2, 3))
    mask = np.ones((6, 2), dtype=bool)
    mask[3:, 1] = False
    tr = run_sequence(p, xs, rng=rng, mask=mask)
    dh = rng.standard_normal(tr.hs.shape)
    dh[:, 0] = 0.0
    dh[3:, 1] = 0.0
    full = backward(p, tr, dh)
    short = run_sequence(p, xs[:3, 1], rows=tr.rows[:3, 1])
    ref = backward(p, short, dh[:3, 1])
    for name in ("theta", "w_k", "w_eta"):
        np.testing.assert_allclose(full[name], ref[name], atol=1e-13)


def test_shape_checked(rng):
    p = init_params(3, 3, 8, seed=2)
    tr = run_sequence(p, rng.standard_normal((4, 3)), rng=rng)
    with pytest.raises(DimensionError):
        backward(p, tr, np.zeros((4, 2)))


def test_critical_gradient_formulas():
    assert critical_gradients_fixed_c(0.5, 3) == (0.75, 0.125)
    assert critical_gradients_fixed_c(1.0, 17) == (17.0, 1.0)
    assert critical_gradients_fixed_c(1.1, 200)[1] > 1e8
    with pytest.raises(ConfigError):
        critical_gradients_fixed_c(0.5, 0)


@pytest.mark.parametrize("theta", [0.5, 0.97, 1.0, 1.08])
def test_taped_gradient_carries_product_factor(theta):
    """H=1 FixedC with a single write at step i: dM_T/dv and dM_T/dtheta are g2 and U_i * g1."""
    T, i = 9, 3
    p = init_params(2, 1, 1, Variant.FIXED_C, seed=0)
    p.extra["fixed_c"][:] = theta
    p.w_k[:] = 0.0
    p.b_k[:] = 1.0
    p.w_v[:] = 0.0
    p.b_v[:] = 0.7
    p.w_eta[:] = [1600.0, 0.0]
    p.b_eta[:] = -800.0
    xs = np.zeros((T, 2))
    xs[i - 1, 0] = 1.0   # gate opens only at step i (1-based)
    tr = run_sequence(p, xs)
    dh = np.zeros_like(tr.hs)
    g = backward(p, tr, dh, dm_final=np.ones((1, 1)))
    g1, g2 = critical_gradients_fixed_c(theta, T - i)
    assert g["b_v"][0] == pytest.approx(g2, rel=1e-10)
    assert g["fixed_c"][0, 0] == pytest.approx(0.7 * g1, rel=1e-10)


def test_clipping():
    rep = GradReport({"a": np.array([3.0]), "b": np.array([4.0])})
    assert clip_gradients(rep, 10.0) is rep
    half = clip_gradients(rep, 2.5)
    np.testing.assert_array_equal(half["a"], [1.5])
    np.testing.assert_array_equal(half["b"], [2.0])
    assert half.clip_events == 1
    bad = clip_gradients(GradReport({"a": np.array([np.inf])}), 1.0)
    assert np.all(np.isfinite(bad["a"]))
    with pytest.raises(ConfigError):
        clip_gradients(rep, 0.0)


@given(seed=st.integers(0, 2**20), max_norm=st.floats(1e-3, 1e3))
def test_post_clip_norm_bounded(seed, max_norm):
    r = np.random.default_rng(seed)
    rep = GradReport({f"g{i}": r.standard_normal(r.integers(1, 20)) * 10 ** r.uniform(-3, 3) for i in range(4)})
    out = clip_gradients(rep, max_norm)
    assert global_norm(out.grads) <= max_norm + 1e-9


def test_finite_difference_exact_on_quadratic(rng):
    p = init_params(3, 2, 1, Variant.ALL_ONES, seed=0)
    xs = rng.standard_normal((1, 3))
    target = rng.standard_normal(2)
    # the query read is affine in b_q, so this loss is quadratic in b_q
    loss = lambda tr: float(np.sum((tr.hs[0] - target) ** 2))  # noqa: E731
    tr = run_sequence(p, xs)
    m = tr.ms[1]
    exact = 2 * m.T @ (tr.hs[0] - target)
    fd = finite_difference_oracle(p, xs, loss, names=("b_q",))["b_q"]
    np.testing.assert_allclose(fd, exact, atol=1e-8)
    with pytest.raises(ConfigError):
        finite_difference_oracle(p, xs, loss, step=0.0)


def test_nonzero_initial_memory_gradient():
    """With M0 != 0 the theta gradient also carries the M0 * d(prod C)/d(theta) term."""
    r = np.random.default_rng(21)
    p = init_params(3, 4, 8, seed=r)
    xs = r.standard_normal((5, 3))
    m0 = r.standard_normal((4, 4))
    w = r.standard_normal((5, 4))
    tr = run_sequence(p, xs, rng=r, m0=m0)
    a = backward(p, tr, w).grads
    n = finite_difference_oracle(p, xs, lambda t: float(np.sum(t.hs * w)), rows=tr.rows, m0=m0)
    assert max_relative_error(a, n) <= 1e-4
    zero = backward(p, run_sequence(p, xs, rows=tr.rows), w).grads
    assert not np.allclose(a["theta"], zero["theta"])
