"""Self-check suites behind ``shm verify``.

Each suite returns a :class:`SuiteResult` listing named cases, so a failure
report says exactly which configuration broke.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import diagnostics as diag
from .autograd import backward, finite_difference_oracle, max_relative_error
from .calibration import Variant, init_params
from .memory import closed_form_array, expected_scan_depth, run_sequence, scan_array, ScanStats, sequential_array
from .utils import stream


@dataclass
class CaseResult:
    name: str
    passed: bool
    value: float
    tol: float


@dataclass
class SuiteResult:
    suite: str
    cases: list[CaseResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.cases)

    @property
    def failing(self) -> list[str]:
        return [c.name for c in self.cases if not c.passed]

    def to_dict(self) -> dict:
        return {"suite": self.suite, "passed": self.passed, "seconds": round(self.seconds, 3),
                "failing": self.failing, "cases": [asdict(c) for c in self.cases]}


def magnitude_envelope(m0: np.ndarray, cs: np.ndarray, us: np.ndarray) -> np.ndarray:
    """A_t = |A_{t-1} * C_t| + |U_t|, A_0 = |M_0|: per-entry size of the terms summed into M_t."""
    return sequential_array(np.abs(m0), np.abs(cs), np.abs(us), check=False)[1:]


def relative_difference(a: np.ndarray, b: np.ndarray, scale: np.ndarray | None = None) -> float:
    """max |a - b| / max(|a|, |b|, 1e-4 * scale), entrywise.

    ``scale`` should be the magnitude envelope of the recurrence. An entry
    whose terms cancel to ~0 then counts relative to the size of those terms,
    not relative to the tiny remainder. Without ``scale`` the comparison is
    purely relative.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0:
        return 0.0
    den = np.maximum(np.abs(a), np.abs(b))
    if scale is not None:
        den = np.maximum(den, 1e-4 * np.asarray(scale, dtype=float))
    den = np.maximum(den, np.finfo(float).tiny)
    return float((np.abs(a - b) / den).max())


def random_memory_inputs(rng: np.random.Generator, T: int, H: int):
    """C and U from a randomly chosen calibration variant over random contexts."""
    variant = Variant(int(rng.integers(0, len(Variant))))
    D = int(rng.integers(2, 9))
    params = init_params(D, H, int(rng.integers(1, 129)), variant, seed=rng)
    xs = rng.standard_normal((T, D))
    tr = run_sequence(params, xs, rng=rng)
    m0 = rng.standard_normal((H, H)) * float(rng.choice([0.0, 1.0]))
    return variant, m0, tr.cs, tr.us


def suite_scan(n_configs: int = 100, seed: int = 0, workers: int = 1, tol: float = 1e-10,
               inject: int | None = None) -> SuiteResult:
    """Scan vs. sequential vs. closed form on random configs (T <= 256, H <= 16).

    ``inject`` perturbs one scan output entry of that config, to prove the
    harness notices.
    """
    res = SuiteResult("scan")
    rng = stream(seed, "verify-scan")
    for i in range(n_configs):
        T = int(rng.integers(1, 257))
        H = int(rng.integers(1, 17))
        variant, m0, cs, us = random_memory_inputs(rng, T, H)
        seq = sequential_array(m0, cs, us)[1:]
        closed = closed_form_array(m0, cs, us)
        scan = scan_array(m0, cs, us, workers=workers)
        env = magnitude_envelope(m0, cs, us)
        if inject == i:
            scan = scan.copy()
            scan[T // 2, 0, 0] += 1e-6 * (abs(scan[T // 2, 0, 0]) + env[T // 2, 0, 0])
        err = max(relative_difference(scan, seq, env), relative_difference(closed, seq, env))
        res.cases.append(CaseResult(f"cfg{i:03d}:{variant.slug}:T={T}:H={H}", err <= tol, err, tol))
    return res


def suite_depth(Ts=(1, 2, 7, 64, 257, 1024), seed: int = 0) -> SuiteResult:
    res = SuiteResult("depth")
    rng = stream(seed, "verify-depth")
    for T in Ts:
        stats = ScanStats()
        cs = 1.0 + 0.1 * rng.standard_normal((T, 2, 2))
        us = rng.standard_normal((T, 2, 2))
        scan_array(np.zeros((2, 2)), cs, us, stats=stats)
        want = expected_scan_depth(T)
        res.cases.append(CaseResult(f"T={T}", stats.depth == want, float(stats.depth), float(want)))
    return res


def suite_grad(n_configs: int = 20, seed: int = 0, tol: float = 1e-4) -> SuiteResult:
    """Backward pass against central finite differences (T <= 8, H <= 6)."""
    res = SuiteResult("grad")
    rng = stream(seed, "verify-grad")
    for i in range(n_configs):
        variant = Variant(i % len(Variant))
        T = int(rng.integers(1, 9))
        H = int(rng.integers(1, 7))
        D = int(rng.integers(2, 5))
        B = int(rng.integers(1, 3))
        params = init_params(D, H, 8, variant, seed=rng)
        xs = rng.standard_normal((T, B, D))
        w = rng.standard_normal((T, B, H))
        tr = run_sequence(params, xs, rng=rng)
        analytic = backward(params, tr, w).grads
        numeric = finite_difference_oracle(params, xs, lambda t: float(np.sum(t.hs * w)),
                                           rows=tr.rows, noise=tr.noise)
        err = max_relative_error(analytic, numeric)
        res.cases.append(CaseResult(f"cfg{i:02d}:{variant.slug}:T={T}:H={H}", err <= tol, err, tol))
    return res


def suite_prop4(samples: int = 100_000, seed: int = 0) -> SuiteResult:
    res = SuiteResult("prop4")
    pm = diag.prop4_expected_product(L=128, H=4, T=50, samples=samples, seed=seed)
    z = np.abs(pm.z)
    for (m, k), zv in np.ndenumerate(z):
        res.cases.append(CaseResult(f"entry[{m},{k}]", bool(zv <= 3.0), float(zv), 3.0))
    return res


def suite_prop5(samples: int = 100_000, seed: int = 0) -> SuiteResult:
    res = SuiteResult("prop5")
    rnd = diag.prop5_correlation_ratio(samples=samples, seed=seed)
    slack = abs(rnd.rho_v) + 3 * rnd.se - abs(rnd.rho_uv)
    res.cases.append(CaseResult("random_theta_bound", rnd.bound_holds, float(slack), 0.0))
    fx = diag.prop5_correlation_ratio(samples=samples, seed=seed, fixed_theta=True)
    gap = abs(abs(fx.rho_uv) - abs(fx.rho_v))
    res.cases.append(CaseResult("fixed_theta_equality", gap <= 3 * fx.se, gap, 3 * fx.se))
    return res


def suite_prop3() -> SuiteResult:
    res = SuiteResult("prop3")
    cp = diag.fixed_c_cumprod(0.5, 60)
    err = float(np.max(np.abs(cp - 0.5 ** np.arange(1, 61))))
    res.cases.append(CaseResult("fixed_c_half", err <= 1e-12, err, 1e-12))
    for mag in (0.9, 1.0, 1.05):
        w = diag.prop3_witness(np.array([[mag, -mag]]), 200)
        res.cases.append(CaseResult(f"theta={mag}", w.consistent, float(w.products[0, 0]), 0.0))
    return res


SUITES: dict[str, Callable[..., SuiteResult]] = {
    "scan": suite_scan,
    "depth": suite_depth,
    "grad": suite_grad,
    "prop3": suite_prop3,
    "prop4": suite_prop4,
    "prop5": suite_prop5,
}


def run_suite(name: str, **kwargs) -> SuiteResult:
    t0 = time.perf_counter()
    result = SUITES[name](**kwargs)
    result.seconds = time.perf_counter() - t0
    return result
