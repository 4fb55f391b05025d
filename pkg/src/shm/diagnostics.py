"""Stability diagnostics for calibration designs.

Monte-Carlo checks that the random-row calibration keeps cumulative products
near one, the Fixed-C instability witness, the vanishing-curve comparison
between calibration designs, and CSV export of memory/calibration snapshots.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import calibration as cal
from .calibration import ShmParams, Variant, init_params
from .errors import ConfigError
from .memory import EpisodeTrace, layer_normalize
from .utils import stream, write_csv

#: variants in the vanishing-curve comparison, in plotting order
CURVE_VARIANTS = (
    Variant.SHM_RANDOM_THETA, Variant.ALL_ONES, Variant.RANDOM_C,
    Variant.FIXED_C, Variant.FIXED_THETA, Variant.NEURAL_THETA,
)


def synthetic_contexts(rng: np.random.Generator, T: int, D: int = 8, rho: float = 0.9,
                       normalize: bool = True) -> np.ndarray:
    """Gaussian contexts with AR(1) dependence across time, layer-normalized.

    ``rho`` = 0 gives i.i.d. contexts.
    """
    x = np.empty((T, D))
    if T == 0:
        return x
    x[0] = rng.standard_normal(D)
    s = np.sqrt(1.0 - rho * rho)
    for t in range(1, T):
        x[t] = rho * x[t - 1] + s * rng.standard_normal(D)
    return layer_normalize(x) if normalize else x


def curve_params(variant: "Variant | str", D: int = 8, H: int = 16, L: int = 128,
                 seed: int = 0, fixed_c_value: float | None = 0.5) -> ShmParams:
    """Untrained parameters for the vanishing study; Fixed-C is set to a constant below 1."""
    p = init_params(D, H, L, variant, seed=stream(seed, "init"))
    if p.variant == Variant.FIXED_C and fixed_c_value is not None:
        p.extra["fixed_c"][:] = fixed_c_value
    return p


@dataclass
class CumProductStats:
    variant: Variant
    mean_below_one: np.ndarray          # (T,) averaged over episodes
    max_entry: np.ndarray               # (T,) max over episodes
    frac_ge_1: np.ndarray               # (T,)
    per_episode: np.ndarray = field(repr=False)   # (N, T) below-one means
    saturated: int = 0                  # episodes whose product overflowed


def _below_one_mean(cp: np.ndarray) -> np.ndarray:
    """Mean of entries < 1 per step; 1.0 when none are."""
    flat = cp.reshape(cp.shape[0], -1)
    below = flat < 1.0
    n = below.sum(axis=1)
    s = np.where(below, flat, 0.0).sum(axis=1)
    return np.where(n > 0, s / np.maximum(n, 1), 1.0)


def cumulative_product_curve(
    variant: "Variant | str",
    params: ShmParams | None = None,
    episodes: int = 100,
    T: int = 100,
    seed: int = 0,
    rho: float = 0.9,
) -> CumProductStats:
    """Track prod_{t<=j} C_t over synthetic episodes for j = 1..T."""
    if episodes < 1 or T < 1:
        raise ConfigError("need at least one episode and one step")
    variant = Variant.parse(variant)
    params = params if params is not None else curve_params(variant, seed=seed)
    if params.variant != variant:
        raise ConfigError(f"params are for {params.variant.slug}, asked for {variant.slug}")
    per_ep = np.empty((episodes, T))
    frac = np.zeros(T)
    mx = np.full(T, -np.inf)
    saturated = 0
    for e in range(episodes):
        rng = stream(seed, "diag", e)
        xs = synthetic_contexts(rng, T, params.D, rho)
        rows = cal.sample_rows(params, rng, (T,))
        noise = cal.sample_noise(params, rng, (T,)) if variant == Variant.RANDOM_C else None
        c = cal.calibration_parts(params, xs, rows, noise).c
        with np.errstate(over="ignore"):
            cp = np.cumprod(c, axis=0)
        if not np.all(np.isfinite(cp)):
            saturated += 1
        per_ep[e] = _below_one_mean(cp)
        flat = cp.reshape(T, -1)
        frac += (flat >= 1.0).mean(axis=1)
        mx = np.maximum(mx, flat.max(axis=1))
    return CumProductStats(variant, per_ep.mean(axis=0), mx, frac / episodes, per_ep, saturated)


def bootstrap_ordering(samples: dict[Variant, np.ndarray], chain: list[tuple[Variant, str, Variant]],
                       resamples: int = 1000, seed: int = 0) -> dict[str, float]:
    """Fraction of bootstrap resamples in which each link of ``chain`` holds.

    ``chain`` holds (a, op, b) with op in {"<", "<="}, comparing episode means.
    Episodes are resampled independently per variant.
    """
    rng = np.random.default_rng(seed)
    boot = {}
    for v, x in samples.items():
        idx = rng.integers(0, len(x), size=(resamples, len(x)))
        boot[v] = x[idx].mean(axis=1)
    out = {}
    for a, op, b in chain:
        ok = boot[a] < boot[b] if op == "<" else boot[a] <= boot[b]
        out[f"{a.slug} {op} {b.slug}"] = float(ok.mean())
    return out


def cumprod_rows(stats: list[CumProductStats]):
    for s in stats:
        for j in range(len(s.mean_below_one)):
            yield (j + 1, float(s.mean_below_one[j]), float(s.max_entry[j]),
                   float(s.frac_ge_1[j]), s.variant.slug)


def write_cumprod_csv(path, stats: list[CumProductStats]) -> Path:
    return write_csv(path, ["step", "mean_below_one", "max_entry", "frac_ge_1", "variant"],
                     cumprod_rows(stats))


# --- propositions --------------------------------------------------------------

@dataclass
class ProductMoments:
    mean: np.ndarray     # (H, H)
    se: np.ndarray       # (H, H)
    T: int
    N: int

    @property
    def z(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.se > 0, (self.mean - 1.0) / self.se, 0.0)


def prop4_expected_product(L: int = 128, H: int = 4, T: int = 50, samples: int = 100_000,
                           seed: int = 0, D: int = 8, chunk: int = 20_000) -> ProductMoments:
    """Sample mean and standard error of prod_t C_t[m, k] under independent Gaussian contexts.

    Every step draws a fresh context x ~ N(0, Sigma) and a fresh row index, and
    v_c is linear with no bias, which is the setting where E[prod C] = 1.
    """
    params = init_params(D, H, L, Variant.SHM_RANDOM_THETA, seed=stream(seed, "init"))
    params.b_vc[:] = 0.0
    rng = stream(seed, "prop4")
    a = rng.standard_normal((D, D)) / np.sqrt(D)
    chol = np.linalg.cholesky(a @ a.T + 1e-3 * np.eye(D))
    s1 = np.zeros((H, H))
    s2 = np.zeros((H, H))
    done = 0
    while done < samples:
        n = min(chunk, samples - done)
        prod = np.ones((n, H, H))
        for _ in range(T):
            x = rng.standard_normal((n, D)) @ chol.T
            rows = cal.sample_rows(params, rng, (n,))
            prod *= cal.shm_calibration(params, x, rows)
        s1 += prod.sum(axis=0)
        s2 += np.square(prod).sum(axis=0)
        done += n
    mean = s1 / samples
    var = np.maximum(s2 / samples - mean * mean, 0.0) * samples / max(samples - 1, 1)
    return ProductMoments(mean, np.sqrt(var / samples), T, samples)


@dataclass
class CorrelationReport:
    case: str
    lag: int
    rho_v: float          # rho(v_t, v_t')
    rho_uv: float         # rho(u_t v_t, u_t' v_t')
    se_v: float
    se_uv: float
    theory_ratio: float   # |E u|^2 / E[u^2] for independent row draws, 1 for fixed theta

    @property
    def ratio(self) -> float | None:
        if abs(self.rho_v) <= 1e-6:
            return None
        return abs(self.rho_uv) / abs(self.rho_v)

    @property
    def se(self) -> float:
        return float(np.hypot(self.se_v, self.se_uv))

    @property
    def bound_holds(self) -> bool:
        return abs(self.rho_uv) <= abs(self.rho_v) + 3.0 * self.se


def _corr(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt(np.dot(a, a) * np.dot(b, b))
    return float(np.dot(a, b) / den) if den > 0 else float("nan")


def _boot_se(a: np.ndarray, b: np.ndarray, rng, resamples: int = 200) -> float:
    n = len(a)
    vals = np.empty(resamples)
    for i in range(resamples):
        idx = rng.integers(0, n, size=n)
        vals[i] = _corr(a[idx], b[idx])
    return float(vals.std(ddof=1))


def prop5_correlation_ratio(
    L: int = 128,
    samples: int = 100_000,
    dependence: float = 0.9,
    seed: int = 0,
    fixed_theta: bool = False,
    theta_column: np.ndarray | None = None,
    lag: int = 1,
) -> CorrelationReport:
    """Correlation between calibration pre-activations at two timesteps.

    v follows an AR(1) process with coefficient ``dependence``, so
    rho(v_t, v_{t+lag}) = dependence**lag. u is one column of theta, either
    drawn at a uniformly random row per step or held fixed.
    """
    rng = stream(seed, "prop5", int(fixed_theta), lag)
    if theta_column is None:
        H = 16
        theta_column = rng.uniform(-1 / np.sqrt(H), 1 / np.sqrt(H), size=L)
    theta_column = np.asarray(theta_column, dtype=float)
    rho = dependence ** lag
    v_t = rng.standard_normal(samples)
    v_tp = rho * v_t + np.sqrt(max(1.0 - rho * rho, 0.0)) * rng.standard_normal(samples)
    if fixed_theta:
        u_t = u_tp = np.full(samples, theta_column[0])
        theory = 1.0
        case = "fixed_theta"
    else:
        u_t = theta_column[rng.integers(0, len(theta_column), size=samples)]
        u_tp = theta_column[rng.integers(0, len(theta_column), size=samples)]
        theory = float(theta_column.mean() ** 2 / np.mean(theta_column ** 2))
        case = "random_theta"
    if dependence == 0:
        case += "_independent"
    x, xp = u_t * v_t, u_tp * v_tp
    return CorrelationReport(
        case=case, lag=lag,
        rho_v=_corr(v_t, v_tp), rho_uv=_corr(x, xp),
        se_v=_boot_se(v_t, v_tp, rng), se_uv=_boot_se(x, xp, rng),
        theory_ratio=theory,
    )


def write_prop4_csv(path, pm: ProductMoments) -> Path:
    z = pm.z
    rows = ((m, k, pm.mean[m, k], pm.se[m, k], z[m, k], pm.T, pm.N) for m, k in np.ndindex(pm.mean.shape))
    return write_csv(path, ["m", "k", "mean", "se", "z", "T", "N"], rows)


def write_prop5_csv(path, reports: list[CorrelationReport]) -> Path:
    rows = ((r.case, r.lag, r.rho_v, r.rho_uv, r.se, "" if r.ratio is None else r.ratio,
             r.theory_ratio, int(r.bound_holds)) for r in reports)
    return write_csv(path, ["case", "lag", "rho_v", "rho_uv", "se", "ratio", "theory_ratio", "bound_holds"], rows)


# --- Fixed-C witness -------------------------------------------------------------

@dataclass
class Prop3Witness:
    labels: np.ndarray      # (H, H) of {"exploding", "vanishing", "marginal"}
    products: np.ndarray    # |theta|^T by repeated multiplication
    T: int

    @property
    def consistent(self) -> bool:
        """Labels agree with what the direct product actually did."""
        direct = np.where(self.products > 1.0, "exploding",
                          np.where(self.products < 1.0, "vanishing", "marginal"))
        return bool(np.all(direct == self.labels))


def prop3_witness(theta: np.ndarray, T: int) -> Prop3Witness:
    """Classify each entry of a constant calibration matrix by its critical gradient.

    With C_t = theta for all t the product over a span of T steps is theta**T,
    which explodes for |theta| > 1, vanishes for |theta| < 1, and is flat at 1.
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    mag = np.abs(theta)
    labels = np.where(mag > 1.0, "exploding", np.where(mag < 1.0, "vanishing", "marginal"))
    prod = np.ones_like(mag)
    with np.errstate(over="ignore", under="ignore"):
        for _ in range(T):
            prod = prod * mag
    return Prop3Witness(labels, prod, T)


def fixed_c_cumprod(value: float, T: int, H: int = 4) -> np.ndarray:
    """Below-one mean of the cumulative product for a constant C, steps 1..T."""
    c = np.full((T, H, H), value)
    return _below_one_mean(np.cumprod(c, axis=0))


# --- heatmaps -------------------------------------------------------------------

def export_heatmaps(trace: EpisodeTrace, steps, out_dir, episode: int = 0) -> list[Path]:
    """Write M_t and C_t for each requested t as CSV, 17 significant digits.

    Files are ``heatmap_M_t{t}.csv`` and ``heatmap_C_t{t}.csv``; the first line
    is a ``#`` comment with step and episode id, then H comma-separated rows.
    Only unbatched traces are supported.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if trace.ms.ndim != 3:
        raise ConfigError("heatmap export needs a single-episode trace")
    paths = []
    for t in steps:
        t = int(t)
        if not 1 <= t <= trace.T:
            raise IndexError(f"step {t} outside trace of length {trace.T}")
        for tag, mat in (("M", trace.ms[t]), ("C", trace.cs[t - 1])):
            p = out_dir / f"heatmap_{tag}_t{t}.csv"
            with p.open("w") as fh:
                fh.write(f"# matrix={tag} step={t} episode={episode}\n")
                for row in mat:
                    fh.write(",".join("%.17g" % v for v in row) + "\n")
            paths.append(p)
    return paths


def load_heatmap(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
