"""Reverse-mode gradients through the memory recurrence.

The forward trace (:class:`shm.memory.EpisodeTrace`) already caches every
intermediate of the affine maps, the tanh/sigmoid nonlinearities, the outer
products and the Hadamard recurrence, so it serves as the tape. ``backward``
walks it in reverse. Draws of the calibration row are constants: only the
row that was drawn at a step receives that step's gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .calibration import EPS, ShmParams, Variant
from .errors import ConfigError, DimensionError, NumericError
from .memory import EpisodeTrace, run_sequence

DEFAULT_MAX_NORM = 1.0


@dataclass
class GradReport:
    grads: dict[str, np.ndarray]
    clip_events: int = 0
    norm: float = field(init=False)

    def __post_init__(self):
        self.norm = global_norm(self.grads)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.grads[name]

    def merged(self, other: "GradReport", prefix: str = "") -> "GradReport":
        grads = dict(self.grads)
        grads.update({prefix + k: v for k, v in other.grads.items()})
        return GradReport(grads, self.clip_events + other.clip_events)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values())))


def _lin_grads(d_out: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = d_out.reshape(-1, d_out.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    return d2.T @ x2, d2.sum(axis=0)


def backward(
    params: ShmParams,
    trace: EpisodeTrace,
    dh: np.ndarray,
    dm_final: np.ndarray | None = None,
) -> GradReport:
    """Gradients of a loss w.r.t. every memory parameter.

    ``dh`` holds dLoss/dh_t with the same shape as ``trace.hs``; ``dm_final``
    optionally adds a gradient on the last memory M_T.
    """
    dh = np.asarray(dh)
    if dh.shape != trace.hs.shape:
        raise DimensionError(f"dh shape {dh.shape} != read shape {trace.hs.shape}")
    T = trace.T
    ms, cs = trace.ms, trace.cs
    grads = {name: np.zeros_like(arr) for name, arr in params.arrays().items()}
    if T == 0:
        return GradReport(grads)

    dq = np.einsum("t...ij,t...i->t...j", ms[1:], dh)
    dm_read = dh[..., :, None] * trace.q[..., None, :]

    dC = np.empty_like(cs)
    dU = np.empty_like(cs)
    carry = np.zeros_like(ms[0]) if dm_final is None else np.array(dm_final, dtype=ms.dtype)
    for t in range(T - 1, -1, -1):
        g = carry + dm_read[t]
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite memory gradient", step=t + 1)
        dC[t] = g * ms[t]
        dU[t] = g
        carry = g * cs[t]
    if trace.mask is not None:
        keep = trace.mask[..., None, None]
        dC = np.where(keep, dC, 0.0)
        dU = np.where(keep, dU, 0.0)

    xs = trace.xs
    # update path: U = eta * v k^T
    eta, v, k = trace.eta, trace.v, trace.k
    d_eta = np.einsum("...ij,...i,...j->...", dU, v, k)
    dv = eta[..., None] * np.einsum("...ij,...j->...i", dU, k)
    dk = eta[..., None] * np.einsum("...ij,...i->...j", dU, v)
    da = d_eta * eta * (1.0 - eta)
    grads["w_eta"] = (da.reshape(-1) @ xs.reshape(-1, xs.shape[-1]))
    grads["b_eta"] = np.array([da.sum()])
    grads["w_k"], grads["b_k"] = _lin_grads(dk, xs)
    grads["w_v"], grads["b_v"] = _lin_grads(dv, xs)
    grads["w_q"], grads["b_q"] = _lin_grads(dq, xs)

    # calibration path
    variant = params.variant
    if variant == Variant.FIXED_C:
        grads["fixed_c"] = dC.reshape((-1,) + dC.shape[-2:]).sum(axis=0)
    elif variant in (Variant.SHM_RANDOM_THETA, Variant.FIXED_THETA, Variant.NEURAL_THETA):
        th = np.tanh(trace.z)
        dz = dC * (1.0 - th * th) * (np.abs(th) < 1.0 - EPS)
        d_theta_t = np.einsum("...mk,...k->...m", dz, trace.vc)
        d_vc = np.einsum("...mk,...m->...k", dz, trace.theta_t)
        grads["w_vc"], grads["b_vc"] = _lin_grads(d_vc, xs)
        if variant == Variant.SHM_RANDOM_THETA:
            g_theta = np.zeros_like(params.theta)
            np.add.at(g_theta, np.asarray(trace.rows).reshape(-1), d_theta_t.reshape(-1, params.H))
            grads["theta"] = g_theta
        elif variant == Variant.FIXED_THETA:
            grads["theta_fixed"] = d_theta_t.reshape(-1, params.H).sum(axis=0)
        else:
            hidden = trace.hidden
            grads["ffw_w2"], grads["ffw_b2"] = _lin_grads(d_theta_t, hidden)
            d_hidden = d_theta_t @ params.extra["ffw_w2"]
            d_pre = d_hidden * (1.0 - hidden * hidden)
            grads["ffw_w1"], grads["ffw_b1"] = _lin_grads(d_pre, xs)

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    return GradReport(grads)


def clip_gradients(report: GradReport, max_norm: float = DEFAULT_MAX_NORM) -> GradReport:
    """Rescale all gradients together so their global L2 norm is at most ``max_norm``."""
    if not max_norm > 0:
        raise ConfigError("max_norm must be positive")
    norm = report.norm
    if not np.isfinite(norm):
        # an inf/nan norm cannot be rescaled meaningfully; zero the step instead
        grads = {k: np.zeros_like(v) for k, v in report.grads.items()}
        return GradReport(grads, report.clip_events + 1)
    if norm <= max_norm:
        return report
    scale = max_norm / norm
    return GradReport({k: v * scale for k, v in report.grads.items()}, report.clip_events + 1)


def critical_gradients_fixed_c(theta: float, span: int) -> tuple[float, float]:
    """Per-entry critical gradients when C_t = theta for every t.

    g1 = d/dtheta prod_{j=i+1..t} theta = span * theta**(span-1)
    g2 = prod_{j=i+1..t} theta = theta**span
    """
    if span < 1:
        raise ConfigError("span must be >= 1")
    return span * theta ** (span - 1), theta ** span


def finite_difference_oracle(
    params: ShmParams,
    xs: np.ndarray,
    loss_fn: Callable[[EpisodeTrace], float],
    step: float = 1e-5,
    rows: np.ndarray | None = None,
    noise: np.ndarray | None = None,
    names: tuple[str, ...] | None = None,
    **run_kwargs,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``loss_fn(run_sequence(...))`` per scalar parameter.

    Pass the same ``rows``/``noise`` the analytic pass used so both
    perturbations see identical random draws.
    """
    if not step > 0:
        raise ConfigError("finite-difference step must be positive")
    work = params.copy()
    out = {}
    for name, arr in work.arrays().items():
        if names is not None and name not in names:
            continue
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn(run_sequence(work, xs, rows=rows, noise=noise, **run_kwargs))
            flat[i] = orig - step
            down = loss_fn(run_sequence(work, xs, rows=rows, noise=noise, **run_kwargs))
            flat[i] = orig
            g.reshape(-1)[i] = (up - down) / (2.0 * step)
        out[name] = g
    return out


def max_relative_error(analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray],
                       threshold: float = 1e-8) -> float:
    """Largest |a - n| / max(|a|, |n|) over entries with |a| > threshold."""
    worst = 0.0
    for name, a in analytic.items():
        if name not in numeric:
            continue
        n = numeric[name]
        sel = np.abs(a) > threshold
        if np.any(sel):
            rel = np.abs(a[sel] - n[sel]) / np.maximum(np.abs(a[sel]), np.abs(n[sel]))
            worst = max(worst, float(rel.max()))
    return worst
