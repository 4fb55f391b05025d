"""Hadamard memory write/read in three interchangeable evaluation modes.

The recurrence is M_t = M_{t-1} * C_t + U_t (entrywise), read as h_t = M_t q_t.
It can be evaluated step by step, from the unrolled closed form, or with a
log-depth prefix scan. Array kernels take time on axis 0 and treat every
trailing axis as independent memory entries, so batches ride along for free.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import calibration as cal
from .calibration import ShmParams, Variant
from .errors import ConfigError, DimensionError, NumericError

MODES = ("sequential", "closed_form", "scan")

#: C entries smaller than this in magnitude are not divided by in the scan
EPS_DIV = 1e-9
# |log C_p| allowed inside one scan segment before a new segment starts
_LOG_RANGE = 300.0


@dataclass(frozen=True)
class MemoryState:
    m: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, H: int, dtype=np.float64) -> "MemoryState":
        return cls(np.zeros((H, H), dtype=dtype), 0)

    @property
    def H(self) -> int:
        return self.m.shape[-1]


def _as_matrix(state: "MemoryState | np.ndarray") -> np.ndarray:
    return state.m if isinstance(state, MemoryState) else np.asarray(state)


def write_step(state: MemoryState, c: np.ndarray, u: np.ndarray) -> MemoryState:
    """M_t = M_{t-1} * C_t + U_t; returns a new state, the input is untouched."""
    m = state.m
    if c.shape != m.shape or u.shape != m.shape:
        raise DimensionError(f"shapes differ: M {m.shape}, C {c.shape}, U {u.shape}")
    new = m * c + u
    if not np.all(np.isfinite(new)):
        raise NumericError("non-finite memory after write", step=state.step + 1)
    return MemoryState(new, state.step + 1)


def read(state: "MemoryState | np.ndarray", q: np.ndarray) -> np.ndarray:
    """h = M q."""
    m = _as_matrix(state)
    q = np.asarray(q)
    if q.shape[-1] != m.shape[-1]:
        raise DimensionError(f"query length {q.shape[-1]} != H={m.shape[-1]}")
    return np.einsum("...ij,...j->...i", m, q)


# --- array kernels -----------------------------------------------------------

def _check_seq(m0: np.ndarray, cs: np.ndarray, us: np.ndarray) -> None:
    if cs.shape != us.shape:
        raise DimensionError(f"C sequence {cs.shape} vs U sequence {us.shape}")
    if cs.shape[1:] != m0.shape:
        raise DimensionError(f"M0 {m0.shape} does not match step shape {cs.shape[1:]}")


def sequential_array(m0: np.ndarray, cs: np.ndarray, us: np.ndarray, check: bool = True) -> np.ndarray:
    """Memories M_0..M_T (length T+1) by direct recurrence."""
    _check_seq(m0, cs, us)
    T = cs.shape[0]
    ms = np.empty((T + 1,) + m0.shape, dtype=np.result_type(m0, cs, us))
    ms[0] = m0
    for t in range(T):
        ms[t + 1] = ms[t] * cs[t] + us[t]
        if check and not np.all(np.isfinite(ms[t + 1])):
            raise NumericError("non-finite memory after write", step=t + 1)
    return ms


def closed_form_array(m0: np.ndarray, cs: np.ndarray, us: np.ndarray) -> np.ndarray:
    """Memories M_1..M_T from the unrolled sum; O(T^2) work, no reuse across t."""
    _check_seq(m0, cs, us)
    T = cs.shape[0]
    out = np.empty(cs.shape, dtype=np.result_type(m0, cs, us))
    ones = np.ones((1,) + m0.shape, dtype=out.dtype)
    for t in range(T):
        # tail[r] = C_t * C_{t-1} * ... * C_{t-r}  (0-based steps)
        tail = np.cumprod(cs[t::-1], axis=0)
        # weight for U_i is prod_{j=i+1..t} C_j; i = t gets the empty product
        weights = np.concatenate([tail[:t][::-1], ones], axis=0)
        out[t] = m0 * tail[t] + np.sum(us[: t + 1] * weights, axis=0)
    return out


def _inclusive_scan(a: np.ndarray, op) -> tuple[np.ndarray, int]:
    """Hillis-Steele inclusive scan along axis 0; returns (result, combine levels)."""
    a = a.copy()
    n = a.shape[0]
    levels = 0
    stride = 1
    while stride < n:
        a[stride:] = op(a[stride:], a[:-stride])
        stride *= 2
        levels += 1
    return a, levels


def _scan_segment(m0: np.ndarray, cs: np.ndarray, us: np.ndarray) -> tuple[np.ndarray, int]:
    """Parallel Hadamard-memory evaluation of one segment (all C nonzero).

    Prefix-product C, prefix-product [M0, C], divide U by the running product,
    prefix-sum, then rescale: M_t = M0 C_p[t] + C_p[t] * sum_{i<=t} U_i / C_p[i].
    """
    cp, lv1 = _inclusive_scan(cs, np.multiply)
    dp, lv2 = _inclusive_scan(np.concatenate([m0[None], cs], axis=0), np.multiply)
    e = us / cp
    ep, lv3 = _inclusive_scan(e, np.add)
    return dp[1:] + cp * ep, max(lv1, lv2, lv3)


@dataclass
class ScanStats:
    """Instrumentation filled in by the scan."""

    depth: int = 0          # max combine levels over scanned segments
    fallbacks: int = 0      # steps evaluated sequentially because some |C| < EPS_DIV
    segments: int = 0
    workers: int = 1


def _plan_segments(cs_flat: np.ndarray, eps_div: float) -> list[tuple[int, int, bool]]:
    """Split [0, T) into (start, stop, scanned) pieces.

    A step with a near-zero C entry becomes its own sequential piece. Scanned
    pieces are also cut when the running product leaves exp(+-_LOG_RANGE), so
    the division by C_p never under- or overflows.
    """
    T = cs_flat.shape[0]
    absc = np.abs(cs_flat)
    bad = np.any(absc < eps_div, axis=1)
    with np.errstate(divide="ignore"):
        logc = np.where(bad[:, None], 0.0, np.log(np.where(absc > 0, absc, 1.0)))
    pieces = []
    s = 0
    while s < T:
        if bad[s]:
            pieces.append((s, s + 1, False))
            s += 1
            continue
        stop = s
        while stop < T and not bad[stop]:
            stop += 1
        cum = np.cumsum(logc[s:stop], axis=0)
        over = np.nonzero(np.any(np.abs(cum) > _LOG_RANGE, axis=1))[0]
        e = s + max(int(over[0]), 1) if over.size else stop
        pieces.append((s, e, True))
        s = e
    return pieces


def scan_array(
    m0: np.ndarray,
    cs: np.ndarray,
    us: np.ndarray,
    workers: int = 1,
    eps_div: float = EPS_DIV,
    stats: ScanStats | None = None,
) -> np.ndarray:
    """Memories M_1..M_T via prefix scans.

    Entries are independent, so ``workers`` > 1 splits the flattened entry
    axis across threads. Every entry goes through identical arithmetic in
    every split, which makes the output bit-identical for any worker count.
    """
    _check_seq(m0, cs, us)
    T = cs.shape[0]
    dtype = np.result_type(m0, cs, us)
    shape = m0.shape
    stats = stats if stats is not None else ScanStats()
    stats.workers = max(1, int(workers))
    if T == 0:
        return np.empty((0,) + shape, dtype=dtype)
    n = int(np.prod(shape))
    cf = cs.reshape(T, n)
    uf = us.reshape(T, n)
    mf = m0.reshape(n).astype(dtype)
    pieces = _plan_segments(cf, eps_div)
    stats.segments = sum(1 for p in pieces if p[2])
    stats.fallbacks = sum(1 for p in pieces if not p[2])
    stats.depth = 0

    def run(cols: slice) -> tuple[np.ndarray, int]:
        out = np.empty((T, cols.stop - cols.start), dtype=dtype)
        cur = mf[cols]
        depth = 0
        for s, e, scanned in pieces:
            c = cf[s:e, cols]
            u = uf[s:e, cols]
            if scanned:
                seg, lv = _scan_segment(cur, c, u)
                depth = max(depth, lv)
            else:
                seg = (cur * c[0] + u[0])[None]
            out[s:e] = seg
            cur = seg[-1]
        return out, depth

    k = min(stats.workers, n)
    bounds = np.linspace(0, n, k + 1).astype(int)
    chunks = [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]
    if k == 1:
        results = [run(chunks[0])]
    else:
        with ThreadPoolExecutor(max_workers=k) as pool:
            results = list(pool.map(run, chunks))
    flat = np.concatenate([r[0] for r in results], axis=1)
    stats.depth = max(r[1] for r in results)
    if not np.all(np.isfinite(flat)):
        t = int(np.nonzero(~np.all(np.isfinite(flat), axis=1))[0][0])
        raise NumericError("non-finite memory in scan", step=t + 1)
    return flat.reshape((T,) + shape)


def expected_scan_depth(T: int) -> int:
    """Combine levels of a Hillis-Steele scan over the T+1 items [M0, C_1..C_T]."""
    return math.ceil(math.log2(T + 1)) if T > 0 else 0


# --- state-level API ----------------------------------------------------------

def _stack(seq) -> np.ndarray | None:
    if isinstance(seq, np.ndarray):
        return seq
    seq = list(seq)
    return np.stack(seq) if seq else None


def _prepare(m0, cs, us):
    m0a = _as_matrix(m0)
    cs, us = _stack(cs), _stack(us)
    empty = np.empty((0,) + m0a.shape, dtype=m0a.dtype)
    cs = empty if cs is None else cs
    us = empty if us is None else us
    if len(cs) != len(us):
        raise DimensionError(f"{len(cs)} calibration matrices vs {len(us)} update matrices")
    return m0a, cs, us


def _to_states(ms: np.ndarray, start: int) -> list[MemoryState]:
    return [MemoryState(ms[i], start + i + 1) for i in range(ms.shape[0])]


def unroll_closed_form(m0: MemoryState, cs: Sequence[np.ndarray], us: Sequence[np.ndarray]) -> list[MemoryState]:
    """States M_1..M_T from the unrolled formula; empty input gives an empty list."""
    m0a, cs, us = _prepare(m0, cs, us)
    start = m0.step if isinstance(m0, MemoryState) else 0
    return _to_states(closed_form_array(m0a, cs, us), start)


def parallel_scan(
    m0: MemoryState,
    cs: Sequence[np.ndarray],
    us: Sequence[np.ndarray],
    workers: int = 1,
    stats: ScanStats | None = None,
    eps_div: float = EPS_DIV,
) -> list[MemoryState]:
    """States M_1..M_T computed with log-depth prefix scans."""
    m0a, cs, us = _prepare(m0, cs, us)
    start = m0.step if isinstance(m0, MemoryState) else 0
    return _to_states(scan_array(m0a, cs, us, workers=workers, eps_div=eps_div, stats=stats), start)


def layer_normalize(x: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance along the last axis; constant vectors map to zeros."""
    x = np.asarray(x, dtype=np.result_type(x, np.float64) if np.asarray(x).dtype.kind != "f" else x.dtype)
    if x.shape[-1] < 2:
        raise ConfigError("layer normalization needs at least 2 features")
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    flat = var <= 1e-20 * np.maximum(mean * mean, np.finfo(x.dtype).tiny)
    safe = np.where(flat, 1.0, var)
    return np.where(flat, 0.0, (x - mean) / np.sqrt(safe))


# --- episodes -----------------------------------------------------------------

@dataclass
class EpisodeTrace:
    """Everything computed while running the memory over one (or a batch of) episode(s).

    Arrays are time-major: ``xs`` is (T, *batch, D), ``ms`` is (T+1, *batch, H, H)
    with ``ms[0]`` = M_0. The cached intermediates double as the backward tape.
    """

    variant: Variant
    xs: np.ndarray
    rows: np.ndarray | None
    noise: np.ndarray | None
    cs: np.ndarray
    us: np.ndarray
    ms: np.ndarray
    hs: np.ndarray
    k: np.ndarray
    v: np.ndarray
    q: np.ndarray
    eta: np.ndarray
    z: np.ndarray | None = None
    theta_t: np.ndarray | None = None
    vc: np.ndarray | None = None
    hidden: np.ndarray | None = None
    mask: np.ndarray | None = None
    mode: str = "sequential"
    scan_stats: ScanStats | None = field(default=None, repr=False)

    @property
    def T(self) -> int:
        return self.xs.shape[0]

    def states(self) -> list[MemoryState]:
        return [MemoryState(self.ms[t], t) for t in range(self.T + 1)]


def run_sequence(
    params: ShmParams,
    xs: np.ndarray,
    mode: str = "sequential",
    rng: np.random.Generator | None = None,
    rows: np.ndarray | None = None,
    noise: np.ndarray | None = None,
    m0: np.ndarray | None = None,
    mask: np.ndarray | None = None,
    workers: int = 1,
) -> EpisodeTrace:
    """Run the memory over contexts ``xs`` of shape (T, *batch, D).

    Random draws (theta rows for SHM, Gaussian pre-activations for RandomC)
    come from ``rows``/``noise`` when given, otherwise from ``rng``. Masked-out
    steps (``mask`` False) use C = 1 and U = 0. The memory is written first,
    then read, so h_t = M_t q(x_t).
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    xs = np.asarray(xs)
    if xs.ndim < 2:
        raise DimensionError("xs must be (T, ..., D)")
    if not np.all(np.isfinite(xs)):
        bad = int(np.nonzero(~np.all(np.isfinite(xs.reshape(xs.shape[0], -1)), axis=1))[0][0])
        raise NumericError("non-finite context", step=bad + 1)
    T = xs.shape[0]
    lead = xs.shape[:-1]
    H = params.H
    variant = params.variant
    if variant == Variant.SHM_RANDOM_THETA and rows is None:
        if rng is None:
            raise ConfigError("SHM needs theta rows or an rng to draw them")
        rows = cal.sample_rows(params, rng, lead)
    if variant == Variant.RANDOM_C and noise is None:
        if rng is None:
            raise ConfigError("RandomC needs noise or an rng to draw it")
        noise = cal.sample_noise(params, rng, lead)

    cp = cal.calibration_parts(params, xs, rows, noise)
    up = cal.update_parts(params, xs)
    cs, us = cp.c, up.u
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        cs = np.where(mask[..., None, None], cs, 1.0)
        us = np.where(mask[..., None, None], us, 0.0)
    q = cal.query(params, xs)

    if m0 is None:
        m0 = np.zeros(lead[1:] + (H, H), dtype=xs.dtype)
    stats = None
    if mode == "sequential":
        ms = sequential_array(m0, cs, us)
    else:
        if mode == "closed_form":
            body = closed_form_array(m0, cs, us)
        else:
            stats = ScanStats()
            body = scan_array(m0, cs, us, workers=workers, stats=stats)
        ms = np.concatenate([m0[None], body], axis=0)
        if not np.all(np.isfinite(ms)):
            t = int(np.nonzero(~np.all(np.isfinite(ms.reshape(T + 1, -1)), axis=1))[0][0])
            raise NumericError("non-finite memory", step=t)
    hs = read(ms[1:], q) if T else np.empty(lead + (H,), dtype=xs.dtype)
    return EpisodeTrace(
        variant=variant, xs=xs, rows=rows, noise=noise, cs=cs, us=us, ms=ms, hs=hs,
        k=up.k, v=up.v, q=q, eta=up.eta, z=cp.z, theta_t=cp.theta_t, vc=cp.vc,
        hidden=cp.hidden, mask=mask, mode=mode, scan_stats=stats,
    )


def with_mode(trace: EpisodeTrace, mode: str) -> EpisodeTrace:
    """Re-evaluate a trace's memory with another mode, reusing its C and U."""
    m0 = trace.ms[0]
    if mode == "sequential":
        ms = sequential_array(m0, trace.cs, trace.us)
    elif mode == "closed_form":
        ms = np.concatenate([m0[None], closed_form_array(m0, trace.cs, trace.us)])
    else:
        ms = np.concatenate([m0[None], scan_array(m0, trace.cs, trace.us)])
    return replace(trace, ms=ms, hs=read(ms[1:], trace.q), mode=mode)
