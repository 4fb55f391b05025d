"""Calibration and update matrices for the Hadamard memory.

Every function here accepts inputs with arbitrary leading (time/batch)
dimensions; the trailing axis is the feature axis. Outer products put the
first factor on rows and the second on columns:

    C[m, k] = 1 + tanh(theta_t[m] * v_c(x)[k])
    U[i, j] = eta(x) * v(x)[i] * k(x)[j]
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DimensionError

#: tanh output is clamped to [-1 + EPS, 1 - EPS] so SHM entries stay invertible
EPS = 1e-6
DEFAULT_L = 128


class Variant(enum.IntEnum):
    """Calibration design. Integer values are the checkpoint tags."""

    SHM_RANDOM_THETA = 0
    ALL_ONES = 1
    RANDOM_C = 2
    FIXED_C = 3
    FIXED_THETA = 4
    NEURAL_THETA = 5

    @classmethod
    def parse(cls, value: "str | int | Variant") -> "Variant":
        if isinstance(value, Variant):
            return value
        if isinstance(value, (int, np.integer)):
            try:
                return cls(int(value))
            except ValueError:
                raise ConfigError(f"unknown variant tag {value}") from None
        # accepts snake_case, kebab-case and the CamelCase tag names
        key = re.sub(r"(?<=[a-z0-9])(?=[A-Z])", "_", str(value).strip()).lower().replace("-", "_")
        aliases = {
            "shm": cls.SHM_RANDOM_THETA,
            "shm_random_theta": cls.SHM_RANDOM_THETA,
            "random_theta": cls.SHM_RANDOM_THETA,
            "all_ones": cls.ALL_ONES,
            "c1": cls.ALL_ONES,
            "ones": cls.ALL_ONES,
            "random_c": cls.RANDOM_C,
            "fixed_c": cls.FIXED_C,
            "fixed_theta": cls.FIXED_THETA,
            "neural_theta": cls.NEURAL_THETA,
        }
        if key not in aliases:
            raise ConfigError(f"unknown calibration variant {value!r}")
        return aliases[key]

    @property
    def slug(self) -> str:
        return self.name.lower()


# Order is part of the checkpoint format; do not reorder.
CORE_FIELDS = (
    "theta", "w_vc", "b_vc", "w_k", "b_k", "w_v", "b_v",
    "w_q", "b_q", "w_eta", "b_eta",
)
EXTRA_FIELDS = {
    Variant.FIXED_C: ("fixed_c",),
    Variant.FIXED_THETA: ("theta_fixed",),
    Variant.NEURAL_THETA: ("ffw_w1", "ffw_b1", "ffw_w2", "ffw_b2"),
}


@dataclass
class ShmParams:
    """All trainable memory parameters.

    Linear maps are stored as (out, in) weight matrices plus bias vectors.
    ``b_eta`` is a length-1 array so every parameter is an ndarray.
    """

    theta: np.ndarray
    w_vc: np.ndarray
    b_vc: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_q: np.ndarray
    b_q: np.ndarray
    w_eta: np.ndarray
    b_eta: np.ndarray
    variant: Variant = Variant.SHM_RANDOM_THETA
    extra: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def D(self) -> int:
        return self.w_k.shape[1]

    @property
    def H(self) -> int:
        return self.w_k.shape[0]

    @property
    def L(self) -> int:
        return self.theta.shape[0]

    def field_names(self) -> tuple[str, ...]:
        return CORE_FIELDS + EXTRA_FIELDS.get(self.variant, ())

    def arrays(self) -> dict[str, np.ndarray]:
        """Name -> array in checkpoint order (live references, not copies)."""
        out = {name: getattr(self, name) for name in CORE_FIELDS}
        for name in EXTRA_FIELDS.get(self.variant, ()):
            out[name] = self.extra[name]
        return out

    def set_array(self, name: str, value: np.ndarray) -> None:
        if name in CORE_FIELDS:
            setattr(self, name, value)
        else:
            self.extra[name] = value

    def copy(self) -> "ShmParams":
        new = ShmParams(
            **{name: getattr(self, name).copy() for name in CORE_FIELDS},
            variant=self.variant,
            extra={k: v.copy() for k, v in self.extra.items()},
        )
        return new

    def n_parameters(self) -> int:
        return sum(a.size for a in self.arrays().values())

    def astype(self, dtype) -> "ShmParams":
        new = self.copy()
        for name, arr in new.arrays().items():
            new.set_array(name, arr.astype(dtype))
        return new


@dataclass(frozen=True)
class ThetaDraw:
    """A sampled calibration row. ``row`` is 0-based (row 1 in 1-based terms is 0)."""

    row: int
    counter: int = 0


def init_params(
    D: int,
    H: int,
    L: int = DEFAULT_L,
    variant: "Variant | str" = Variant.SHM_RANDOM_THETA,
    seed: "int | np.random.Generator" = 0,
    dtype=np.float64,
) -> ShmParams:
    """Fresh parameters: weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases."""
    if min(D, H, L) < 1:
        raise ConfigError(f"dims must be >= 1, got D={D}, H={H}, L={L}")
    variant = Variant.parse(variant)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    a_d = 1.0 / np.sqrt(D)
    a_h = 1.0 / np.sqrt(H)

    def lin(n_out, n_in, a):
        return rng.uniform(-a, a, size=(n_out, n_in)).astype(dtype)

    theta = rng.uniform(-a_h, a_h, size=(L, H)).astype(dtype)
    maps = {}
    for name in ("vc", "k", "v", "q"):
        maps[f"w_{name}"] = lin(H, D, a_d)
        maps[f"b_{name}"] = np.zeros(H, dtype=dtype)
    w_eta = rng.uniform(-a_d, a_d, size=D).astype(dtype)
    b_eta = np.zeros(1, dtype=dtype)

    extra: dict[str, np.ndarray] = {}
    if variant == Variant.FIXED_C:
        extra["fixed_c"] = (1.0 + rng.uniform(-a_h, a_h, size=(H, H))).astype(dtype)
    elif variant == Variant.FIXED_THETA:
        extra["theta_fixed"] = rng.uniform(-a_h, a_h, size=H).astype(dtype)
    elif variant == Variant.NEURAL_THETA:
        extra["ffw_w1"] = lin(H, D, a_d)
        extra["ffw_b1"] = np.zeros(H, dtype=dtype)
        extra["ffw_w2"] = lin(H, H, a_h)
        extra["ffw_b2"] = np.zeros(H, dtype=dtype)

    return ShmParams(theta=theta, w_eta=w_eta, b_eta=b_eta, variant=variant,
                     extra=extra, **maps)


def sigmoid(a):
    """Logistic function kept strictly inside (0, 1) in floating point."""
    a = np.asarray(a)
    info = np.finfo(a.dtype if a.dtype.kind == "f" else np.float64)
    return np.clip(expit(a), info.tiny, 1.0 - info.epsneg)


def linear(x, w, b):
    return x @ w.T + b


def _check_x(params: ShmParams, x: np.ndarray) -> None:
    if x.shape[-1] != params.D:
        raise DimensionError(f"context has length {x.shape[-1]}, params expect D={params.D}")


def sample_theta_row(params: ShmParams, rng: np.random.Generator, counter: int = 0) -> ThetaDraw:
    """Draw one row index uniformly from [0, L)."""
    return ThetaDraw(int(rng.integers(0, params.L)), counter)


def sample_rows(params: ShmParams, rng: np.random.Generator, shape) -> np.ndarray:
    return rng.integers(0, params.L, size=shape)


def sample_noise(params: ShmParams, rng: np.random.Generator, shape) -> np.ndarray:
    """Standard normal pre-activations for the RandomC variant, shape (*shape, H, H)."""
    shape = (int(shape),) if np.isscalar(shape) else tuple(shape)
    return rng.standard_normal(size=shape + (params.H, params.H))


class CalParts(NamedTuple):
    c: np.ndarray
    z: np.ndarray | None          # pre-tanh outer product
    theta_t: np.ndarray | None    # the calibration row actually used
    vc: np.ndarray | None
    hidden: np.ndarray | None     # NeuralTheta hidden activation


def clamped_tanh(z: np.ndarray) -> np.ndarray:
    return np.clip(np.tanh(z), -1.0 + EPS, 1.0 - EPS)


def calibration_parts(
    params: ShmParams,
    x: np.ndarray,
    rows: np.ndarray | int | None = None,
    noise: np.ndarray | None = None,
) -> CalParts:
    """C for any variant plus the intermediates the backward pass needs."""
    _check_x(params, x)
    variant = params.variant
    lead = x.shape[:-1]
    H = params.H
    if variant == Variant.ALL_ONES:
        return CalParts(np.ones(lead + (H, H), dtype=x.dtype), None, None, None, None)
    if variant == Variant.RANDOM_C:
        if noise is None:
            raise ConfigError("RandomC calibration needs a noise sample")
        return CalParts(1.0 + np.tanh(noise), None, None, None, None)
    if variant == Variant.FIXED_C:
        c = np.broadcast_to(params.extra["fixed_c"], lead + (H, H)).copy()
        return CalParts(c, None, None, None, None)

    vc = linear(x, params.w_vc, params.b_vc)
    hidden = None
    if variant == Variant.SHM_RANDOM_THETA:
        if rows is None:
            raise ConfigError("SHM calibration needs sampled theta rows")
        theta_t = params.theta[np.asarray(rows)]
    elif variant == Variant.FIXED_THETA:
        theta_t = np.broadcast_to(params.extra["theta_fixed"], lead + (H,))
    elif variant == Variant.NEURAL_THETA:
        hidden = np.tanh(linear(x, params.extra["ffw_w1"], params.extra["ffw_b1"]))
        theta_t = linear(hidden, params.extra["ffw_w2"], params.extra["ffw_b2"])
    else:  # pragma: no cover - enum is closed
        raise ConfigError(f"unknown variant {variant!r}")
    z = theta_t[..., :, None] * vc[..., None, :]
    return CalParts(1.0 + clamped_tanh(z), z, theta_t, vc, hidden)


def shm_calibration(params: ShmParams, x: np.ndarray, draw: "ThetaDraw | int | np.ndarray") -> np.ndarray:
    """C = 1 + tanh(theta[l] (x) v_c(x)), entries clamped into [EPS, 2 - EPS]."""
    rows = draw.row if isinstance(draw, ThetaDraw) else draw
    _check_x(params, x)
    vc = linear(x, params.w_vc, params.b_vc)
    theta_t = params.theta[np.asarray(rows)]
    return 1.0 + clamped_tanh(theta_t[..., :, None] * vc[..., None, :])


def variant_calibration(
    params: ShmParams,
    x: np.ndarray,
    t: int = 0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """C for the configured variant at one step, drawing any randomness from ``rng``.

    ``t`` is accepted for symmetry with the recurrence; no variant depends on it.
    """
    variant = params.variant
    rows = noise = None
    if variant == Variant.SHM_RANDOM_THETA:
        if rng is None:
            raise ConfigError("SHM calibration needs an rng")
        rows = sample_rows(params, rng, x.shape[:-1])
    elif variant == Variant.RANDOM_C:
        if rng is None:
            raise ConfigError("RandomC calibration needs an rng")
        noise = rng.standard_normal(size=x.shape[:-1] + (params.H, params.H))
    return calibration_parts(params, x, rows, noise).c


class UpdParts(NamedTuple):
    u: np.ndarray
    k: np.ndarray
    v: np.ndarray
    eta: np.ndarray


def update_parts(params: ShmParams, x: np.ndarray) -> UpdParts:
    _check_x(params, x)
    k = linear(x, params.w_k, params.b_k)
    v = linear(x, params.w_v, params.b_v)
    eta = sigmoid(x @ params.w_eta + params.b_eta[0])
    u = eta[..., None, None] * (v[..., :, None] * k[..., None, :])
    return UpdParts(u, k, v, eta)


def update_matrix(params: ShmParams, x: np.ndarray) -> np.ndarray:
    """U = eta(x) * (v(x) outer k(x)); value on rows, key on columns."""
    return update_parts(params, x).u


def query(params: ShmParams, x: np.ndarray) -> np.ndarray:
    _check_x(params, x)
    return linear(x, params.w_q, params.b_q)
