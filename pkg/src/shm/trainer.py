"""Desk-scale training loops: supervised sequence classification and actor-critic RL.

Both loops push gradients through the memory with :func:`shm.autograd.backward`,
clip the global norm, and take Adam steps. Everything random comes from named
streams of one root seed, so a config fully determines a run.
"""

from __future__ import annotations

import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import calibration as cal
from .autograd import GradReport, backward, clip_gradients
from .calibration import ShmParams, Variant, init_params
from .envs import DelayedRecallEnv, RepeatPrevEnv, SequenceDataset, make_env, make_supervised_dataset
from .errors import ConfigError, NumericError
from .memory import EpisodeTrace, layer_normalize, read, run_sequence
from .utils import config_hash, stream, write_csv


@dataclass
class TrainConfig:
    # memory
    H: int = 16
    L: int = 128
    variant: str = "shm"
    dtype: str = "float64"
    # optimisation
    lr: float = 3e-4
    max_norm: float = 1.0
    batch_size: int = 32
    epochs: int = 200             # supervised passes over the training set
    episodes: int = 50_000        # RL episode budget
    seed: int = 0
    eval_every: int = 10          # epochs (supervised) or updates (RL)
    eval_episodes: int = 200
    # task
    task: str = "delayed_recall"  # delayed_recall | repeat_prev
    T: int = 70                   # supervised sequence length
    n_classes: int = 4            # codes / symbols
    lag: int = 0
    n_train: int = 2048
    n_eval: int = 512
    n_distractors: int = 8
    overwrite_prob: float = 0.0
    # RL
    phase_lengths: tuple = (5, 20, 5)
    apple_prob: float = 0.3
    reward_scale: float = 0.1
    gamma: float = 0.99
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    target_success: float = 1.01  # stop RL early once greedy success reaches this

    def __post_init__(self):
        self.phase_lengths = tuple(int(v) for v in self.phase_lengths)
        Variant.parse(self.variant)
        for name in ("H", "L", "batch_size", "epochs", "episodes", "eval_every", "T", "n_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not self.lr > 0 or not self.max_norm > 0:
            raise ConfigError("lr and max_norm must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must be in [0, 1)")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phase_lengths"] = list(self.phase_lengths)
        return d

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunReport:
    seed: int
    variant: str
    config_hash: str
    records: list[tuple[int, str, float]] = field(default_factory=list)
    clip_events: int = 0
    wall_per_step: float = 0.0
    params: ShmParams | None = field(default=None, repr=False)
    heads: "Heads | None" = field(default=None, repr=False)

    def log(self, step: int, metric: str, value: float) -> None:
        self.records.append((int(step), metric, float(value)))

    def series(self, metric: str) -> list[tuple[int, float]]:
        return [(s, v) for s, m, v in self.records if m == metric]

    def last(self, metric: str) -> float:
        s = self.series(metric)
        return s[-1][1] if s else float("nan")

    def to_csv(self, path) -> Path:
        rows = [(s, m, v, self.seed, self.variant, self.config_hash) for s, m, v in self.records]
        rows.append((rows[-1][0] if rows else 0, "clip_events", float(self.clip_events),
                     self.seed, self.variant, self.config_hash))
        return write_csv(path, ["step", "metric", "value", "seed", "variant", "config_hash"], rows)


# --- heads and optimiser ---------------------------------------------------------

@dataclass
class Heads:
    """Affine readouts from the memory read h_t: logits (policy/classifier) and optional value."""

    out_w: np.ndarray
    out_b: np.ndarray
    value_w: np.ndarray | None = None
    value_b: np.ndarray | None = None

    @classmethod
    def init(cls, H: int, n_out: int, value: bool, rng: np.random.Generator, dtype=np.float64) -> "Heads":
        a = 1.0 / np.sqrt(H)
        heads = cls(rng.uniform(-a, a, (n_out, H)).astype(dtype), np.zeros(n_out, dtype=dtype))
        if value:
            heads.value_w = rng.uniform(-a, a, (1, H)).astype(dtype)
            heads.value_b = np.zeros(1, dtype=dtype)
        return heads

    @property
    def n_out(self) -> int:
        return self.out_w.shape[0]

    @property
    def has_value(self) -> bool:
        return self.value_w is not None

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"out_w": self.out_w, "out_b": self.out_b}
        if self.has_value:
            out["value_w"] = self.value_w
            out["value_b"] = self.value_b
        return out

    def copy(self) -> "Heads":
        return Heads(**{k: v.copy() for k, v in self.arrays().items()})

    def logits(self, h: np.ndarray) -> np.ndarray:
        return h @ self.out_w.T + self.out_b

    def value(self, h: np.ndarray) -> np.ndarray:
        return (h @ self.value_w.T + self.value_b)[..., 0]


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class Adam:
    """Adam over a dict of named arrays, updated in place."""

    def __init__(self, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, g in grads.items():
            p = arrays[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _all_arrays(params: ShmParams, heads: Heads) -> dict[str, np.ndarray]:
    out = {f"mem.{k}": v for k, v in params.arrays().items()}
    out.update({f"head.{k}": v for k, v in heads.arrays().items()})
    return out


def _combined_report(mem: GradReport, head_grads: dict[str, np.ndarray]) -> GradReport:
    g = {f"mem.{k}": v for k, v in mem.grads.items()}
    g.update({f"head.{k}": v for k, v in head_grads.items()})
    return GradReport(g)


class TrainingDiverged(NumericError):
    def __init__(self, message, step=None, params=None, heads=None, report=None):
        super().__init__(message, step)
        self.params, self.heads, self.report = params, heads, report


# --- supervised ----------------------------------------------------------------------

def build_dataset(config: TrainConfig, n: int, seed: int) -> SequenceDataset:
    if config.task == "delayed_recall":
        return make_supervised_dataset("delayed_recall", n, config.T, seed=seed, n_codes=config.n_classes,
                                       n_distractors=config.n_distractors,
                                       overwrite_prob=config.overwrite_prob)
    if config.task == "repeat_prev":
        return make_supervised_dataset("repeat_prev", n, config.T, seed=seed,
                                       n_symbols=config.n_classes, lag=config.lag)
    raise ConfigError(f"unknown supervised task {config.task!r}")


def _forward_batch(params, xs_bt, rng):
    xs = np.swapaxes(xs_bt, 0, 1)  # time-major
    return run_sequence(params, xs, rng=rng)


def classify(params: ShmParams, heads: Heads, data: SequenceDataset, rng: np.random.Generator,
             batch_size: int = 256) -> float:
    """Accuracy over all labelled positions."""
    correct = total = 0
    for s in range(0, len(data), batch_size):
        xs = data.xs[s:s + batch_size].astype(params.w_k.dtype)
        lab = data.labels[s:s + batch_size].T
        tr = _forward_batch(params, xs, rng)
        pred = heads.logits(tr.hs).argmax(axis=-1)
        sel = lab >= 0
        correct += int((pred[sel] == lab[sel]).sum())
        total += int(sel.sum())
    return correct / max(total, 1)


def supervised_step(params: ShmParams, heads: Heads, xs_bt: np.ndarray, labels_bt: np.ndarray,
                    rng: np.random.Generator) -> tuple[float, GradReport]:
    """Mean cross-entropy over labelled positions and its gradient."""
    tr = _forward_batch(params, xs_bt, rng)
    lab = labels_bt.T                        # (T, B)
    sel = lab >= 0
    n = max(int(sel.sum()), 1)
    logits = heads.logits(tr.hs)
    lp = log_softmax(logits)
    safe = np.where(sel, lab, 0)
    nll = -np.take_along_axis(lp, safe[..., None], axis=-1)[..., 0]
    loss = float((nll * sel).sum() / n)
    dlog = np.exp(lp)
    np.put_along_axis(dlog, safe[..., None], np.take_along_axis(dlog, safe[..., None], -1) - 1.0, -1)
    dlog *= sel[..., None] / n
    head_grads = {
        "out_w": dlog.reshape(-1, dlog.shape[-1]).T @ tr.hs.reshape(-1, params.H),
        "out_b": dlog.reshape(-1, dlog.shape[-1]).sum(axis=0),
    }
    dh = dlog @ heads.out_w
    return loss, _combined_report(backward(params, tr, dh), head_grads)


def _dtype(config: TrainConfig):
    return np.float32 if config.dtype == "float32" else np.float64


def train_supervised(config: TrainConfig, log: Callable[[str], None] | None = None,
                     init: ShmParams | None = None) -> RunReport:
    """Cross-entropy training on the configured dataset; ``init`` overrides fresh parameters."""
    seed = config.seed
    dtype = _dtype(config)
    train = build_dataset(config, config.n_train, seed=int(stream(seed, "data").integers(2**31)))
    test = build_dataset(config, config.n_eval, seed=int(stream(seed, "data", 1).integers(2**31)))
    params = init.astype(dtype) if init is not None else init_params(
        train.D, config.H, config.L, config.variant, seed=stream(seed, "init"), dtype=dtype)
    heads = Heads.init(config.H, train.n_classes, value=False, rng=stream(seed, "init", 1), dtype=dtype)
    opt = Adam(config.lr)
    report = RunReport(seed, Variant.parse(config.variant).slug, config.hash)
    order_rng = stream(seed, "order")
    theta_rng = stream(seed, "theta")
    arrays = _all_arrays(params, heads)
    good = (params.copy(), heads.copy())
    n_steps = 0
    t0 = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        perm = order_rng.permutation(len(train))
        losses = []
        for s in range(0, len(train), config.batch_size):
            idx = perm[s:s + config.batch_size]
            try:
                loss, rep = supervised_step(params, heads, train.xs[idx].astype(dtype), train.labels[idx], theta_rng)
            except NumericError as exc:
                raise TrainingDiverged(str(exc), n_steps, *good, report) from exc
            if not np.isfinite(loss):
                raise TrainingDiverged("loss is not finite", n_steps, *good, report)
            rep = clip_gradients(rep, config.max_norm)
            report.clip_events += rep.clip_events
            opt.step(arrays, rep.grads)
            losses.append(loss)
            n_steps += 1
        report.log(epoch, "loss", float(np.mean(losses)))
        good = (params.copy(), heads.copy())
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            # per-epoch stream: a score does not depend on how often we evaluated before
            acc = classify(params, heads, test, stream(seed, "eval", epoch))
            report.log(epoch, "accuracy", acc)
            if log:
                log(f"epoch {epoch:4d} loss {np.mean(losses):.4f} acc {acc:.3f}")
    report.wall_per_step = (time.perf_counter() - t0) / max(n_steps, 1)
    report.params, report.heads = params, heads
    return report


# --- reinforcement learning ---------------------------------------------------------

def context(obs: np.ndarray, prev_action: np.ndarray, n_actions: int) -> np.ndarray:
    """x_t = observation concatenated with a one-hot of the previous action (zeros at t=0)."""
    onehot = np.zeros(prev_action.shape + (n_actions,))
    valid = prev_action >= 0
    onehot[valid, prev_action[valid]] = 1.0
    return np.concatenate([obs, onehot], axis=-1)


class MemoryStepper:
    """Runs the memory one step at a time for a batch and records the tape."""

    def __init__(self, params: ShmParams, batch: int, rng: np.random.Generator):
        self.params = params
        self.rng = rng
        self.m = np.zeros((batch, params.H, params.H), dtype=params.w_k.dtype)
        self.rec: dict[str, list] = {k: [] for k in
                                     ("xs", "rows", "noise", "cs", "us", "ms", "hs", "k", "v", "q",
                                      "eta", "z", "theta_t", "vc", "hidden", "mask")}
        self.rec["ms"].append(self.m)

    def step(self, x: np.ndarray, mask: np.ndarray) -> np.ndarray:
        p = self.params
        B = x.shape[0]
        rows = cal.sample_rows(p, self.rng, (B,)) if p.variant == Variant.SHM_RANDOM_THETA else None
        noise = cal.sample_noise(p, self.rng, (B,)) if p.variant == Variant.RANDOM_C else None
        cp = cal.calibration_parts(p, x, rows, noise)
        up = cal.update_parts(p, x)
        keep = mask[:, None, None]
        c = np.where(keep, cp.c, 1.0)
        u = np.where(keep, up.u, 0.0)
        self.m = self.m * c + u
        q = cal.query(p, x)
        h = read(self.m, q)
        r = self.rec
        for key, val in (("xs", x), ("rows", rows), ("noise", noise), ("cs", c), ("us", u),
                         ("ms", self.m), ("hs", h), ("k", up.k), ("v", up.v), ("q", q),
                         ("eta", up.eta), ("z", cp.z), ("theta_t", cp.theta_t), ("vc", cp.vc),
                         ("hidden", cp.hidden), ("mask", mask)):
            r[key].append(val)
        return h

    def trace(self) -> EpisodeTrace:
        r = self.rec

        def stack(key):
            vals = r[key]
            return None if not vals or vals[0] is None else np.stack(vals)

        return EpisodeTrace(
            variant=self.params.variant, xs=stack("xs"), rows=stack("rows"), noise=stack("noise"),
            cs=stack("cs"), us=stack("us"), ms=stack("ms"), hs=stack("hs"), k=stack("k"),
            v=stack("v"), q=stack("q"), eta=stack("eta"), z=stack("z"), theta_t=stack("theta_t"),
            vc=stack("vc"), hidden=stack("hidden"), mask=stack("mask"),
        )


def env_from_config(config: TrainConfig, scaled: bool = True):
    """Training envs scale rewards by ``reward_scale``; evaluation envs report raw returns."""
    if config.task == "delayed_recall":
        return DelayedRecallEnv(config.n_classes, config.phase_lengths, config.apple_prob,
                                reward_scale=config.reward_scale if scaled else 1.0)
    if config.task == "repeat_prev":
        return RepeatPrevEnv(config.n_classes, config.lag, config.T,
                             reward_scale=config.reward_scale if scaled else 1.0)
    return make_env(config.task)


def policy_gradient_terms(logits, actions, advantages, values, returns, mask,
                          entropy_coef: float, value_coef: float):
    """Advantage actor-critic loss pieces and their gradients w.r.t. logits and values.

    loss = sum_t mask * (-A log pi(a) - entropy_coef * H(pi) + value_coef/2 (G - V)^2)
    """
    lp = log_softmax(logits)
    pi = np.exp(lp)
    a = np.where(mask, actions, 0)
    logp_a = np.take_along_axis(lp, a[..., None], -1)[..., 0]
    ent = -(pi * lp).sum(-1)
    dlog = pi.copy()
    np.put_along_axis(dlog, a[..., None], np.take_along_axis(dlog, a[..., None], -1) - 1.0, -1)
    dlog *= advantages[..., None]                           # d(-A log pi)/dz = A (pi - onehot)
    dlog += entropy_coef * pi * (lp + ent[..., None])      # d(-beta H)/dz
    dlog *= mask[..., None]
    dval = value_coef * (values - returns) * mask
    loss = float((mask * (-advantages * logp_a - entropy_coef * ent
                          + 0.5 * value_coef * (returns - values) ** 2)).sum())
    return loss, dlog, dval, float((ent * mask).sum() / max(mask.sum(), 1))


def _discounted(rewards: np.ndarray, mask: np.ndarray, gamma: float) -> np.ndarray:
    G = np.zeros_like(rewards)
    acc = np.zeros(rewards.shape[1])
    for t in range(rewards.shape[0] - 1, -1, -1):
        acc = rewards[t] + gamma * acc * mask[t]
        G[t] = acc
    return G * mask


def rollout(params: ShmParams, heads: Heads, envs: list, rngs: list, theta_rng, act_rng,
            greedy: bool = False):
    """Run a batch of episodes to completion; returns the recorded tensors and stepper."""
    B = len(envs)
    n_act = envs[0].n_actions
    obs = np.stack([e.reset(r).obs for e, r in zip(envs, rngs)])
    prev = np.full(B, -1)
    alive = np.ones(B, dtype=bool)
    stepper = MemoryStepper(params, B, theta_rng)
    acts, rews, masks, logits_l = [], [], [], []
    success = np.zeros(B, dtype=bool)
    for _ in range(envs[0].horizon):
        x = context(obs, prev, n_act).astype(params.w_k.dtype)
        h = stepper.step(x, alive)
        logits = heads.logits(h)
        if greedy:
            a = logits.argmax(-1)
        else:
            pi = softmax(logits)
            a = (pi.cumsum(-1) > act_rng.random((B, 1))).argmax(-1)
        r = np.zeros(B)
        new_obs = np.zeros_like(obs)
        for i in np.nonzero(alive)[0]:
            tr = envs[i].step(a[i])
            r[i] = tr.reward
            new_obs[i] = tr.obs
            if tr.done:
                success[i] = bool(tr.info.get("success", False))
        acts.append(np.where(alive, a, -1))
        rews.append(r)
        masks.append(alive.copy())
        logits_l.append(logits)
        alive = alive & ~np.array([e.done for e in envs])
        obs, prev = new_obs, a
        if not alive.any():
            break
    return (np.stack(acts), np.stack(rews), np.stack(masks), np.stack(logits_l), success, stepper)


def train_policy_gradient(config: TrainConfig, log: Callable[[str], None] | None = None,
                          init: ShmParams | None = None) -> RunReport:
    """Advantage actor-critic over batches of ``batch_size`` episodes."""
    seed = config.seed
    dtype = _dtype(config)
    probe = env_from_config(config)
    D = probe.obs_dim + probe.n_actions
    params = init.astype(dtype) if init is not None else init_params(
        D, config.H, config.L, config.variant, seed=stream(seed, "init"), dtype=dtype)
    heads = Heads.init(config.H, probe.n_actions, value=True, rng=stream(seed, "init", 1), dtype=dtype)
    opt = Adam(config.lr)
    report = RunReport(seed, Variant.parse(config.variant).slug, config.hash)
    arrays = _all_arrays(params, heads)
    theta_rng, act_rng = stream(seed, "theta"), stream(seed, "act")
    B = config.batch_size
    envs = [env_from_config(config) for _ in range(B)]
    n_updates = max(1, config.episodes // B)
    recall = config.task == "delayed_recall"
    good = (params.copy(), heads.copy())
    t0 = time.perf_counter()
    n_steps = 0
    for upd in range(1, n_updates + 1):
        rngs = [stream(seed, "env", upd, i) for i in range(B)]
        acts, rews, masks, logits, success, stepper = rollout(params, heads, envs, rngs, theta_rng, act_rng)
        tr = stepper.trace()
        n_steps += int(masks.sum())
        values = heads.value(tr.hs)
        returns = _discounted(rews, masks, config.gamma)
        adv = (returns - values) * masks
        loss, dlog, dval, ent = policy_gradient_terms(logits, acts, adv, values, returns, masks,
                                                      config.entropy_coef, config.value_coef)
        if not np.isfinite(loss):
            raise TrainingDiverged("policy loss is not finite", upd, *good, report)
        dlog /= B
        dval /= B
        hs = tr.hs.reshape(-1, config.H)
        head_grads = {
            "out_w": dlog.reshape(-1, dlog.shape[-1]).T @ hs,
            "out_b": dlog.reshape(-1, dlog.shape[-1]).sum(0),
            "value_w": dval.reshape(1, -1) @ hs,
            "value_b": np.array([dval.sum()]),
        }
        dh = dlog @ heads.out_w + dval[..., None] * heads.value_w[0]
        try:
            rep = _combined_report(backward(params, tr, dh), head_grads)
        except NumericError as exc:
            raise TrainingDiverged(str(exc), upd, *good, report) from exc
        rep = clip_gradients(rep, config.max_norm)
        report.clip_events += rep.clip_events
        opt.step(arrays, rep.grads)
        good = (params.copy(), heads.copy())
        ep_return = rews.sum(0) / config.reward_scale
        report.log(upd * B, "train_return", float(ep_return.mean()))
        if recall:
            report.log(upd * B, "train_success", float(success.mean()))
        if upd % config.eval_every == 0 or upd == n_updates:
            ev = evaluate(MemoryPolicy(params, heads, greedy=True), env_from_config(config, scaled=False),
                          config.eval_episodes, seed=seed + 7919 * upd)
            if recall:
                report.log(upd * B, "success_rate", ev.success_rate)
            report.log(upd * B, "mean_return", ev.mean_return)
            if log:
                log(f"update {upd:5d} episodes {upd * B:6d} train_return {ep_return.mean():.3f} "
                    f"eval_success {ev.success_rate:.3f} return {ev.mean_return:.3f} entropy {ent:.3f}")
            if recall and ev.success_rate >= config.target_success:
                break
    report.wall_per_step = (time.perf_counter() - t0) / max(n_steps, 1)
    report.params, report.heads = params, heads
    return report


# --- evaluation --------------------------------------------------------------------

class RandomPolicy:
    def __init__(self, n_actions: int):
        self.n_actions = n_actions

    def begin(self, rng):
        self.rng = rng

    def act(self, obs, env) -> int:
        return int(self.rng.integers(0, self.n_actions))


class OraclePolicy:
    """Knows the hidden state; used to check the success metric's upper end."""

    def begin(self, rng):
        pass

    def act(self, obs, env) -> int:
        return env.oracle_action()


class MemoryPolicy:
    """Acts from the memory read, one step at a time."""

    def __init__(self, params: ShmParams, heads: Heads, greedy: bool = True):
        self.params, self.heads, self.greedy = params, heads, greedy

    def begin(self, rng):
        self.rng = rng
        self.m = np.zeros((self.params.H, self.params.H), dtype=self.params.w_k.dtype)
        self.prev = -1

    def act(self, obs, env) -> int:
        p = self.params
        x = context(obs[None], np.array([self.prev]), self.heads.n_out)[0].astype(p.w_k.dtype)
        rows = cal.sample_rows(p, self.rng, ()) if p.variant == Variant.SHM_RANDOM_THETA else None
        noise = cal.sample_noise(p, self.rng, ()) if p.variant == Variant.RANDOM_C else None
        c = cal.calibration_parts(p, x, rows, noise).c
        self.m = self.m * c + cal.update_matrix(p, x)
        logits = self.heads.logits(read(self.m, cal.query(p, x)))
        if self.greedy:
            a = int(np.argmax(logits))
        else:
            a = int((softmax(logits).cumsum() > self.rng.random()).argmax())
        self.prev = a
        return a


@dataclass
class EvalReport:
    episodes: int
    success_rate: float
    mean_return: float
    std_return: float
    returns: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    @property
    def success_se(self) -> float:
        p = self.success_rate
        return float(np.sqrt(p * (1 - p) / self.episodes)) if self.episodes else float("nan")


def evaluate(policy, env, episodes: int, seed: int = 0) -> EvalReport:
    """Run ``episodes`` fresh-seed episodes; success = terminal bonus earned."""
    if episodes <= 0:
        return EvalReport(0, float("nan"), float("nan"), float("nan"))
    returns = np.zeros(episodes)
    wins = 0
    for i in range(episodes):
        tr = env.reset(stream(seed, "eval", i))
        policy.begin(stream(seed, "eval-policy", i))
        total = 0.0
        while not tr.done:
            tr = env.step(policy.act(tr.obs, env))
            total += tr.reward
        returns[i] = total
        wins += bool(tr.info.get("success", False))
    return EvalReport(episodes, wins / episodes, float(returns.mean()), float(returns.std()), returns)


# --- checkpoints -------------------------------------------------------------------

MAGIC = b"SHMCKPT1"
_HEADER = struct.Struct("<6i")


def checkpoint_save(path, params: ShmParams, heads: Heads) -> Path:
    """Write params and heads in the flat little-endian checkpoint format.

    Layout: 8-byte magic, six int32 (D, H, L, variant tag, n_out, has_value),
    then every array as float64 in ``ShmParams.arrays()`` order followed by
    out_w, out_b[, value_w, value_b].
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = bytearray(MAGIC)
    blob += _HEADER.pack(params.D, params.H, params.L, int(params.variant), heads.n_out, int(heads.has_value))
    for arr in list(params.arrays().values()) + list(heads.arrays().values()):
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    path.write_bytes(bytes(blob))
    return path


def _expected_shapes(D, H, L, variant, n_out, has_value):
    template = init_params(D, H, L, variant, seed=0)
    shapes = [(name, arr.shape) for name, arr in template.arrays().items()]
    shapes += [("out_w", (n_out, H)), ("out_b", (n_out,))]
    if has_value:
        shapes += [("value_w", (1, H)), ("value_b", (1,))]
    return shapes


def checkpoint_load(path, expect: dict | None = None) -> tuple[ShmParams, Heads]:
    """Read a checkpoint; ``expect`` may pin D/H/L/variant and raises on mismatch."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read checkpoint ({exc.strerror})") from exc
    if len(data) < len(MAGIC) + _HEADER.size or data[:len(MAGIC)] != MAGIC:
        raise ConfigError(f"{path}: not a checkpoint (bad magic or header)")
    D, H, L, tag, n_out, has_value = _HEADER.unpack_from(data, len(MAGIC))
    variant = Variant.parse(tag)
    if expect:
        got = {"D": D, "H": H, "L": L, "variant": variant}
        for key, want in expect.items():
            want = Variant.parse(want) if key == "variant" else want
            if got[key] != want:
                raise ConfigError(f"{path}: checkpoint has {key}={got[key]}, config expects {want}")
    shapes = _expected_shapes(D, H, L, variant, n_out, has_value)
    need = sum(int(np.prod(s)) for _, s in shapes) * 8
    body = data[len(MAGIC) + _HEADER.size:]
    if len(body) != need:
        raise ConfigError(f"{path}: expected {need} payload bytes, found {len(body)} (truncated or corrupt)")
    flat = np.frombuffer(body, dtype="<f8")
    arrays = {}
    off = 0
    for name, shape in shapes:
        n = int(np.prod(shape))
        arrays[name] = flat[off:off + n].reshape(shape).astype(np.float64)
        off += n
    params = init_params(D, H, L, variant, seed=0)
    for name in params.field_names():
        params.set_array(name, arrays[name])
    heads = Heads(arrays["out_w"], arrays["out_b"], arrays.get("value_w"), arrays.get("value_b"))
    return params, heads
