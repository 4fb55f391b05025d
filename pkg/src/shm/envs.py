"""Small partially observable tasks that need long-term memory.

``DelayedRecallEnv`` is a symbolic version of the Visual Match task: a color
code is shown only in phase 1, phase 2 hands out apple rewards as a
distraction, and phase 3 asks the agent to pick the door matching the code.
``RepeatPrevEnv`` asks the agent to repeat the symbol seen k steps earlier.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ProtocolError

PICK, MOVE = 0, 1


@dataclass
class Transition:
    obs: np.ndarray
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


class DelayedRecallEnv:
    """Remember a code across a distractor phase, then choose the matching door.

    Observation (length ``n_codes + 4``): code one-hot (phase 1 only), apple
    flag (phase 2), and a one-hot phase indicator. Actions: 0 = pick,
    1 = move, 2 + i = choose door i. Choosing any door in phase 3 ends the
    episode; only the door matching the code pays ``bonus``.
    """

    def __init__(self, n_codes: int = 4, phase_lengths=(5, 60, 5), apple_prob: float = 0.3,
                 bonus: float = 10.0, apple_reward: float = 1.0, reward_scale: float = 1.0):
        t1, t2, t3 = (int(v) for v in phase_lengths)
        if n_codes < 2 or t1 < 1 or t2 < 0 or t3 < 1:
            raise ConfigError(f"bad DelayedRecall config n_codes={n_codes}, phases={phase_lengths}")
        if not 0.0 <= apple_prob <= 1.0:
            raise ConfigError("apple_prob must be in [0, 1]")
        self.n_codes = n_codes
        self.phase_lengths = (t1, t2, t3)
        self.apple_prob = apple_prob
        self.bonus = bonus
        self.apple_reward = apple_reward
        self.reward_scale = reward_scale
        self.code = -1
        self.apples = np.zeros(t2, dtype=bool)
        self.t = 0
        self.done = True
        self.success = False

    @property
    def horizon(self) -> int:
        return sum(self.phase_lengths)

    @property
    def obs_dim(self) -> int:
        return self.n_codes + 4

    @property
    def n_actions(self) -> int:
        return 2 + self.n_codes

    def phase(self, t: int | None = None) -> int:
        t = self.t if t is None else t
        t1, t2, _ = self.phase_lengths
        return 1 if t < t1 else 2 if t < t1 + t2 else 3

    def _obs(self) -> np.ndarray:
        o = np.zeros(self.obs_dim)
        if self.done:
            return o
        ph = self.phase()
        if ph == 1:
            o[self.code] = 1.0
        elif ph == 2:
            o[self.n_codes] = float(self.apples[self.t - self.phase_lengths[0]])
        o[self.n_codes + ph] = 1.0
        return o

    def reset(self, seed: "int | np.random.Generator | None" = None) -> Transition:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.code = int(rng.integers(0, self.n_codes))
        self.apples = rng.random(self.phase_lengths[1]) < self.apple_prob
        self.t = 0
        self.done = False
        self.success = False
        return Transition(self._obs(), 0.0, False, {"phase": 1})

    def step(self, action: int) -> Transition:
        if self.done:
            raise ProtocolError("step() called on a finished episode; call reset()")
        action = int(action)
        if not 0 <= action < self.n_actions:
            raise ConfigError(f"action {action} outside [0, {self.n_actions})")
        ph = self.phase()
        reward = 0.0
        end = False
        if ph == 2 and action == PICK:
            i = self.t - self.phase_lengths[0]
            if self.apples[i]:
                reward = self.apple_reward
                self.apples[i] = False
        elif ph == 3 and action >= 2:
            end = True
            self.success = (action - 2) == self.code
            reward = self.bonus if self.success else 0.0
        self.t += 1
        self.done = end or self.t >= self.horizon
        info = {"phase": ph}
        if self.done:
            info["success"] = self.success
        return Transition(self._obs(), reward * self.reward_scale, self.done, info)

    def apples_left(self) -> int:
        return int(self.apples.sum())

    def optimal_return(self) -> float:
        """Return of a policy that knows the code: every remaining apple plus the bonus."""
        if self.code < 0:
            raise ProtocolError("reset() the environment first")
        return (self.bonus + self.apple_reward * self.apples_left()) * self.reward_scale

    def oracle_action(self) -> int:
        ph = self.phase()
        if ph == 3:
            return 2 + self.code
        if ph == 2 and self.apples[self.t - self.phase_lengths[0]]:
            return PICK
        return MOVE


class RepeatPrevEnv:
    """Output the symbol observed ``lag`` steps ago; +-1/T per scored step."""

    def __init__(self, n_symbols: int = 4, lag: int = 4, horizon: int = 32, reward_scale: float = 1.0):
        if n_symbols < 2 or lag < 0 or horizon < 1:
            raise ConfigError("bad RepeatPrev config")
        self.n_symbols = n_symbols
        self.reward_scale = reward_scale
        self.lag = lag
        self.T = horizon
        self.symbols = np.zeros(horizon, dtype=int)
        self.t = 0
        self.done = True

    @property
    def horizon(self) -> int:
        return self.T

    @property
    def obs_dim(self) -> int:
        return self.n_symbols

    @property
    def n_actions(self) -> int:
        return self.n_symbols

    def _obs(self) -> np.ndarray:
        o = np.zeros(self.n_symbols)
        if not self.done:
            o[self.symbols[self.t]] = 1.0
        return o

    def reset(self, seed: "int | np.random.Generator | None" = None) -> Transition:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.symbols = rng.integers(0, self.n_symbols, size=self.T)
        self.t = 0
        self.done = False
        return Transition(self._obs(), 0.0, False, {"phase": 0})

    def target(self, t: int | None = None) -> int | None:
        t = self.t if t is None else t
        return int(self.symbols[t - self.lag]) if t >= self.lag else None

    def step(self, action: int) -> Transition:
        if self.done:
            raise ProtocolError("step() called on a finished episode; call reset()")
        target = self.target()
        reward = 0.0 if target is None else (1.0 if int(action) == target else -1.0) / self.T
        self.t += 1
        self.done = self.t >= self.T
        return Transition(self._obs(), reward * self.reward_scale, self.done, {"phase": 0})

    def optimal_return(self) -> float:
        return (self.T - self.lag) / self.T * self.reward_scale

    def oracle_action(self) -> int:
        target = self.target()
        return 0 if target is None else target


def make_env(name: str, **kwargs):
    name = name.lower().replace("-", "_")
    if name in ("delayed_recall", "visual_match"):
        return DelayedRecallEnv(**kwargs)
    if name in ("repeat_prev", "repeat_previous"):
        return RepeatPrevEnv(**kwargs)
    raise ConfigError(f"unknown environment {name!r}")


# --- supervised sequences --------------------------------------------------------

@dataclass
class SequenceDataset:
    """Contexts ``xs`` (N, T, D) with integer targets ``labels`` (N, T); -1 = no target."""

    xs: np.ndarray
    labels: np.ndarray
    n_classes: int
    task: str

    def __len__(self) -> int:
        return self.xs.shape[0]

    @property
    def T(self) -> int:
        return self.xs.shape[1]

    @property
    def D(self) -> int:
        return self.xs.shape[2]

    def split(self, n_first: int) -> tuple["SequenceDataset", "SequenceDataset"]:
        a = SequenceDataset(self.xs[:n_first], self.labels[:n_first], self.n_classes, self.task)
        b = SequenceDataset(self.xs[n_first:], self.labels[n_first:], self.n_classes, self.task)
        return a, b


def _balanced_labels(rng, n: int, k: int) -> np.ndarray:
    lab = np.arange(n) % k
    rng.shuffle(lab)
    return lab


def delayed_recall_dataset(n: int, T: int, n_codes: int = 4, n_distractors: int = 8,
                           overwrite_prob: float = 0.0, seed: int = 0) -> SequenceDataset:
    """Code at step 0, random distractor symbols, query at the last step.

    Feature layout: code one-hot | code flag | distractor one-hot | query flag.
    With ``overwrite_prob`` > 0, each middle step instead shows a fresh code
    with that probability and the target is the most recent code; an additive
    memory cannot tell old codes from the newest one. Final codes are
    class-balanced.
    """
    if T < 2:
        raise ConfigError("delayed recall needs T >= 2 (code step and query step)")
    rng = np.random.default_rng(seed)
    D = n_codes + 1 + n_distractors + 1
    xs = np.zeros((n, T, D))
    labels = np.full((n, T), -1, dtype=int)
    final = _balanced_labels(rng, n, n_codes)
    mid = T - 2
    dis = rng.integers(0, n_distractors, size=(n, mid))
    xs[:, 1:T - 1, :][np.arange(n)[:, None], np.arange(mid)[None, :], n_codes + 1 + dis] = 1.0
    over = rng.random((n, mid)) < overwrite_prob
    for i in range(n):
        events = [0] + [1 + j for j in np.nonzero(over[i])[0]]
        codes = list(rng.integers(0, n_codes, size=len(events) - 1)) + [final[i]]
        for t, c in zip(events, codes):
            xs[i, t, :] = 0.0
            xs[i, t, c] = 1.0
            xs[i, t, n_codes] = 1.0
    xs[:, T - 1, -1] = 1.0
    labels[:, T - 1] = final
    return SequenceDataset(xs, labels, n_codes, "delayed_recall")


def repeat_prev_dataset(n: int, T: int, n_symbols: int = 4, lag: int = 0, seed: int = 0) -> SequenceDataset:
    """One-hot symbol streams; the target at step t is the symbol at t - lag."""
    if lag < 0 or T < 1:
        raise ConfigError("repeat_prev needs lag >= 0 and T >= 1")
    rng = np.random.default_rng(seed)
    sym = rng.integers(0, n_symbols, size=(n, T))
    if T == 1 or lag == 0:
        # keep the scored symbols class-balanced along with the rest
        sym[:, 0] = _balanced_labels(rng, n, n_symbols)
    xs = np.eye(n_symbols)[sym]
    labels = np.full((n, T), -1, dtype=int)
    labels[:, lag:] = sym[:, : T - lag]
    return SequenceDataset(xs, labels, n_symbols, "repeat_prev")


def make_supervised_dataset(task: str, n: int, T: int, seed: int = 0, **kwargs) -> SequenceDataset:
    task = task.lower().replace("-", "_")
    if task == "delayed_recall":
        return delayed_recall_dataset(n, T, seed=seed, **kwargs)
    if task == "repeat_prev":
        return repeat_prev_dataset(n, T, seed=seed, **kwargs)
    raise ConfigError(f"unknown supervised task {task!r}")
