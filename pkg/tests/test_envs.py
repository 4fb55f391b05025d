import copy
import itertools

import numpy as np
import pytest

from shm.envs import DelayedRecallEnv, RepeatPrevEnv, delayed_recall_dataset, make_env, make_supervised_dataset
from shm.errors import ConfigError, ProtocolError


def _run(env, actions):
    total, tr = 0.0, None
    for a in actions:
        tr = env.step(a)
        total += tr.reward
        if tr.done:
            break
    return total, tr


def test_same_seed_same_code():
    a, b = DelayedRecallEnv(), DelayedRecallEnv()
    a.reset(5)
    b.reset(5)
    assert a.code == b.code and np.array_equal(a.apples, b.apples)


def test_code_uniform():
    env = DelayedRecallEnv(n_codes=4)
    codes = np.array([(env.reset(s), env.code)[1] for s in range(8000)])
    counts = np.bincount(codes, minlength=4)
    se = np.sqrt(8000 * 0.25 * 0.75)
    assert np.all(np.abs(counts - 2000) <= 3 * se)


def test_observation_dimension_constant():
    env = DelayedRecallEnv(n_codes=3, phase_lengths=(2, 4, 3))
    tr = env.reset(0)
    dims = {tr.obs.shape}
    while not tr.done:
        tr = env.step(1)
        dims.add(tr.obs.shape)
    assert dims == {(3 + 4,)}


def test_rewards_follow_phase_rules():
    env = DelayedRecallEnv(n_codes=4, phase_lengths=(1, 3, 2), apple_prob=1.0)
    env.reset(0)
    assert env.step(0).reward == 0.0          # pick in phase 1 pays nothing
    tr = env.step(0)
    assert tr.reward == 1.0 and tr.info["phase"] == 2
    env.step(1)
    env.step(1)
    tr = env.step(2 + env.code)
    assert tr.reward == 10.0 and tr.done and tr.info["success"]
    with pytest.raises(ProtocolError):
        env.step(1)


def test_wrong_door_ends_without_bonus():
    env = DelayedRecallEnv(n_codes=4, phase_lengths=(1, 0, 2))
    env.reset(1)
    env.step(1)
    tr = env.step(2 + (env.code + 1) % 4)
    assert tr.done and tr.reward == 0.0 and not tr.info["success"]


def test_reward_scale_option():
    env = DelayedRecallEnv(phase_lengths=(1, 0, 1), reward_scale=0.1)
    env.reset(0)
    env.step(1)
    assert env.step(2 + env.code).reward == pytest.approx(1.0)


def test_optimal_return():
    env = DelayedRecallEnv(phase_lengths=(2, 0, 2), apple_prob=0.0)
    env.reset(0)
    assert env.optimal_return() == 10.0
    env = DelayedRecallEnv(phase_lengths=(2, 30, 2), apple_prob=0.4)
    env.reset(3)
    want = 10.0 + env.apples_left()
    total, tr = _run(env, iter(lambda: env.oracle_action(), None))
    assert total == want and tr.info["success"]


def test_markov_hiding():
    """Phase 2/3 observations carry no trace of the code: they match across codes."""
    for seed in range(50):
        seen = []
        for code in range(4):
            env = DelayedRecallEnv(n_codes=4, phase_lengths=(2, 6, 3))
            env.reset(seed)
            env.code = code
            obs = []
            tr = None
            for _ in range(env.horizon):
                ph = env.phase()
                tr = env.step(1)
                if ph >= 2 and not tr.done:
                    obs.append(tr.obs)
            seen.append(np.array(obs))
        for other in seen[1:]:
            np.testing.assert_array_equal(other, seen[0])


def test_return_bounds():
    r = np.random.default_rng(0)
    env = DelayedRecallEnv(phase_lengths=(2, 10, 2), apple_prob=0.5)
    for s in range(200):
        env.reset(s)
        apples = env.apples_left()
        total, _ = _run(env, r.integers(0, env.n_actions, size=env.horizon))
        assert 0 <= total <= 10 + apples
    rp = RepeatPrevEnv(4, 4, 16)
    for s in range(200):
        rp.reset(s)
        total, _ = _run(rp, r.integers(0, 4, size=16))
        assert -1 <= total <= 1


def test_repeat_prev_rules():
    env = RepeatPrevEnv(n_symbols=4, lag=2, horizon=6)
    env.reset(0)
    assert env.step(0).reward == 0.0 and env.step(0).reward == 0.0   # t < lag scores 0
    tr = env.step(env.target())
    assert tr.reward == pytest.approx(1 / 6)
    assert env.step((env.target() + 1) % 4).reward == pytest.approx(-1 / 6)
    env.reset(3)
    total, tr = _run(env, iter(lambda: env.oracle_action(), None))
    assert total == pytest.approx(env.optimal_return()) == pytest.approx(4 / 6)


def test_determinism_given_actions():
    env1, env2 = DelayedRecallEnv(), DelayedRecallEnv()
    env1.reset(11)
    env2.reset(11)
    acts = np.random.default_rng(0).integers(0, env1.n_actions, size=env1.horizon)
    for a in acts:
        t1, t2 = env1.step(a), env2.step(a)
        assert np.array_equal(t1.obs, t2.obs) and t1.reward == t2.reward
        if t1.done:
            break


def test_bad_configs():
    with pytest.raises(ConfigError):
        DelayedRecallEnv(n_codes=1)
    with pytest.raises(ConfigError):
        make_env("pong")
    with pytest.raises(ConfigError):
        make_supervised_dataset("pong", 4, 4)


def test_enumeration_small_env_exact_success():
    """Exact success probability of a uniform policy, by enumerating every action path."""
    env = DelayedRecallEnv(n_codes=2, phase_lengths=(1, 1, 2), apple_prob=0.5)

    def walk(e, prob):
        if e.done:
            return prob * e.success
        total = 0.0
        for a in range(e.n_actions):
            c = copy.deepcopy(e)
            c.step(a)
            total += walk(c, prob / e.n_actions)
        return total

    env.reset(0)
    p = 0.0
    for code, apple in itertools.product(range(2), (False, True)):
        env.code, env.apples, env.t, env.done, env.success = code, np.array([apple]), 0, False, False
        p += walk(env, 1.0) / 4
    # two door-choice steps out of four actions: 1/4 + (2/4)(1/4)
    assert p == pytest.approx(0.375, abs=1e-15)


# --- datasets ----------------------------------------------------------------------

def test_dataset_deterministic_and_balanced():
    a = delayed_recall_dataset(400, 12, seed=3)
    b = delayed_recall_dataset(400, 12, seed=3)
    np.testing.assert_array_equal(a.xs, b.xs)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert np.all(a.labels[:, :-1] == -1)
    counts = np.bincount(a.labels[:, -1], minlength=4)
    assert np.all(counts == 100)


def test_delayed_recall_target_is_latest_code():
    d = delayed_recall_dataset(300, 30, n_codes=4, overwrite_prob=0.2, seed=1)
    flags = d.xs[:, :, 4] == 1
    for i in range(300):
        last = np.nonzero(flags[i])[0][-1]
        assert d.labels[i, -1] == int(np.argmax(d.xs[i, last, :4]))
    assert flags.sum(axis=1).max() > 1


def test_repeat_prev_identity_and_uniformity():
    d = make_supervised_dataset("repeat_prev", 4000, 1, seed=0, n_symbols=4, lag=0)
    np.testing.assert_array_equal(d.labels[:, 0], d.xs[:, 0].argmax(axis=1))
    counts = np.bincount(d.labels[:, 0], minlength=4)
    assert np.all(np.abs(counts - 1000) <= 3 * np.sqrt(4000 * 0.25 * 0.75))
    lagged = make_supervised_dataset("repeat_prev", 10, 8, seed=0, n_symbols=4, lag=3)
    np.testing.assert_array_equal(lagged.labels[:, 3:], lagged.xs[:, :5].argmax(axis=2))
