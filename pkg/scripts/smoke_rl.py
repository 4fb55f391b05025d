"""Actor-critic + SHM on DelayedRecall (5, 20, 5); held-out greedy success per seed."""
import sys

from shm.envs import DelayedRecallEnv
from shm.trainer import MemoryPolicy, RandomPolicy, TrainConfig, evaluate, train_policy_gradient


def main(seeds=(0, 1, 2)) -> None:
    env = DelayedRecallEnv(n_codes=4, phase_lengths=(5, 20, 5))
    for seed in seeds:
        cfg = TrainConfig(phase_lengths=(5, 20, 5), episodes=50_000, batch_size=32, lr=3e-3,
                          eval_every=10, eval_episodes=100, target_success=0.95, seed=seed)
        rep = train_policy_gradient(cfg, log=print)
        ev = evaluate(MemoryPolicy(rep.params, rep.heads), env, 500, seed=10_000 + seed)
        print(f"seed {seed}: held-out success {ev.success_rate:.3f} +- {ev.success_se:.3f}")
    base = evaluate(RandomPolicy(env.n_actions), env, 1000, seed=99)
    print(f"random policy: success {base.success_rate:.3f} +- {base.success_se:.3f}")


if __name__ == "__main__":
    main(tuple(int(s) for s in sys.argv[1:]) or (0, 1, 2))
