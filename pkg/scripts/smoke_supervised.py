"""Supervised recall: SHM against AllOnes at the criterion-8 budget."""
import sys

from shm.trainer import TrainConfig, train_supervised

BUDGET = dict(epochs=20, n_train=1024, n_eval=256, batch_size=32, lr=3e-3, eval_every=5, overwrite_prob=0.05)


def main(seed: int = 0) -> None:
    for variant, H, T in (("shm", 16, 70), ("shm", 8, 200), ("all_ones", 8, 200)):
        rep = train_supervised(TrainConfig(variant=variant, H=H, T=T, seed=seed, **BUDGET))
        print(f"{variant:9s} H={H:3d} T={T:4d}  accuracy {rep.last('accuracy'):.3f}  "
              f"clip events {rep.clip_events}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
