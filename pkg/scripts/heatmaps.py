"""Memory and calibration heatmaps for one synthetic SHM episode."""
import sys
from pathlib import Path

from shm import diagnostics as diag
from shm.calibration import Variant
from shm.memory import run_sequence
from shm.utils import stream


def main(out: str = "runs/heatmaps", seed: int = 0) -> None:
    params = diag.curve_params(Variant.SHM_RANDOM_THETA, seed=seed)
    rng = stream(seed, "heatmap")
    tr = run_sequence(params, diag.synthetic_contexts(rng, 100, params.D), rng=rng)
    for p in diag.export_heatmaps(tr, [1, 10, 50, 100], Path(out)):
        print(p)


if __name__ == "__main__":
    main(*sys.argv[1:2])
