"""Cumulative-product curves for every calibration variant, written as CSV."""
import sys
from pathlib import Path

from shm import diagnostics as diag


def main(out: str = "runs/vanishing") -> None:
    stats = [diag.cumulative_product_curve(v, episodes=100, T=100, seed=0) for v in diag.CURVE_VARIANTS]
    path = diag.write_cumprod_csv(Path(out) / "cumprod_curve.csv", stats)
    for st in stats:
        print(f"{st.variant.slug:18s} step 10 {st.mean_below_one[9]:.3e}  step 100 {st.mean_below_one[-1]:.3e}")
    print(f"wrote {path}")


if __name__ == "__main__":
    main(*sys.argv[1:2])
