"""Run the factorial simulation grid and write long-format results.

    python scripts/run_grid.py --out results/grid.csv --reps 1000 --threads 4
    python scripts/run_grid.py --quick        # a 12-cell subset at R = 200
"""

import argparse
import time
from pathlib import Path

from stratma.simulation import GridConfig, run_grid


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", default="results/grid.csv")
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--quick", action="store_true")
    args = p.parse_args()

    if args.quick:
        grid = GridConfig(bias=("none", "large"), variance=("homogeneous", "extreme_contrast"), r2=(0.4,),
                          strata=("balanced_exact",), h=(0.1, 0.3, 0.5), reps=min(args.reps, 200), seed=args.seed)
    else:
        grid = GridConfig(reps=args.reps, seed=args.seed)
    t = time.perf_counter()
    df = run_grid(grid, threads=args.threads)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(out, index=False)
    print(f"{len(grid.cells())} cells in {time.perf_counter() - t:.0f}s -> {out}")

    ok = df[df["error"] == ""]
    view = ok[ok["estimator"].isin(["ma_strat_prop", "ma_strat_opt"])]
    print(view.groupby(["bias_pattern", "variance_pattern", "estimator"])["var_reduction_vs_srs"].mean().unstack().round(1).to_string())


if __name__ == "__main__":
    main()
