"""Resample a coded corpus with monotone surrogate bias and compare designs.

Draws `--repeats` coding samples at each coding fraction and prints the
empirical variance of every estimator.
"""

import argparse

from stratma.simulation import CorpusConfig, generate_corpus, resample_repeats, summarize_repeats


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--N", type=int, default=5000)
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, nargs="+", default=[0.1, 0.3, 0.5])
    args = p.parse_args()

    pop, strata = generate_corpus(CorpusConfig(N=args.N), seed=args.seed)
    for h in args.h:
        budget = {z: int(h * pop.arm_size(z)) for z in pop.arms}
        s = summarize_repeats(resample_repeats(pop, strata, budget, args.repeats, seed=args.seed))
        print(f"h = {h}")
        print(s.to_string(index=False, float_format=lambda v: f"{v:.3e}"))
        print()


if __name__ == "__main__":
    main()
