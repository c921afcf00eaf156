"""MDES against coding fraction for a synthetic planning design, SRS vs stratified."""

import argparse

from stratma.power import SRS, STRATIFIED, ArmDesign, PowerDesign, mdes_curve


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--arm-size", type=int, default=2500)
    p.add_argument("--target", type=float, default=0.15, help="report the smallest h reaching this MDES")
    args = p.parse_args()

    K = 4
    arm = ArmDesign(
        size=args.arm_size,
        stratum_sizes=(args.arm_size // K,) * K,
        resid_means=(-0.4, -0.8, -1.2, -1.7),
        resid_vars=(0.4, 0.6, 0.8, 1.0),
        outcome_var=1.5,
    )
    design = PowerDesign({0: arm, 1: arm})
    srs, strat = mdes_curve(design, SRS), mdes_curve(design, STRATIFIED)
    print(f"{'h':>5} {'srs':>8} {'stratified':>10}")
    for (h, a), (_, b) in zip(srs, strat):
        print(f"{h:5.2f} {a:8.4f} {b:10.4f}")
    for name, curve in (("srs", srs), ("stratified", strat)):
        hit = next((h for h, m in curve if m <= args.target), None)
        print(f"{name}: MDES <= {args.target} first at h = {hit}")


if __name__ == "__main__":
    main()
