"""Repeated measurement of the 10^6-digit / 10^4-digit pretokenize time ratio."""

import argparse

import numpy as np

from moelab.checks import digit_scaling_ratio


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=10)
    args = ap.parse_args()
    ratios = np.array([digit_scaling_ratio() for _ in range(args.repeats)])
    print("ratios:", " ".join(f"{r:.1f}" for r in ratios))
    print(f"median {np.median(ratios):.1f}  min {ratios.min():.1f}  max {ratios.max():.1f}  <=100: {np.mean(ratios <= 100):.0%}")


if __name__ == "__main__":
    main()
