"""Balancer comparison on the skewed 16-expert stream, over several seeds.

Prints tail MaxVio and mean per-step |delta b| for SMEBU, sign and no balancing.
"""

import argparse

import numpy as np

from moelab.moe import BalancerSimConfig, simulate_balancer


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--tail", type=int, default=500)
    ap.add_argument("--lam", type=float, default=5e-4)
    args = ap.parse_args()

    print(f"{'balancer':8s} {'seed':>4s} {'MaxVio tail':>12s} {'MaxVio max':>11s} {'mean |db|':>10s}")
    for name in ("smebu", "sign", "none"):
        for seed in range(args.seeds):
            tr = simulate_balancer(BalancerSimConfig(balancer=name, steps=args.steps, lam=args.lam, seed=seed))
            tail = slice(-args.tail, None)
            print(
                f"{name:8s} {seed:4d} {tr.max_vio[tail].mean():12.3f} {tr.max_vio[tail].max():11.3f} "
                f"{np.mean(tr.bias_step[tail]):10.2e}"
            )


if __name__ == "__main__":
    main()
