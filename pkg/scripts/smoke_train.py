"""Tiny-preset smoke training with a z-loss weight sweep.

Reports loss, post-warmup MaxVio and mean |logsumexp| over the second half of
training for each z-loss weight, to see whether the penalty bends the
logsumexp trajectory at this scale.
"""

import argparse

from moelab.checks import smoke_run, smoke_summary


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--z", default="0,1e-6,1e-2", help="comma list of z-loss weights")
    args = ap.parse_args()

    print(f"{'z':>7s} {'loss first':>10s} {'loss last':>9s} {'MaxVio>50':>9s} {'lse Q3':>7s} {'lse Q4':>7s}")
    for z in (float(v) for v in args.z.split(",")):
        s = smoke_summary(smoke_run(seed=args.seed, steps=args.steps, z_loss_weight=z))
        print(
            f"{z:7.0e} {s['loss_first']:10.3f} {s['loss_last']:9.3f} {s['max_vio_after_50']:9.3f} "
            f"{s['lse_mean_third_quarter']:7.3f} {s['lse_mean_last_quarter']:7.3f}"
        )


if __name__ == "__main__":
    main()
