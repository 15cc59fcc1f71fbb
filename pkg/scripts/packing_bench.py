"""Sequential packing vs RSDB on the reference corpus, plus a document-length sweep.

Short documents already mix within a sequential buffer, so RSDB gains little;
its advantage in mean BatchHet and in the fraction of steps where it is lower
grows with document length. Per-step BatchHet is noisy under both packers, so
a large mean reduction still leaves many steps where sequential packing wins.
"""

import argparse
import json

from moelab.datapipe import CorpusParams, PackingBenchConfig, packing_comparison, write_bench


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--mus", default="3,4,5,6", help="comma list of lognormal mu values to sweep")
    ap.add_argument("--out", help="write the reference run's CSV and summary here")
    args = ap.parse_args()

    reports, summary = packing_comparison(PackingBenchConfig(steps=args.steps, seed=args.seed))
    print("reference:", json.dumps({k: summary[k] for k in ("ratio", "ratio_ci95", "frac_steps_rsdb_lower")}))
    if args.out:
        write_bench(reports, summary, args.out)

    print(f"{'mu':>4s} {'ratio':>7s} {'frac lower':>11s}")
    for mu in (float(m) for m in args.mus.split(",")):
        cfg = PackingBenchConfig(corpus=CorpusParams(length_mu=mu), steps=args.steps, seed=args.seed, bootstrap=200)
        _, s = packing_comparison(cfg)
        print(f"{mu:4.1f} {s['ratio']:7.3f} {s['frac_steps_rsdb_lower']:11.3f}")


if __name__ == "__main__":
    main()
