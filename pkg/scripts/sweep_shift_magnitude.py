#!/usr/bin/env python3
"""AUROC of the trajectory projection as the mean-shift magnitude grows.

Detection difficulty is controlled by delta (the distance class means are
pulled toward the origin) in units of the within-class standard deviation.

Usage:
  python scripts/sweep_shift_magnitude.py [--deltas 0,1,2,5] [--seed SEED]
"""

import argparse

from trajod import SynthConfig, auroc, fit_reference, generate, score_set, tnr_at_tpr


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--deltas", default="0,0.5,1,2,3,5")
    ap.add_argument("--sigma-in", type=float, default=1.0)
    ap.add_argument("--n-train", type=int, default=2000)
    ap.add_argument("--n-test", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=11)
    args = ap.parse_args()

    print(f"{'delta/sigma':>12}  {'auroc':>8}  {'tnr@95tpr':>10}")
    for delta in (float(d) for d in args.deltas.split(",")):
        cfg = SynthConfig(
            seed=args.seed,
            delta=delta * args.sigma_in,
            sigma_in=args.sigma_in,
            n_train=args.n_train,
            n_test_in=args.n_test,
            n_test_out=args.n_test,
        )
        train, fin, fout = generate(cfg)
        model = fit_reference(train, seed=args.seed + 1, subsample_fraction=0.01)
        s_in, s_out = score_set(fin, model), score_set(fout, model)
        tnr, _ = tnr_at_tpr(s_in, s_out)
        print(f"{delta:>12.2f}  {auroc(s_in, s_out):>8.4f}  {tnr:>10.4f}")


if __name__ == "__main__":
    main()
