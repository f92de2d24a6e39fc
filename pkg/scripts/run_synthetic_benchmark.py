#!/usr/bin/env python3
"""Fit the reference detector on a synthetic benchmark and compare it with
every feature-computable baseline.

Usage:
  python scripts/run_synthetic_benchmark.py [--ood-mode mean_shift|scale|shape]
      [--sigma-in S] [--delta D] [--kappa K] [--n-test N] [--seed SEED]
"""

import argparse

from trajod import (
    DetectionReport,
    SynthConfig,
    energy,
    fit_knn_index,
    fit_mahalanobis_penultimate,
    fit_reference,
    fit_trajectory_stats,
    generate,
    knn_score,
    mahalanobis_penultimate_score,
    max_logit,
    msp,
    scaled_trajectories,
    score_set,
    traj_euclidean_score,
    traj_mahalanobis_score,
)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ood-mode", default="mean_shift")
    ap.add_argument("--sigma-in", type=float, default=1.0)
    ap.add_argument("--delta", type=float, default=5.0)
    ap.add_argument("--kappa", type=float, default=1.0)
    ap.add_argument("--n-train", type=int, default=2000)
    ap.add_argument("--n-test", type=int, default=5000)
    ap.add_argument("--seed", type=int, default=20240817)
    ap.add_argument("--subsample", type=float, default=0.01)
    ap.add_argument("--knn-alpha", type=float, default=0.2)
    args = ap.parse_args()

    cfg = SynthConfig(
        seed=args.seed,
        ood_mode=args.ood_mode,
        sigma_in=args.sigma_in,
        delta=args.delta,
        kappa=args.kappa,
        n_train=args.n_train,
        n_test_in=args.n_test,
        n_test_out=args.n_test,
    )
    train, fin, fout = generate(cfg)
    model = fit_reference(train, seed=args.seed + 1, subsample_fraction=args.subsample)
    dataset = f"synth-{args.ood_mode}"

    records = []

    def add(method, s_in, s_out):
        rep = DetectionReport(method=method)
        res = rep.add(dataset, s_in, s_out)
        records.append(res.record(method))

    add("trajectory_projection", score_set(fin, model), score_set(fout, model))
    for name, fn in (("msp", msp), ("max_logit", max_logit), ("energy", energy)):
        add(name, fn(fin.logits), fn(fout.logits))

    st = fit_mahalanobis_penultimate(train)
    add(
        "mahalanobis_penultimate",
        mahalanobis_penultimate_score(fin.features[-2], st),
        mahalanobis_penultimate_score(fout.features[-2], st),
    )
    index = fit_knn_index(train, k=10, alpha=args.knn_alpha, seed=args.seed + 2)
    add("knn", knn_score(fin.features[-2], index), knn_score(fout.features[-2], index))

    stats = fit_trajectory_stats(train, model)
    u_in, u_out = scaled_trajectories(fin, model), scaled_trajectories(fout, model)
    add(
        "traj_euclidean",
        traj_euclidean_score(u_in, stats.mean),
        traj_euclidean_score(u_out, stats.mean),
    )
    add(
        "traj_mahalanobis",
        traj_mahalanobis_score(u_in, stats.mean, stats.cov_inv),
        traj_mahalanobis_score(u_out, stats.mean, stats.cov_inv),
    )

    print(f"# config: {cfg}")
    width = max(len(r["method"]) for r in records)
    print(f"{'method':<{width}}  {'auroc':>8}  {'tnr@95tpr':>10}  {'gamma':>10}")
    for r in records:
        gamma = "-inf" if r["gamma"] is None else f"{r['gamma']:.4f}"
        print(
            f"{r['method']:<{width}}  {r['auroc']:>8.4f}  "
            f"{r['tnr_at_95_tpr']:>10.4f}  {gamma:>10}"
        )


if __name__ == "__main__":
    main()
