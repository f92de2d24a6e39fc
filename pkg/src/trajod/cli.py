"""Command-line entry point: fit, score, evaluate, baseline, synth, diagnose.

Exit codes: 0 success, 1 argument/validation error, 2 data-format error.
All randomized commands require an explicit --seed.  TRAJOD_THREADS caps
scoring parallelism; outputs never depend on it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile

import numpy as np

from . import baselines as bl
from . import diagnostics, metrics, synthgen
from . import trajectory as tj
from .feature_store import FormatError, load_feature_set
from .model_io import load_reference_model, save_reference_model

SECTION_PREFIX = "baseline/"


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage by default; the CLI contract reserves 2
    # for data-format errors.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _n_threads() -> int:
    try:
        return max(1, int(os.environ.get("TRAJOD_THREADS", "1")))
    except ValueError:
        return 1


def _write_text_atomic(path: str, content: str) -> None:
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(content)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dataset_name(path: str, override: str | None) -> str:
    if override:
        return override
    base = os.path.basename(path)
    return base[:-4] if base.endswith(".ftx") else base


def cmd_synth(args) -> int:
    values = {}
    if args.config:
        with open(args.config) as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ValueError(f"--config line is not key=value: {line!r}")
                key, val = line.split("=", 1)
                values[key.strip().replace("-", "_")] = val.strip()

    def pick(name, flag, conv):
        if flag is not None:
            return flag
        if name in values:
            return conv(values[name])
        return None

    ints = lambda s: tuple(int(x) for x in str(s).split(",") if x != "")
    overrides = {
        "n_classes": pick("n_classes", args.n_classes, int),
        "layer_dims": pick("layer_dims", ints(args.layer_dims) if args.layer_dims else None, ints),
        "n_train": pick("n_train", args.n_train, int),
        "n_test_in": pick("n_test_in", args.n_test_in, int),
        "n_test_out": pick("n_test_out", args.n_test_out, int),
        "class_mean_scale": pick("class_mean_scale", args.class_mean_scale, float),
        "sigma_in": pick("sigma_in", args.sigma_in, float),
        "ood_mode": pick("ood_mode", args.ood_mode, str),
        "delta": pick("delta", args.delta, float),
        "kappa": pick("kappa", args.kappa, float),
        "permute_layers": pick(
            "permute_layers",
            ints(args.permute_layers) if args.permute_layers else None,
            ints,
        ),
        "logit_margin": pick("logit_margin", args.logit_margin, float),
        "logit_noise_std": pick("logit_noise_std", args.logit_noise_std, float),
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    cfg = synthgen.SynthConfig(seed=args.seed, **overrides)
    paths = synthgen.generate_to_files(cfg, args.out_prefix)
    for p in paths:
        print(p)
    return 0


def _fit_baseline_sections(model, train, kinds, args) -> dict[str, bytes]:
    sections = {}
    for kind in kinds:
        if kind == "mahalanobis_penultimate":
            state = bl.fit_mahalanobis_penultimate(train)
        elif kind == "knn":
            state = bl.fit_knn_index(train, k=args.knn_k, alpha=args.knn_alpha, seed=args.seed)
        elif kind == "trajectory":
            state = bl.fit_trajectory_stats(train, model)
        else:
            raise ValueError(f"--with-baselines: unknown state kind {kind!r}")
        sections[SECTION_PREFIX + kind] = state.to_bytes()
    return sections


def cmd_fit(args) -> int:
    train = load_feature_set(args.train)
    model = tj.fit_reference(
        train, kind=args.kind, subsample_fraction=args.subsample, seed=args.seed
    )
    if args.gamma_tpr is not None:
        scores = tj.score_set(train, model, n_threads=_n_threads())
        model = tj.ReferenceModel(
            bank=model.bank,
            scale=model.scale,
            reference=model.reference,
            kind=model.kind,
            cov_invs=model.cov_invs,
            gamma=tj.threshold_at_tpr(scores, args.gamma_tpr),
        )
    sections = {}
    if args.with_baselines:
        kinds = [k.strip() for k in args.with_baselines.split(",") if k.strip()]
        sections = _fit_baseline_sections(model, train, kinds, args)
    save_reference_model(model, args.out, sections)
    print(args.out)
    return 0


def cmd_score(args) -> int:
    model, _ = load_reference_model(args.model)
    data = load_feature_set(args.data)
    scores = tj.score_set(data, model, n_threads=_n_threads())
    payload = json.dumps(
        {
            "model": args.model,
            "data": args.data,
            "n_samples": int(scores.shape[0]),
            "scores": [float(s) for s in scores],
        },
        indent=2,
    ) + "\n"
    if args.out:
        _write_text_atomic(args.out, payload)
        print(args.out)
    else:
        sys.stdout.write(payload)
    return 0


def _emit_report(report, args) -> None:
    text = report.to_text()
    if args.json:
        _write_text_atomic(args.json, report.to_json())
    if args.text:
        _write_text_atomic(args.text, text)
    sys.stdout.write(text)


def cmd_evaluate(args) -> int:
    model, _ = load_reference_model(args.model)
    fs_in = load_feature_set(args.in_path)
    fs_out = load_feature_set(args.out_data)
    threads = _n_threads()
    in_scores = tj.score_set(fs_in, model, n_threads=threads)
    out_scores = tj.score_set(fs_out, model, n_threads=threads)
    report = metrics.DetectionReport(method=args.method_name)
    report.add(
        _dataset_name(args.out_data, args.dataset_name),
        in_scores,
        out_scores,
        tpr=args.tpr,
    )
    _emit_report(report, args)
    return 0


def _baseline_scores(kind, args, threads):
    """Returns (in_scores, out_scores, model, sections).

    Fitted state comes from the model file's tagged section when present,
    otherwise it is fitted from --train; freshly fitted state is placed
    into `sections` so --save-state can persist it.
    """
    fs_in = load_feature_set(args.in_path)
    fs_out = load_feature_set(args.out_data)

    model, sections = None, {}
    if args.model:
        model, sections = load_reference_model(args.model)

    if kind in bl.LOGIT_KINDS:
        fn = {"msp": bl.msp, "max_logit": bl.max_logit, "energy": bl.energy}[kind]
        return fn(fs_in.logits), fn(fs_out.logits), model, sections

    if kind == "mahalanobis_penultimate":
        blob = sections.get(SECTION_PREFIX + "mahalanobis_penultimate")
        if blob is not None:
            state = bl.MahalanobisState.from_bytes(blob)
        elif args.train:
            state = bl.fit_mahalanobis_penultimate(load_feature_set(args.train))
            sections[SECTION_PREFIX + "mahalanobis_penultimate"] = state.to_bytes()
        else:
            raise ValueError(f"baseline {kind} needs --train or a --model with stored state")
        return (
            bl.mahalanobis_penultimate_score(fs_in.features[-2], state),
            bl.mahalanobis_penultimate_score(fs_out.features[-2], state),
            model,
            sections,
        )

    if kind == "knn":
        blob = sections.get(SECTION_PREFIX + "knn")
        if blob is not None:
            index = bl.KnnIndex.from_bytes(blob)
        elif args.train:
            if args.seed is None:
                raise ValueError("baseline knn needs --seed to fit its index")
            index = bl.fit_knn_index(
                load_feature_set(args.train), k=args.knn_k, alpha=args.knn_alpha, seed=args.seed
            )
            sections[SECTION_PREFIX + "knn"] = index.to_bytes()
        else:
            raise ValueError("baseline knn needs --train or a --model with stored state")
        return (
            bl.knn_score(fs_in.features[-2], index),
            bl.knn_score(fs_out.features[-2], index),
            model,
            sections,
        )

    if kind in bl.TRAJECTORY_KINDS:
        if model is None:
            raise ValueError(f"baseline {kind} needs --model for the fitted reference")
        blob = sections.get(SECTION_PREFIX + "trajectory")
        if blob is not None:
            stats = bl.TrajectoryStats.from_bytes(blob)
        elif args.train:
            stats = bl.fit_trajectory_stats(load_feature_set(args.train), model)
            sections[SECTION_PREFIX + "trajectory"] = stats.to_bytes()
        else:
            raise ValueError(f"baseline {kind} needs --train or a --model with stored state")
        u_in = bl.scaled_trajectories(fs_in, model, threads)
        u_out = bl.scaled_trajectories(fs_out, model, threads)
        if kind == "traj_euclidean":
            scores = (
                bl.traj_euclidean_score(u_in, stats.mean),
                bl.traj_euclidean_score(u_out, stats.mean),
            )
        else:
            scores = (
                bl.traj_mahalanobis_score(u_in, stats.mean, stats.cov_inv),
                bl.traj_mahalanobis_score(u_out, stats.mean, stats.cov_inv),
            )
        return scores[0], scores[1], model, sections

    raise ValueError(f"unknown baseline kind {kind!r}")


def cmd_baseline(args) -> int:
    if args.save_state and not args.model:
        raise ValueError("--save-state requires --model")
    threads = _n_threads()
    in_scores, out_scores, model, sections = _baseline_scores(args.kind, args, threads)
    if args.save_state:
        save_reference_model(model, args.model, sections)
    report = metrics.DetectionReport(method=args.kind)
    report.add(
        _dataset_name(args.out_data, args.dataset_name),
        in_scores,
        out_scores,
        tpr=args.tpr,
    )
    _emit_report(report, args)
    return 0


def cmd_diagnose(args) -> int:
    train = load_feature_set(args.train)
    layer = args.layer if args.layer is not None else max(0, train.n_layers - 2)
    if not 0 <= layer < train.n_layers:
        raise ValueError(f"--layer {layer} out of range")
    bank = tj.fit_prototypes(train)
    cov_invs = (
        tj.fit_shared_covariance_inverses(train, bank) if args.kind == "mahalanobis" else None
    )
    trajs = tj.trajectories(train, bank, args.kind, cov_invs, n_threads=_n_threads())
    corr = diagnostics.layer_score_correlation(trajs)

    feats = train.features[layer].astype(np.float64)
    labels = train.labels
    depth_rows = []
    for y in range(train.n_classes):
        rows = feats[labels == y]
        if rows.shape[0] == 0:
            continue
        points = np.vstack([bank.mu[layer][y][None, :], rows])
        depths = diagnostics.approx_halfspace_depths(
            points, rows, n_directions=args.n_directions, seed=args.seed
        )
        depth_rows.append(
            {
                "class": y,
                "n": int(rows.shape[0]),
                "mean_depth": float(depths[0]),
                "max_sample_depth": float(depths[1:].max()),
            }
        )
    gaps = diagnostics.mean_median_gap(train, layer, args.class_index)
    payload = json.dumps(
        {
            "depth": {
                "layer": train.layer_names[layer],
                "n_directions": args.n_directions,
                "seed": args.seed,
                "classes": depth_rows,
            },
            "mean_median_gap": {
                "layer": train.layer_names[layer],
                "class": args.class_index,
                "gap": [float(g) for g in gaps],
            },
            "correlation": {
                "layers": list(train.layer_names),
                "matrix_row_major": [float(v) for v in corr.ravel()],
            },
        },
        indent=2,
    ) + "\n"
    if args.json:
        _write_text_atomic(args.json, payload)
        print(args.json)
    else:
        sys.stdout.write(payload)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="trajod", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="generate synthetic feature sets")
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--config", help="flat key=value file with SynthConfig fields")
    p.add_argument("--n-classes", type=int)
    p.add_argument("--layer-dims", help="comma-separated hidden dims")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test-in", type=int)
    p.add_argument("--n-test-out", type=int)
    p.add_argument("--class-mean-scale", type=float)
    p.add_argument("--sigma-in", type=float)
    p.add_argument("--ood-mode", choices=synthgen.OOD_MODES)
    p.add_argument("--delta", type=float)
    p.add_argument("--kappa", type=float)
    p.add_argument("--permute-layers", help="comma-separated hidden layer indices")
    p.add_argument("--logit-margin", type=float)
    p.add_argument("--logit-noise-std", type=float)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("fit", help="fit the reference detector")
    p.add_argument("--train", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=tj.KINDS, default="projection")
    p.add_argument("--subsample", type=float, default=0.01)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--gamma-tpr", type=float, help="store a threshold from training scores")
    p.add_argument("--with-baselines", help="comma list: mahalanobis_penultimate,knn,trajectory")
    p.add_argument("--knn-k", type=int, default=10)
    p.add_argument("--knn-alpha", type=float, default=0.01)
    p.set_defaults(fn=cmd_fit)

    p = sub.add_parser("score", help="score one feature set")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="write JSON here instead of stdout")
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("evaluate", help="score in/out sets and report metrics")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out-data", required=True)
    p.add_argument("--json")
    p.add_argument("--text")
    p.add_argument("--tpr", type=float, default=0.95)
    p.add_argument("--dataset-name")
    p.add_argument("--method-name", default="trajectory_projection")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("baseline", help="evaluate a comparison method")
    p.add_argument("--kind", choices=bl.BASELINE_KINDS, required=True)
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out-data", required=True)
    p.add_argument("--train")
    p.add_argument("--model")
    p.add_argument("--json")
    p.add_argument("--text")
    p.add_argument("--tpr", type=float, default=0.95)
    p.add_argument("--seed", type=int)
    p.add_argument("--knn-k", type=int, default=10)
    p.add_argument("--knn-alpha", type=float, default=0.01)
    p.add_argument("--dataset-name")
    p.add_argument("--save-state", action="store_true")
    p.set_defaults(fn=cmd_baseline)

    p = sub.add_parser("diagnose", help="centrality and correlation diagnostics")
    p.add_argument("--train", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-directions", type=int, default=1000)
    p.add_argument("--layer", type=int, help="default: penultimate layer")
    p.add_argument("--class", dest="class_index", type=int, default=0)
    p.add_argument("--kind", choices=tj.KINDS, default="projection")
    p.add_argument("--json")
    p.set_defaults(fn=cmd_diagnose)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except FormatError as exc:
        print(f"trajod: data format error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"trajod: cannot read/write: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"trajod: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())
