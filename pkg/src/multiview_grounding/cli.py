"""Command-line entry points: gen-data, train, eval, invariance, ablate.

Every subcommand accepts ``--config <json>``, ``--seed``, and ``--out
<dir>``; metrics go to stdout as a table and, when ``--out`` is given, to
CSV/JSON files. Exit code is 0 on success and 1 on error with a message on
stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .harness import (Metrics, TrainConfig, ablate, ablation_csv,
                      check_vocabulary, evaluate_model, invariance_check,
                      load_model, train)
from .scenes import DatasetConfig, build_dataset, load_dataset, save_dataset


def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


def _metrics_table(metrics: Metrics) -> str:
    header = f"{'split':<12} {'accuracy':>9} {'samples':>8}"
    rows = [header, "-" * len(header)]
    pairs = (
        ("overall", metrics.overall, metrics.counts["total"]),
        ("easy", metrics.easy, metrics.counts["easy"]),
        ("hard", metrics.hard, metrics.counts["hard"]),
        ("view-dep", metrics.view_dep, metrics.counts["view_dep"]),
        ("view-indep", metrics.view_indep, metrics.counts["view_indep"]),
    )
    for name, acc, count in pairs:
        rows.append(f"{name:<12} {acc:>9.4f} {count:>8d}")
    return "\n".join(rows)


def cmd_gen_data(args) -> int:
    config = DatasetConfig.from_dict(_load_json(args.config)) if args.config else DatasetConfig()
    seed = args.seed if args.seed is not None else 0
    out = args.out or "data"
    splits = build_dataset(config, seed)
    save_dataset(splits, out, config, seed)
    for name, split in splits.items():
        counts = split.tag_counts()
        print(f"{name}: {len(split)} samples "
              f"(easy {counts['easy']}, hard {counts['hard']}, "
              f"view-dep {counts['dep']}, view-indep {counts['indep']})")
    print(f"wrote dataset to {out}/")
    return 0


def _train_once(config: TrainConfig):
    result = train(config)
    print(_metrics_table(result.best_metrics))
    if result.checkpoint_path:
        print(f"best checkpoint (epoch {result.best_epoch}) at {result.checkpoint_path}")
    return result


def cmd_train(args) -> int:
    config = TrainConfig.from_dict(_load_json(args.config)) if args.config else TrainConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.data:
        config.data_dir = args.data
    if args.out:
        config.out_dir = args.out
    if args.repeats <= 1:
        _train_once(config)
        return 0
    accuracies = []
    for i in range(args.repeats):
        run = TrainConfig.from_dict(config.to_dict())
        run.seed = config.seed + i
        if config.out_dir:
            run.out_dir = os.path.join(config.out_dir, f"run-{i}")
        print(f"--- repeat {i} (seed {run.seed}) ---")
        result = _train_once(run)
        accuracies.append(result.best_metrics.overall)
    mean, std = float(np.mean(accuracies)), float(np.std(accuracies))
    print(f"overall accuracy over {args.repeats} runs: {mean:.4f} +/- {std:.4f}")
    return 0


def _option(args, options, name, default=None):
    value = getattr(args, name.replace("-", "_"), None)
    if value not in (None, [], False):
        return value
    return options.get(name.replace("-", "_"), default)


def cmd_eval(args) -> int:
    options = _load_json(args.config) if args.config else {}
    checkpoint = _option(args, options, "checkpoint")
    data = _option(args, options, "data")
    if not checkpoint or not data:
        raise ValueError("eval needs --checkpoint and --data (flags or config keys)")
    params, model_config, meta = load_model(checkpoint)
    splits, metadata = load_dataset(data)
    check_vocabulary(params, metadata)
    samples = splits[_option(args, options, "split", "eval")].samples
    view_set = _option(args, options, "views")
    metrics = evaluate_model(params, model_config, samples, view_set=view_set)
    print(_metrics_table(metrics))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "eval_metrics.json")
        with open(path, "w") as fh:
            json.dump({**metrics.as_row(), "counts": metrics.counts,
                       "losses": metrics.losses}, fh, indent=2)
        print(f"wrote {path}")
    return 0


def cmd_invariance(args) -> int:
    options = _load_json(args.config) if args.config else {}
    checkpoint = _option(args, options, "checkpoint")
    data = _option(args, options, "data")
    if not checkpoint or not data:
        raise ValueError("invariance needs --checkpoint and --data (flags or config keys)")
    params, model_config, meta = load_model(checkpoint)
    splits, metadata = load_dataset(data)
    check_vocabulary(params, metadata)
    samples = splits[_option(args, options, "split", "eval")].samples
    report = invariance_check(params, model_config, samples,
                              off_grid_angles=_option(args, options, "off_grid", []),
                              limit=_option(args, options, "limit"))
    if report.get("skipped"):
        print(f"invariance check skipped: {report['reason']}")
    else:
        print(f"checked {report['n_samples']} samples, rotations {report['rotations']}")
        for k, stats in report["per_rotation"].items():
            print(f"  k={k}: max {stats['max']:.3e}  mean {stats['mean']:.3e}")
        for angle, stats in report.get("off_grid", {}).items():
            print(f"  off-grid {angle}: max {stats['max']:.3e} (no pass requirement)")
        print(f"max deviation {report['max_deviation']:.3e} "
              f"(tolerance {report['tolerance']:.0e}): "
              + ("PASS" if report["passed"] else "FAIL"))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "invariance.json")
        with open(path, "w") as fh:
            json.dump(report, fh, indent=2)
        print(f"wrote {path}")
    if report.get("skipped"):
        return 0
    return 0 if report["passed"] else 1


def cmd_ablate(args) -> int:
    spec = _load_json(args.config)
    base = TrainConfig.from_dict(spec.get("base", {}))
    if args.seed is not None:
        base.seed = args.seed
    if args.data:
        base.data_dir = args.data
    rows = ablate(base, spec.get("grid", {}))
    csv_text = ablation_csv(rows)
    print(csv_text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "ablation.csv")
        with open(path, "w") as fh:
            fh.write(csv_text)
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvground",
        description="multi-view 3D visual grounding on synthetic scenes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", help="dataset config JSON")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="output directory (default: data)")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a grounding model")
    p.add_argument("--config", help="train config JSON")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="output directory for checkpoint and metrics")
    p.add_argument("--data", help="dataset directory (overrides config)")
    p.add_argument("--repeats", type=int, default=1,
                   help="repeat training with consecutive seeds and report mean/std")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--config", help="JSON with checkpoint/data/split/views keys")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split", default="eval")
    p.add_argument("--views", type=int, default=None,
                   help="override the view count at test time")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("invariance", help="check view-rotation invariance")
    p.add_argument("--config", help="JSON with checkpoint/data/split/limit keys")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split", default="eval")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--off-grid", type=float, nargs="*", default=[],
                   help="additional rotation angles reported without a pass bar")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_invariance)

    p = sub.add_parser("ablate", help="train a grid of configurations")
    p.add_argument("--config", required=True,
                   help='JSON {"base": train config, "grid": {axis: [values]}}')
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--data", help="dataset directory (overrides config)")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # surface a clean message, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
