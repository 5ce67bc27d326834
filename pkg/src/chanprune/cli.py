"""Command-line front end.

One executable, subcommand per workflow step: score channels, dump the FLOSS
table, run the sensitivity analysis, build/apply pruning plans, evaluate
accuracy, sweep uniform prune ratios, and benchmark metric scoring time.
Every command is deterministic given its flags (--seed covers all randomness,
--threads never changes results); outputs are plot-ready CSV or the versioned
JSON schemas, and --check re-reads whatever a command just wrote.

Exit codes: 0 success, 2 usage error (bad flags, missing paths, invalid
values), 3 input-format error (malformed tensor/JSON/CSV content),
4 numeric/solver error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time

import numpy as np

from . import engine, metrics, netgraph, sensitivity, tensorstore
from .metrics import METRIC_NAMES, MetricConfig
from .tensorstore import ActivationSet

ALL_METRICS = METRIC_NAMES + ("random",)


def _add_model_flags(p, weights=True):
    p.add_argument("--arch", required=True, help="architecture JSON")
    if weights:
        p.add_argument("--weights", required=True,
                       help="weights directory or manifest JSON")


def _add_data_flags(p):
    p.add_argument("--data", required=True, help="inputs tensor file [N,C,W,H]")
    p.add_argument("--labels", required=True, help="label file")


def _add_scoring_flags(p):
    p.add_argument("--scoring-data", help="scoring-set tensor (default: --data)")
    p.add_argument("--scoring-labels", help="scoring-set labels (default: --labels)")
    p.add_argument("--samples", type=int, default=None,
                   help="cap on scoring samples (seeded uniform subsample)")


def _add_common_flags(p):
    p.add_argument("--metric", default="gsd", choices=ALL_METRICS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--capture", default="post", choices=("pre", "post"),
                   help="score activations before or after a following relu")
    p.add_argument("--check", action="store_true",
                   help="re-validate every file this command writes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chanprune",
        description="Discriminant channel scoring and FLOP-normalized pruning")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score", help="score channels of named layers to CSV")
    _add_model_flags(p)
    _add_data_flags(p)
    p.add_argument("--layer", action="append", required=True,
                   help="layer id to score (repeatable, comma-separated ok)")
    _add_common_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("floss", help="per-layer single-channel FLOP loss table")
    _add_model_flags(p, weights=False)
    p.add_argument("--alpha", type=float, default=2.0)
    p.add_argument("--out", required=True)
    p.add_argument("--check", action="store_true")
    p.set_defaults(func=cmd_floss)

    p = sub.add_parser("sensitivity", help="FLOP-normalized sensitivity report")
    _add_model_flags(p)
    _add_data_flags(p)
    _add_scoring_flags(p)
    _add_common_flags(p)
    p.add_argument("--alpha", type=float, default=2.0)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--out", required=True, help="report CSV")
    p.add_argument("--json-out", help="JSON report with embedded config")
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("plan", help="run the analysis and emit a pruning plan")
    _add_model_flags(p)
    _add_data_flags(p)
    _add_scoring_flags(p)
    _add_common_flags(p)
    p.add_argument("--alpha", type=float, default=2.0)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--out", required=True, help="plan JSON")
    p.add_argument("--report-out", help="also write the report CSV")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("prune", help="apply a plan to a model")
    _add_model_flags(p)
    p.add_argument("--plan", required=True)
    p.add_argument("--out-arch", required=True)
    p.add_argument("--out-weights", required=True)
    p.add_argument("--check", action="store_true")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("eval", help="top-1 accuracy of a model on a dataset")
    _add_model_flags(p)
    _add_data_flags(p)
    p.add_argument("--out", help="optional one-row CSV")
    p.add_argument("--check", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("uniform-prune",
                       help="remove the lowest-scored r%% of channels everywhere")
    _add_model_flags(p)
    _add_data_flags(p)
    _add_scoring_flags(p)
    _add_common_flags(p)
    p.add_argument("--ratio", required=True,
                   help="percent ratio(s), e.g. 20 or 5,10,15")
    p.add_argument("--out", required=True, help="ratio/accuracy CSV")
    p.add_argument("--out-arch", help="pruned architecture (single ratio only)")
    p.add_argument("--out-weights", help="pruned weights dir (single ratio only)")
    p.set_defaults(func=cmd_uniform_prune)

    p = sub.add_parser("bench", help="wall time of metric scoring per layer")
    p.add_argument("--arch")
    p.add_argument("--weights")
    p.add_argument("--data")
    p.add_argument("--labels")
    p.add_argument("--layer", help="layer to capture when benching a model")
    p.add_argument("--synthetic", action="store_true",
                   help="bench on generated normal activations instead of a model")
    p.add_argument("--samples", type=int, default=3000)
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--spatial", type=int, default=64)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--metric", default="gsd,di",
                   help="comma-separated metrics to time")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--capture", default="post", choices=("pre", "post"))
    p.add_argument("--out", required=True)
    p.add_argument("--check", action="store_true")
    p.set_defaults(func=cmd_bench)

    return parser


def _load_model(args):
    graph = netgraph.load_graph(args.arch)
    weights = engine.load_weights(args.weights)
    engine.validate_weights(graph, weights)
    return graph, weights


def _load_data(args):
    return engine.load_dataset(args.data, args.labels)


def _load_scoring(args):
    if args.scoring_data or args.scoring_labels:
        if not (args.scoring_data and args.scoring_labels):
            raise ValueError("--scoring-data and --scoring-labels go together")
        return engine.load_dataset(args.scoring_data, args.scoring_labels)
    return _load_data(args)


def _run_config(args):
    return sensitivity.RunConfig(alpha=args.alpha, k=args.k, metric=args.metric,
                                 scoring_samples=args.samples, seed=args.seed,
                                 threads=args.threads, capture=args.capture)


def _split_list(value):
    return [item for chunk in value for item in
            (chunk.split(",") if isinstance(chunk, str) else [chunk]) if item]


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def _check_csv(path, header, min_rows=1):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != header:
        raise ValueError(f"{path}: bad header {rows[:1]}")
    if len(rows) - 1 < min_rows:
        raise ValueError(f"{path}: expected at least {min_rows} data rows")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_score(args) -> int:
    graph, weights = _load_model(args)
    dataset = _load_data(args)
    num_classes = graph.out_width(graph.output_id)
    order = {spec.id: i for i, spec in enumerate(graph.layers)}
    all_scores = []
    for layer_id in _split_list(args.layer):
        acts = engine.capture_activations(graph, weights, dataset, layer_id,
                                          mode=args.capture)
        all_scores.extend(metrics.score_layer(
            acts, dataset.labels, num_classes, args.metric, MetricConfig(),
            layer_id=layer_id,
            seed=sensitivity.layer_seed(args.seed, order.get(layer_id, 0)),
            threads=args.threads))
    metrics.write_scores_csv(args.out, all_scores)
    print(f"wrote {len(all_scores)} channel scores to {args.out}")
    if args.check:
        metrics.read_scores_csv(args.out)
    return 0


FLOSS_CSV_HEADER = ["layer_id", "width", "floss", "n_channels"]


def cmd_floss(args) -> int:
    graph = netgraph.load_graph(args.arch)
    table = netgraph.pruning_counts(graph, args.alpha)
    _write_csv(args.out, FLOSS_CSV_HEADER,
               [[e.layer_id, e.width, e.floss, e.n_channels] for e in table.entries])
    print(f"wrote FLOSS table ({len(table.entries)} layers, "
          f"max {table.floss_max}) to {args.out}")
    if args.check:
        _check_csv(args.out, FLOSS_CSV_HEADER)
    return 0


def cmd_sensitivity(args) -> int:
    graph, weights = _load_model(args)
    report = sensitivity.analyze(graph, weights, _load_data(args),
                                 _load_scoring(args), _run_config(args))
    sensitivity.write_report_csv(report, args.out)
    if args.json_out:
        sensitivity.write_report_json(report, args.json_out)
    print(f"baseline accuracy {report.baseline_accuracy:.9g}, "
          f"{len(report.rows)} layers analyzed, "
          f"{len(report.excluded)} excluded (n=0)")
    if args.check:
        sensitivity.read_report_csv(args.out)
    return 0


def cmd_plan(args) -> int:
    graph, weights = _load_model(args)
    cfg = _run_config(args)
    report = sensitivity.analyze(graph, weights, _load_data(args),
                                 _load_scoring(args), cfg)
    plan = sensitivity.select_and_plan(graph, report, cfg)
    netgraph.save_plan(plan, args.out)
    if args.report_out:
        sensitivity.write_report_csv(report, args.report_out)
    print(f"plan prunes {sum(len(e[1]) for e in plan.entries)} channels in "
          f"{len(plan.entries)} layers, expected FLOP delta {plan.expected_flop_delta}")
    if args.check:
        netgraph.load_plan(args.out)
    return 0


def cmd_prune(args) -> int:
    graph, weights = _load_model(args)
    plan = netgraph.load_plan(args.plan)
    pruned_graph, pruned_weights = engine.apply_plan_weights(graph, weights, plan)
    netgraph.save_graph(pruned_graph, args.out_arch)
    engine.save_weights(pruned_weights, args.out_weights)
    delta = netgraph.flop_count(graph) - netgraph.flop_count(pruned_graph)
    print(f"pruned model written; FLOP delta {delta} "
          f"(plan expected {plan.expected_flop_delta})")
    if args.check:
        g = netgraph.load_graph(args.out_arch)
        w = engine.load_weights(args.out_weights)
        engine.validate_weights(g, w)
    return 0


def cmd_eval(args) -> int:
    graph, weights = _load_model(args)
    acc = engine.evaluate_accuracy(graph, weights, _load_data(args))
    print(f"accuracy {acc:.9g}")
    if args.out:
        _write_csv(args.out, ["accuracy"], [[f"{acc:.9g}"]])
        if args.check:
            _check_csv(args.out, ["accuracy"])
    return 0


UNIFORM_CSV_HEADER = ["metric", "ratio", "accuracy", "flops", "params"]


def cmd_uniform_prune(args) -> int:
    ratios = [float(r) for r in _split_list([args.ratio])]
    if any(not 0 < r < 100 for r in ratios):
        raise ValueError(f"ratios must lie in (0, 100), got {ratios}")
    if (args.out_arch or args.out_weights) and len(ratios) != 1:
        raise ValueError("--out-arch/--out-weights need exactly one ratio")
    graph, weights = _load_model(args)
    dataset = _load_data(args)
    scoring = sensitivity.subsample_dataset(_load_scoring(args), args.samples,
                                            args.seed)
    num_classes = graph.out_width(graph.output_id)
    order = {spec.id: i for i, spec in enumerate(graph.layers)}

    rankings = {}
    for layer_id in graph.prunable_layers():
        acts = engine.capture_activations(graph, weights, scoring, layer_id,
                                          mode=args.capture)
        scores = metrics.score_layer(acts, scoring.labels, num_classes,
                                     args.metric, MetricConfig(),
                                     layer_id=layer_id,
                                     seed=sensitivity.layer_seed(args.seed, order[layer_id]),
                                     threads=args.threads)
        rankings[layer_id] = metrics.rank_channels(scores, len(scores))

    rows = []
    for ratio in ratios:
        entries = []
        for layer_id, ranking in rankings.items():
            width = graph.out_width(layer_id)
            n = min(int(width * ratio / 100.0), width - 1)
            if n > 0:
                entries.append((layer_id, tuple(sorted(ranking[:n]))))
        if entries:
            plan = netgraph.PruningPlan(tuple(entries), 0, 0, metric=args.metric)
            pruned_graph, pruned_weights = engine.apply_plan_weights(graph, weights, plan)
        else:
            pruned_graph, pruned_weights = graph, weights
        acc = engine.evaluate_accuracy(pruned_graph, pruned_weights, dataset)
        rows.append([args.metric, f"{ratio:g}", f"{acc:.9g}",
                     netgraph.flop_count(pruned_graph),
                     netgraph.param_count(pruned_graph)])
        if args.out_arch:
            netgraph.save_graph(pruned_graph, args.out_arch)
        if args.out_weights:
            engine.save_weights(pruned_weights, args.out_weights)
    _write_csv(args.out, UNIFORM_CSV_HEADER, rows)
    print(f"wrote {len(rows)} (ratio, accuracy) rows to {args.out}")
    if args.check:
        _check_csv(args.out, UNIFORM_CSV_HEADER, min_rows=len(ratios))
    return 0


BENCH_CSV_HEADER = ["layer_id", "metric", "wall_seconds"]


def _bench_channel_source(args):
    """Yield (layer_id, labels, num_classes, channel iterator)."""
    if args.synthetic:
        if min(args.samples, args.channels, args.spatial, args.classes) < 1:
            raise ValueError("synthetic bench dimensions must be positive")
        labels = np.random.default_rng([args.seed, 0xAB]).integers(
            0, args.classes, size=args.samples).astype(np.int64)

        def channels():
            for ch in range(args.channels):
                rng = np.random.default_rng([args.seed, ch])
                yield rng.standard_normal(
                    (args.samples, args.spatial, args.spatial)).astype(np.float32)
        return "synthetic", labels, args.classes, channels()

    if not (args.arch and args.weights and args.data and args.labels and args.layer):
        raise ValueError("bench needs either --synthetic or "
                         "--arch/--weights/--data/--labels/--layer")
    graph, weights = _load_model(args)
    dataset = _load_data(args)
    acts = engine.capture_activations(graph, weights, dataset, args.layer,
                                      mode=args.capture)
    num_classes = graph.out_width(graph.output_id)

    def channels():
        for ch in range(acts.shape[1]):
            yield acts[:, ch]
    return args.layer, dataset.labels, num_classes, channels()


def cmd_bench(args) -> int:
    """Time channel scoring per metric, excluding data generation/capture."""
    names = _split_list([args.metric])
    for name in names:
        if name not in METRIC_NAMES:
            raise ValueError(f"cannot bench metric {name!r}")
    layer_id, labels, num_classes, channels = _bench_channel_source(args)
    cfg = MetricConfig()
    wall = {name: 0.0 for name in names}
    for maps in channels:
        aset = ActivationSet(maps, labels, num_classes)
        for name in names:
            start = time.perf_counter()
            metrics.score_channel(aset, name, cfg, seed=args.seed)
            wall[name] += time.perf_counter() - start
    _write_csv(args.out, BENCH_CSV_HEADER,
               [[layer_id, name, f"{wall[name]:.9g}"] for name in names])
    for name in names:
        print(f"{layer_id} {name} {wall[name]:.3f}s")
    if args.check:
        _check_csv(args.out, BENCH_CSV_HEADER, min_rows=len(names))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (tensorstore.FormatError, netgraph.GraphError, engine.EngineError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (metrics.NumericError, np.linalg.LinAlgError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except (FileNotFoundError, IsADirectoryError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
