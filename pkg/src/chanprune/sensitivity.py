"""FLOP-normalized layer sensitivity analysis and pruning-plan selection.

The workflow: compute every prunable layer's single-channel FLOP loss and the
channel count n_l that equalizes total FLOP reduction across layers; for each
layer, temporarily remove its n_l lowest-scored channels and measure
validation accuracy; rank layers by that accuracy and permanently prune the
top k. Because every candidate removes (up to rounding) the same FLOPs, the
accuracies are directly comparable across layers of very different geometry.

All temporary prunes run on clones; the input model is never mutated.
Reports are deterministic functions of the RunConfig, including any
subsampling of the scoring set.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .engine import (apply_plan_weights, capture_activations, evaluate_accuracy,
                     validate_weights)
from .metrics import METRIC_NAMES, MetricConfig, rank_channels, score_layer
from .netgraph import PruningPlan, build_plan, flop_count, pruning_counts


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines one analysis run."""

    alpha: float = 2.0
    k: int = 1
    metric: str = "gsd"
    metric_cfg: MetricConfig = field(default_factory=MetricConfig)
    scoring_samples: int | None = None
    seed: int = 0
    threads: int = 1
    capture: str = "post"

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.metric not in METRIC_NAMES + ("random",):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.capture not in ("pre", "post"):
            raise ValueError("capture must be 'pre' or 'post'")
        if self.scoring_samples is not None and self.scoring_samples < 2:
            raise ValueError("scoring_samples must be >= 2")


@dataclass(frozen=True)
class LayerSensitivity:
    layer_id: str
    n_channels: int
    floss: int
    accuracy: float


@dataclass(frozen=True)
class SensitivityReport:
    """Per-layer accuracies of the single-layer-pruned candidates.

    rows are ordered by accuracy descending (ties: earlier layer first);
    excluded lists layers whose normalized channel count rounded to zero.
    rankings keeps each analyzed layer's full ascending-score channel order
    so a plan can be built without re-scoring.
    """

    baseline_accuracy: float
    rows: tuple
    excluded: tuple
    table: "FlossTable"
    rankings: dict
    config: RunConfig


def layer_seed(seed, position) -> int:
    """Stable per-layer stream for the random baseline and MMD subsampling."""
    return int(np.random.SeedSequence([seed, position]).generate_state(1)[0])


def subsample_dataset(dataset, samples, seed):
    """Seeded uniform subset (original sample order kept)."""
    if samples is None or samples >= dataset.num_samples:
        return dataset
    rng = np.random.default_rng([seed, 0x5C0])
    keep = np.sort(rng.choice(dataset.num_samples, size=samples, replace=False))
    return dataset.subset(keep)


def analyze(graph, weights, validation, scoring, cfg: RunConfig) -> SensitivityReport:
    """Score channels, build every single-layer-pruned candidate, and rank
    layers by candidate validation accuracy."""
    validate_weights(graph, weights)
    num_classes = graph.out_width(graph.output_id)
    for ds, name in ((validation, "validation"), (scoring, "scoring")):
        if ds.labels.max() >= num_classes:
            raise ValueError(f"{name} labels exceed the {num_classes}-class output")
    scoring = subsample_dataset(scoring, cfg.scoring_samples, cfg.seed)

    baseline = evaluate_accuracy(graph, weights, validation)
    table = pruning_counts(graph, cfg.alpha)
    order = {spec.id: i for i, spec in enumerate(graph.layers)}

    rows, excluded, rankings = [], [], {}
    for entry in sorted(table.entries, key=lambda e: order[e.layer_id]):
        if entry.n_channels < 1:
            excluded.append(entry)
            continue
        acts = capture_activations(graph, weights, scoring, entry.layer_id,
                                   mode=cfg.capture)
        scores = score_layer(acts, scoring.labels, num_classes, cfg.metric,
                             cfg.metric_cfg, layer_id=entry.layer_id,
                             seed=layer_seed(cfg.seed, order[entry.layer_id]),
                             threads=cfg.threads)
        ranking = rank_channels(scores, entry.width)
        rankings[entry.layer_id] = tuple(ranking)
        probe = PruningPlan(((entry.layer_id, tuple(sorted(ranking[:entry.n_channels]))),),
                            0, 0)
        pruned_graph, pruned_weights = apply_plan_weights(graph, weights, probe)
        acc = evaluate_accuracy(pruned_graph, pruned_weights, validation)
        rows.append(LayerSensitivity(entry.layer_id, entry.n_channels,
                                     entry.floss, acc))
    rows.sort(key=lambda r: (-r.accuracy, order[r.layer_id]))
    return SensitivityReport(baseline, tuple(rows), tuple(excluded), table,
                             rankings, cfg)


def select_and_plan(graph, report: SensitivityReport, cfg: RunConfig) -> PruningPlan:
    """Top-k most insensitive layers (highest candidate accuracy) into a plan."""
    if cfg.k > len(report.rows):
        raise ValueError(f"k={cfg.k} exceeds the {len(report.rows)} eligible layers")
    selected = [row.layer_id for row in report.rows[:cfg.k]]
    return build_plan(graph, report.table, report.rankings, selected,
                      metric=cfg.metric, k=cfg.k,
                      samples=cfg.scoring_samples, seed=cfg.seed)


@dataclass(frozen=True)
class CycleResult:
    cycle: int
    report: SensitivityReport
    plan: PruningPlan
    graph: "NetworkGraph"
    weights: "WeightStore"


def iterate(graph, weights, validation, scoring, cfg: RunConfig, cycles: int):
    """Generator over analyze -> select -> apply cycles.

    Each cycle re-scores on the current pruned model. Yielding per cycle
    means completed results survive a failure in a later cycle. Fine-tuning
    between cycles is an external step: feed the yielded weights (optionally
    retrained) back in as the next starting point if retraining is wanted.
    """
    if cycles < 1:
        raise ValueError("cycles must be >= 1")
    for cycle in range(cycles):
        report = analyze(graph, weights, validation, scoring, cfg)
        plan = select_and_plan(graph, report, cfg)
        before = flop_count(graph)
        graph, weights = apply_plan_weights(graph, weights, plan)
        if flop_count(graph) >= before:
            raise AssertionError("plan did not reduce FLOPs")  # unreachable: n >= 1
        yield CycleResult(cycle, report, plan, graph, weights)


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

REPORT_CSV_HEADER = ["layer_id", "n_channels", "floss", "acc", "baseline_acc"]


def write_report_csv(report, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(REPORT_CSV_HEADER)
        for row in report.rows:
            writer.writerow([row.layer_id, row.n_channels, row.floss,
                             f"{row.accuracy:.9g}", f"{report.baseline_accuracy:.9g}"])


def read_report_csv(path):
    """Parse and validate a report CSV; returns the row dicts."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != REPORT_CSV_HEADER:
            raise ValueError(f"bad report CSV header: {header}")
        rows = []
        for row in reader:
            if len(row) != 5:
                raise ValueError(f"bad report CSV row: {row}")
            rows.append({"layer_id": row[0], "n_channels": int(row[1]),
                         "floss": int(row[2]), "acc": float(row[3]),
                         "baseline_acc": float(row[4])})
    for a, b in zip(rows, rows[1:]):
        if b["acc"] > a["acc"]:
            raise ValueError("report CSV rows not ordered by accuracy descending")
    return rows


def write_report_json(report, path) -> None:
    """JSON variant embedding the RunConfig and channel rankings."""
    doc = {
        "version": 1,
        "baseline_acc": report.baseline_accuracy,
        "rows": [asdict(row) for row in report.rows],
        "excluded": [asdict(entry) for entry in report.excluded],
        "floss_max": report.table.floss_max,
        "rankings": {lid: list(r) for lid, r in report.rankings.items()},
        "config": asdict(report.config),
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")
