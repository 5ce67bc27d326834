#!/usr/bin/env python3
"""End-to-end desk run on the committed toy fixture.

Runs the full pipeline (sensitivity analysis -> layer selection -> pruning ->
re-evaluation) with the chosen metric, then repeats the same pipeline with
random scoring over several seeds as the baseline comparison. Writes the
report, plan, and pruned model into --out.
"""

import argparse
import os

import numpy as np

from chanprune import engine, netgraph, sensitivity

FIXTURE = os.path.join(os.path.dirname(__file__), "..", "fixtures", "toycnn")


def load_fixture(root):
    graph = netgraph.load_graph(os.path.join(root, "arch.json"))
    weights = engine.load_weights(os.path.join(root, "weights"))
    val = engine.load_dataset(os.path.join(root, "val_inputs.ptsr"),
                              os.path.join(root, "val_labels.plbl"))
    scoring = engine.load_dataset(os.path.join(root, "score_inputs.ptsr"),
                                  os.path.join(root, "score_labels.plbl"))
    return graph, weights, val, scoring


def run_once(graph, weights, val, scoring, cfg):
    report = sensitivity.analyze(graph, weights, val, scoring, cfg)
    plan = sensitivity.select_and_plan(graph, report, cfg)
    pruned_graph, pruned_weights = engine.apply_plan_weights(graph, weights, plan)
    acc = engine.evaluate_accuracy(pruned_graph, pruned_weights, val)
    return report, plan, pruned_graph, pruned_weights, acc


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--fixture", default=FIXTURE)
    parser.add_argument("--out", default="desk_run_out")
    parser.add_argument("--metric", default="gsd")
    parser.add_argument("--alpha", type=float, default=2.0)
    parser.add_argument("--k", type=int, default=2)
    parser.add_argument("--baseline-seeds", type=int, default=10)
    args = parser.parse_args()

    graph, weights, val, scoring = load_fixture(args.fixture)
    os.makedirs(args.out, exist_ok=True)

    cfg = sensitivity.RunConfig(alpha=args.alpha, k=args.k, metric=args.metric)
    report, plan, pruned_graph, pruned_weights, acc = run_once(
        graph, weights, val, scoring, cfg)

    print(f"baseline accuracy      {report.baseline_accuracy:.4f}")
    print(f"{'layer':<8}{'n':>4}{'floss':>9}{'acc':>9}")
    for row in report.rows:
        print(f"{row.layer_id:<8}{row.n_channels:>4}{row.floss:>9}{row.accuracy:>9.4f}")
    print(f"{args.metric}-pruned accuracy   {acc:.4f} "
          f"(FLOP delta {plan.expected_flop_delta})")

    sensitivity.write_report_csv(report, os.path.join(args.out, "report.csv"))
    sensitivity.write_report_json(report, os.path.join(args.out, "report.json"))
    netgraph.save_plan(plan, os.path.join(args.out, "plan.json"))
    netgraph.save_graph(pruned_graph, os.path.join(args.out, "pruned_arch.json"))
    engine.save_weights(pruned_weights, os.path.join(args.out, "pruned_weights"))

    random_accs = []
    for seed in range(args.baseline_seeds):
        rcfg = sensitivity.RunConfig(alpha=args.alpha, k=args.k,
                                     metric="random", seed=seed)
        random_accs.append(run_once(graph, weights, val, scoring, rcfg)[4])
    print(f"random baseline accuracy over {args.baseline_seeds} seeds: "
          f"mean {np.mean(random_accs):.4f}, min {min(random_accs):.4f}, "
          f"max {max(random_accs):.4f}")
    print(f"artifacts in {args.out}/")


if __name__ == "__main__":
    main()
