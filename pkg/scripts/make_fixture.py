#!/usr/bin/env python3
"""Regenerate the committed toy fixture under fixtures/toycnn/.

The fixture is fully deterministic (fixed seeds, planted weights), so running
this script must reproduce the committed files byte for byte; a test guards
that. The weights are produced offline by construction, not by training: see
chanprune.synth for the ground-truth layout of signal vs noise channels.
"""

import argparse
import os

from chanprune import engine, netgraph, synth

VAL_SEED, VAL_SAMPLES = 11, 500
SCORE_SEED, SCORE_SAMPLES = 12, 640


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default=os.path.join(os.path.dirname(__file__),
                                                      "..", "fixtures", "toycnn"))
    args = parser.parse_args()
    out = os.path.abspath(args.out)
    os.makedirs(out, exist_ok=True)

    graph = synth.fixture_graph()
    weights = synth.fixture_weights()
    engine.validate_weights(graph, weights)
    netgraph.save_graph(graph, os.path.join(out, "arch.json"))
    engine.save_weights(weights, os.path.join(out, "weights"))

    val = synth.fixture_dataset(VAL_SEED, VAL_SAMPLES)
    engine.save_dataset(val, os.path.join(out, "val_inputs.ptsr"),
                        os.path.join(out, "val_labels.plbl"))
    scoring = synth.fixture_dataset(SCORE_SEED, SCORE_SAMPLES)
    engine.save_dataset(scoring, os.path.join(out, "score_inputs.ptsr"),
                        os.path.join(out, "score_labels.plbl"))

    acc = engine.evaluate_accuracy(graph, weights, val)
    print(f"fixture written to {out}")
    print(f"baseline validation accuracy: {acc:.4f} "
          f"({VAL_SAMPLES} samples, {SCORE_SAMPLES} scoring samples)")


if __name__ == "__main__":
    main()
