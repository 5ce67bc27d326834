#!/usr/bin/env python3
"""Dump the reference architectures (VGG-16, ResNet-50) as IR JSON files and
print their exact FLOP/parameter totals."""

import argparse

from chanprune import archzoo, netgraph


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", default=".")
    args = parser.parse_args()
    for name, build in archzoo.REFERENCE_BUILDERS.items():
        graph = build()
        path = f"{args.out_dir}/{name}.json"
        netgraph.save_graph(graph, path)
        print(f"{name}: {netgraph.flop_count(graph):,} FLOPs, "
              f"{netgraph.param_count(graph):,} params -> {path}")


if __name__ == "__main__":
    main()
