"""Synthetic datasets and toy networks for experiments and fixtures.

Everything here is seeded and deterministic. Two constructions matter:

* two_channel_contrast builds the classic qualitative scoring testbed: one
  channel whose activation values separate by class, one whose per-class
  distributions are identical. Any reasonable discriminant function must
  rank the first channel above the second.

* The planted "amplitude" fixture is a 6-weighted-layer CNN whose input
  carries the class as a per-class amplitude level on channel 0 plus pure
  noise channels. Half the channels of every conv layer copy the amplitude
  forward (signal), the other half mix only noise and feed nothing the
  classifier reads. The classifier decodes the amplitude band, so pruning
  noise channels never changes a logit while pruning a signal channel does.
  This gives a committed, training-free model with a known ground truth for
  which channels are redundant.
"""

from __future__ import annotations

import numpy as np

from .engine import Dataset, WeightStore
from .netgraph import LayerSpec, NetworkGraph, channel_select, conv2d, dense, pool, simple

FIXTURE_CLASSES = 4
_FIXTURE_CONV1_TAPS = (0.6, 0.8, 1.0, 1.2)   # gains of the four signal filters

# Signal channel count per weighted layer of the fixture; the remaining
# channels are noise-only and safe to remove. Every signal chain feeds the
# classifier, so removing any signal channel moves the logits.
FIXTURE_SIGNAL = {"conv1": 4, "conv2": 4, "conv3": 4, "conv4": 4, "fc1": 16}


def two_channel_contrast(seed, samples_per_class=60, classes=3, w=3, h=3, shift=2.5):
    """[N, 2, w, h] activations where channel 0 is class-separated Gaussians
    (means shift * class) and channel 1 draws from one class-independent
    Gaussian. Returns (activations, labels)."""
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), samples_per_class)
    n = labels.size
    ch0 = rng.normal(shift * labels[:, None, None], 1.0, size=(n, w, h))
    ch1 = rng.normal(0.0, 1.0, size=(n, w, h))
    acts = np.stack([ch0, ch1], axis=1).astype(np.float32)
    return acts, labels.astype(np.int64)


# ---------------------------------------------------------------------------
# Random toy networks (chains and residual blocks) for property tests
# ---------------------------------------------------------------------------

def random_toy_network(rng):
    """A small random valid network mixing plain conv stages and residual
    blocks with entry channel selection. Returns (graph, weights)."""
    spatial = int(rng.choice([6, 8]))
    channels = int(rng.integers(2, 5))
    classes = int(rng.integers(2, 5))
    input_shape = (channels, spatial, spatial)
    layers = []
    prev = "input"
    for i in range(int(rng.integers(1, 4))):
        if rng.random() < 0.5 and channels >= 2:
            # residual block: select -> conv/bn/relu -> conv/bn -> add(skip)
            sel = f"sel{i}"
            layers.append(channel_select(sel, range(channels), inputs=prev))
            mid = int(rng.integers(2, 7))
            layers.append(conv2d(f"rconv{i}a", channels, mid, 3, 1, 1, inputs=sel))
            layers.append(LayerSpec(f"rbn{i}a", "batchnorm", {}, (f"rconv{i}a",)))
            layers.append(simple(f"rrelu{i}a", "relu", f"rbn{i}a"))
            layers.append(conv2d(f"rconv{i}b", mid, channels, 3, 1, 1, inputs=f"rrelu{i}a"))
            layers.append(LayerSpec(f"rbn{i}b", "batchnorm", {}, (f"rconv{i}b",)))
            layers.append(LayerSpec(f"radd{i}", "add", {}, (f"rbn{i}b", prev)))
            layers.append(simple(f"rout{i}", "relu", f"radd{i}"))
            prev = f"rout{i}"
        else:
            out = int(rng.integers(2, 7))
            layers.append(conv2d(f"conv{i}", channels, out, 3, 1, 1, inputs=prev))
            prev = f"conv{i}"
            if rng.random() < 0.5:
                layers.append(LayerSpec(f"bn{i}", "batchnorm", {}, (prev,)))
                prev = f"bn{i}"
            layers.append(simple(f"relu{i}", "relu", prev))
            prev = f"relu{i}"
            channels = out
            if spatial >= 6 and rng.random() < 0.5:
                layers.append(pool(f"pool{i}", "maxpool", 2, 2, inputs=prev))
                prev = f"pool{i}"
                spatial //= 2
    layers.append(simple("flat", "flatten", prev))
    hidden = int(rng.integers(3, 9))
    layers.append(dense("fc1", channels * spatial * spatial, hidden, inputs="flat"))
    layers.append(simple("fc1relu", "relu", "fc1"))
    layers.append(dense("fc2", hidden, classes, inputs="fc1relu"))
    layers.append(simple("prob", "softmax", "fc2"))
    graph = NetworkGraph(input_shape, layers)
    return graph, random_weights(graph, rng)


def random_weights(graph, rng, scale=1.0) -> WeightStore:
    """Gaussian fan-in-scaled weights for every weighted layer."""
    arrays = {}
    for spec in graph.layers:
        p = spec.params
        if spec.kind == "conv2d":
            fan = p["in_ch"] * p["kernel"] ** 2
            arrays[spec.id] = {
                "weight": rng.normal(0, scale / np.sqrt(fan),
                                     (p["out_ch"], p["in_ch"], p["kernel"], p["kernel"])),
                "bias": rng.normal(0, 0.1, p["out_ch"]),
            }
        elif spec.kind == "dense":
            arrays[spec.id] = {
                "weight": rng.normal(0, scale / np.sqrt(p["in_dim"]),
                                     (p["out_dim"], p["in_dim"])),
                "bias": rng.normal(0, 0.1, p["out_dim"]),
            }
        elif spec.kind == "batchnorm":
            c = graph.shape(spec.id)[1]
            arrays[spec.id] = {
                "scale": rng.uniform(0.5, 1.5, c),
                "shift": rng.normal(0, 0.2, c),
                "running_mean": rng.normal(0, 0.2, c),
                "running_var": rng.uniform(0.5, 1.5, c),
            }
    return WeightStore(arrays)


def random_plan_entries(graph, rng, max_layers=3):
    """Random valid (layer, removed indices) entries for a random graph."""
    candidates = graph.prunable_layers()
    if not candidates:
        return ()
    take = int(rng.integers(1, min(max_layers, len(candidates)) + 1))
    chosen = rng.choice(len(candidates), size=take, replace=False)
    entries = []
    for ci in sorted(chosen):
        lid = candidates[ci]
        width = graph.out_width(lid)
        count = int(rng.integers(1, width))
        removed = np.sort(rng.choice(width, size=count, replace=False))
        entries.append((lid, tuple(int(i) for i in removed)))
    return tuple(entries)


# ---------------------------------------------------------------------------
# The committed amplitude fixture (6 weighted layers)
# ---------------------------------------------------------------------------

def fixture_graph() -> NetworkGraph:
    """Architecture of the planted fixture: 4 convs + 2 dense, 4 classes.

    fc1 is marked unprunable: almost all FLOPs sit in the convolutions, so
    pruning the thin dense layer is never cost-effective and its huge
    normalized channel count would be clamped anyway.
    """
    layers = [
        conv2d("conv1", 4, 10, 3, 1, 1, inputs="input"),
        simple("relu1", "relu", "conv1"),
        conv2d("conv2", 10, 10, 3, 1, 1, inputs="relu1"),
        simple("relu2", "relu", "conv2"),
        pool("pool1", "maxpool", 2, 2, inputs="relu2"),
        conv2d("conv3", 10, 16, 3, 1, 1, inputs="pool1"),
        simple("relu3", "relu", "conv3"),
        conv2d("conv4", 16, 12, 3, 1, 1, inputs="relu3"),
        simple("relu4", "relu", "conv4"),
        pool("pool2", "maxpool", 2, 2, inputs="relu4"),
        simple("flat", "flatten", "pool2"),
        dense("fc1", 48, 16, inputs="flat", prunable=False),
        simple("relu5", "relu", "fc1"),
        dense("fc2", 16, FIXTURE_CLASSES, inputs="relu5"),
        simple("prob", "softmax", "fc2"),
    ]
    return NetworkGraph((4, 8, 8), layers)


def fixture_weights(seed=7) -> WeightStore:
    """Planted weights: signal channels copy the class amplitude forward
    through center taps, noise channels mix only noise channels, and the
    classifier scores amplitude bands (logit_c = 2*a_c*x - a_c^2 favors the
    band whose center a_c = c+1 is closest to the decoded amplitude x)."""
    rng = np.random.default_rng(seed)
    taps = _FIXTURE_CONV1_TAPS

    w1 = np.zeros((10, 4, 3, 3))
    for i, tap in enumerate(taps):
        w1[i, 0, 1, 1] = tap
    w1[4:, 1:, :, :] = rng.normal(0, 0.25, (6, 3, 3, 3))

    w2 = np.zeros((10, 10, 3, 3))
    for i in range(4):
        w2[i, i, 1, 1] = 1.0
    w2[4:, 4:, :, :] = rng.normal(0, 0.2, (6, 6, 3, 3))

    w3 = np.zeros((16, 10, 3, 3))
    for j in range(4):
        w3[j, j, 1, 1] = 1.0
    w3[4:, 4:, :, :] = rng.normal(0, 0.2, (12, 6, 3, 3))

    w4 = np.zeros((12, 16, 3, 3))
    for t in range(4):
        w4[t, t, 1, 1] = 1.0 / taps[t]      # undo the conv1 gain
    w4[4:, 4:, :, :] = rng.normal(0, 0.2, (8, 12, 3, 3))

    # flatten index of (channel, position) = channel * 4 + position
    w5 = np.zeros((16, 48))
    for t in range(4):
        for q in range(4):
            w5[t * 4 + q, t * 4 + q] = 1.0

    w6 = np.zeros((FIXTURE_CLASSES, 16))
    b6 = np.zeros(FIXTURE_CLASSES)
    for c in range(FIXTURE_CLASSES):
        a = float(c + 1)
        w6[c, :] = 2.0 * a / 16.0
        b6[c] = -a * a

    zeros = lambda n: np.zeros(n)
    return WeightStore({
        "conv1": {"weight": w1, "bias": zeros(10)},
        "conv2": {"weight": w2, "bias": zeros(10)},
        "conv3": {"weight": w3, "bias": zeros(16)},
        "conv4": {"weight": w4, "bias": zeros(12)},
        "fc1": {"weight": w5, "bias": zeros(16)},
        "fc2": {"weight": w6, "bias": b6},
    })


def fixture_dataset(seed, samples) -> Dataset:
    """Inputs for the amplitude fixture: channel 0 holds the class amplitude
    c+1 plus mild noise, channels 1..3 are pure unit noise."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, FIXTURE_CLASSES, size=samples)
    ch0 = (labels + 1)[:, None, None] + rng.normal(0, 0.1, (samples, 8, 8))
    rest = rng.normal(0, 1.0, (samples, 3, 8, 8))
    inputs = np.concatenate([ch0[:, None], rest], axis=1).astype(np.float32)
    return Dataset(inputs, labels.astype(np.int64))
