"""Shared test helpers: random data builders and independent oracles.

The oracle implementations here deliberately use the dumbest possible
formulation (two-pass statistics, explicit matrix inverse, double Python
loops, six-loop convolution) so they share no code path with the package.
"""

import numpy as np
import pytest

from chanprune import engine, netgraph
from chanprune.netgraph import removal_effects
from chanprune.tensorstore import ActivationSet


def random_activation_set(rng, max_classes=5, max_per_class=12, max_spatial=4):
    """Random ActivationSet with at least 2 samples per class."""
    classes = int(rng.integers(2, max_classes + 1))
    w = int(rng.integers(1, max_spatial + 1))
    h = int(rng.integers(1, max_spatial + 1))
    counts = rng.integers(2, max_per_class + 1, size=classes)
    labels = np.repeat(np.arange(classes), counts)
    labels = rng.permutation(labels)
    maps = rng.normal(0, 1, (labels.size, w, h)).astype(np.float32)
    return ActivationSet(maps, labels.astype(np.int64), classes)


# ---------------------------------------------------------------------------
# Metric oracles
# ---------------------------------------------------------------------------

def twopass_stats(values):
    """Plain two-pass mean/unbiased variance over all elements, float64."""
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    mean = flat.sum() / flat.size
    var = np.square(flat - mean).sum() / (flat.size - 1)
    return flat.size, mean, var


def g_metric_oracle(aset, kind, epsilon=1e-12):
    """Brute-force one-vs-rest generalization from raw activations."""
    total = 0.0
    for c in range(aset.num_classes):
        side = aset.maps[aset.labels == c]
        rest = aset.maps[aset.labels != c]
        np_, mp, vp = twopass_stats(side)
        nq, mq, vq = twopass_stats(rest)
        vp, vq = max(vp, epsilon), max(vq, epsilon)
        if kind == "gsd":
            total += 0.5 * (vp / vq + vq / vp) + 0.5 * (mp - mq) ** 2 / (vp + vq) - 1.0
        elif kind == "gfdr":
            total += (mp - mq) ** 2 / (vp + vq)
        elif kind == "gabssnr":
            total += abs(mp - mq) / (np.sqrt(vp) + np.sqrt(vq))
        elif kind == "gttest":
            total += abs(mp - mq) / np.sqrt(vp / np_ + vq / nq)
        else:
            raise ValueError(kind)
    return total / aset.num_classes


def di_dense_oracle(aset, rho=1e-4):
    """Explicit scatter matrices, explicit inverse, explicit trace."""
    x = aset.maps.reshape(aset.num_samples, -1).astype(np.float64)
    fbar = x.mean(axis=0)
    xc = x - fbar
    s_total = sum(np.outer(row, row) for row in xc)
    s_between = np.zeros_like(s_total)
    for c in range(aset.num_classes):
        members = x[aset.labels == c]
        d = members.mean(axis=0) - fbar
        s_between += members.shape[0] * np.outer(d, d)
    inv = np.linalg.inv(s_total + rho * np.eye(x.shape[1]))
    return float(np.trace(inv @ s_between))


def mmd_double_loop_oracle(aset, sigma=1.0):
    """Nested-loop V-statistic MMD averaged over one-vs-rest partitions."""
    x = aset.maps.reshape(aset.num_samples, -1).astype(np.float64)

    def kernel(a, b):
        return np.exp(-np.sum((a - b) ** 2) / (2 * sigma * sigma))

    def two(a, b):
        saa = sum(kernel(u, v) for u in a for v in a) / len(a) ** 2
        sbb = sum(kernel(u, v) for u in b for v in b) / len(b) ** 2
        sab = sum(kernel(u, v) for u in a for v in b) / (len(a) * len(b))
        return saa + sbb - 2 * sab

    total = 0.0
    for c in range(aset.num_classes):
        total += two(x[aset.labels == c], x[aset.labels != c])
    return total / aset.num_classes


# ---------------------------------------------------------------------------
# Engine oracles
# ---------------------------------------------------------------------------

def conv2d_sixloop_oracle(x, w, b, stride, padding):
    """Direct six-loop cross-correlation in float64."""
    n, cin, wi, hi = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(np.asarray(x, np.float64),
                ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wo = (wi + 2 * padding - k) // stride + 1
    ho = (hi + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, wo, ho))
    for s in range(n):
        for o in range(cout):
            for a in range(wo):
                for bb in range(ho):
                    acc = 0.0
                    for c in range(cin):
                        for i in range(k):
                            for j in range(k):
                                acc += xp[s, c, a * stride + i, bb * stride + j] * w[o, c, i, j]
                    out[s, o, a, bb] = acc + b[o]
    return out


def zero_mask_for_plan(graph, plan):
    """zero_channels dict realizing a plan as masking on the unpruned net.

    The removed channel must stay zero along the whole passthrough chain
    (batchnorm would otherwise re-bias it), so every passthrough layer gets
    the same mask as its producer.
    """
    masks = {}
    for layer_id, removed in plan.entries:
        effects = removal_effects(graph, layer_id)
        for lid in (layer_id,) + effects.passthrough:
            masks.setdefault(lid, set()).update(removed)
    return {lid: sorted(idx) for lid, idx in masks.items()}


def masked_forward(graph, weights, plan, batch):
    out, _ = engine.forward(graph, weights, batch,
                            zero_channels=zero_mask_for_plan(graph, plan))
    return out


# ---------------------------------------------------------------------------
# Small fixed graphs
# ---------------------------------------------------------------------------

def chain_graph(widths=(3, 8, 16), spatial=32, classes=10):
    """input -> convA -> convB -> flatten -> fc; the FLOSS hand example."""
    c0, ca, cb = widths
    layers = [
        netgraph.conv2d("convA", c0, ca, 3, 1, 1, inputs="input"),
        netgraph.conv2d("convB", ca, cb, 3, 1, 1, inputs="convA"),
        netgraph.simple("flat", "flatten", "convB"),
        netgraph.dense("fc", cb * spatial * spatial, classes, inputs="flat"),
        netgraph.simple("prob", "softmax", "fc"),
    ]
    return netgraph.NetworkGraph((c0, spatial, spatial), layers)


def residual_graph(channels=4, spatial=8, classes=3):
    """One residual block with entry selection, then a head."""
    layers = [
        netgraph.conv2d("stem", 2, channels, 3, 1, 1, inputs="input"),
        netgraph.simple("stem_relu", "relu", "stem"),
        netgraph.channel_select("sel", range(channels), inputs="stem_relu"),
        netgraph.conv2d("trunk_a", channels, 5, 3, 1, 1, inputs="sel"),
        netgraph.LayerSpec("trunk_a_bn", "batchnorm", {}, ("trunk_a",)),
        netgraph.simple("trunk_a_relu", "relu", "trunk_a_bn"),
        netgraph.conv2d("trunk_b", 5, channels, 3, 1, 1, inputs="trunk_a_relu"),
        netgraph.LayerSpec("join", "add", {}, ("trunk_b", "stem_relu")),
        netgraph.simple("join_relu", "relu", "join"),
        netgraph.simple("flat", "flatten", "join_relu"),
        netgraph.dense("fc", channels * spatial * spatial, classes, inputs="flat"),
        netgraph.simple("prob", "softmax", "fc"),
    ]
    return netgraph.NetworkGraph((2, spatial, spatial), layers)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
