"""Minimal deterministic forward-inference engine.

Single-precision, CPU-only, numpy-backed. Exists to evaluate validation
accuracy of single-layer-pruned models, to capture per-layer activation dumps
for channel scoring, and to apply pruning plans at the weight level. conv2d
is cross-correlation with zero padding; batchnorm runs in inference mode off
its running statistics; summation order is fixed so identical inputs give
bit-identical outputs regardless of how work is scheduled.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import tensorstore
from .netgraph import apply_plan_graph, removal_effects

BN_EPSILON = 1e-5

MANIFEST_NAME = "manifest.json"


class EngineError(ValueError):
    """Weights, data, and graph disagree, or a layer cannot execute."""


@dataclass(frozen=True)
class Dataset:
    """Inputs [N, C, W, H] float32 with one class index per sample."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.inputs.ndim != 4 or self.inputs.shape[0] < 1:
            raise EngineError(f"inputs must be nonempty [N, C, W, H], "
                              f"got shape {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise EngineError("label count does not match sample count")

    @property
    def num_samples(self) -> int:
        return self.inputs.shape[0]

    def subset(self, indices) -> "Dataset":
        return Dataset(self.inputs[indices], self.labels[indices])


def load_dataset(tensor_path, label_path) -> Dataset:
    inputs = tensorstore.load_tensor(tensor_path)
    if inputs.ndim != 4:
        raise EngineError(f"dataset tensor must be [N, C, W, H], got {inputs.shape}")
    return Dataset(inputs, tensorstore.load_labels(label_path))


def save_dataset(dataset, tensor_path, label_path) -> None:
    tensorstore.save_tensor(tensor_path, dataset.inputs)
    tensorstore.save_labels(label_path, dataset.labels)


class WeightStore:
    """float32 parameter arrays per layer id; immutable during inference."""

    def __init__(self, arrays):
        self.arrays = {lid: {name: np.ascontiguousarray(arr, dtype=np.float32)
                             for name, arr in named.items()}
                       for lid, named in arrays.items()}

    def layer(self, layer_id) -> dict:
        try:
            return self.arrays[layer_id]
        except KeyError:
            raise EngineError(f"no weights stored for layer {layer_id!r}") from None


_WEIGHT_NAMES = {
    "conv2d": ("weight", "bias"),
    "dense": ("weight", "bias"),
    "batchnorm": ("scale", "shift", "running_mean", "running_var"),
}


def validate_weights(graph, weights) -> None:
    """Check the store covers exactly the weighted layers at exact shapes."""
    weighted = set()
    for spec in graph.layers:
        names = _WEIGHT_NAMES.get(spec.kind)
        if names is None:
            continue
        weighted.add(spec.id)
        named = weights.layer(spec.id)
        if set(named) != set(names):
            raise EngineError(f"layer {spec.id}: weight names {sorted(named)} != "
                              f"expected {sorted(names)}")
        if spec.kind == "conv2d":
            p = spec.params
            want = {"weight": (p["out_ch"], p["in_ch"], p["kernel"], p["kernel"]),
                    "bias": (p["out_ch"],)}
        elif spec.kind == "dense":
            p = spec.params
            want = {"weight": (p["out_dim"], p["in_dim"]), "bias": (p["out_dim"],)}
        else:
            c = graph.shape(spec.id)[1]
            want = {name: (c,) for name in names}
        for name, shape in want.items():
            if named[name].shape != shape:
                raise EngineError(f"layer {spec.id}: {name} shape {named[name].shape} "
                                  f"!= expected {shape}")
    extra = set(weights.arrays) - weighted
    if extra:
        raise EngineError(f"weights stored for unknown layers {sorted(extra)}")


# ---------------------------------------------------------------------------
# Layer kernels
# ---------------------------------------------------------------------------

def _conv2d(x, w, b, stride, padding):
    n, cin, wi, hi = x.shape
    cout, _, k, _ = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wo = (wi + 2 * padding - k) // stride + 1
    ho = (hi + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, wo, ho), dtype=np.float32)
    for i in range(k):
        for j in range(k):
            patch = x[:, :, i:i + (wo - 1) * stride + 1:stride,
                      j:j + (ho - 1) * stride + 1:stride]
            out += np.tensordot(patch, w[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
    out += b.reshape(1, -1, 1, 1)
    return out


def _pool_patches(x, window, stride, padding, fill):
    n, c, wi, hi = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                   constant_values=fill)
    wo = (wi + 2 * padding - window) // stride + 1
    ho = (hi + 2 * padding - window) // stride + 1
    return [x[:, :, i:i + (wo - 1) * stride + 1:stride,
              j:j + (ho - 1) * stride + 1:stride]
            for i in range(window) for j in range(window)]


def _maxpool(x, window, stride, padding):
    return np.maximum.reduce(_pool_patches(x, window, stride, padding, np.float32("-inf")))


def _avgpool(x, window, stride, padding):
    patches = _pool_patches(x, window, stride, padding, 0.0)
    acc = np.zeros_like(patches[0])
    for p in patches:
        acc += p
    return acc / np.float32(window * window)


def _batchnorm(x, named):
    scale = named["scale"].reshape(1, -1, 1, 1)
    shift = named["shift"].reshape(1, -1, 1, 1)
    mean = named["running_mean"].reshape(1, -1, 1, 1)
    var = named["running_var"].reshape(1, -1, 1, 1)
    return (x - mean) / np.sqrt(var + np.float32(BN_EPSILON)) * scale + shift


def _softmax(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _capture_targets(graph, capture, mode):
    """Map each layer to the requested ids it should be recorded under.

    In post mode a weighted layer immediately followed by a relu is recorded
    from the relu's output instead, matching how responses are visualized.
    """
    targets = {}
    for lid in capture:
        actual = lid
        if mode == "post" and lid != "input" and graph.layer(lid).kind in ("conv2d", "dense"):
            for cid in graph.consumers(lid):
                if graph.layer(cid).kind == "relu":
                    actual = cid
                    break
        targets.setdefault(actual, []).append(lid)
    return targets


def forward(graph, weights, batch, capture=(), capture_mode="post",
            zero_channels=None):
    """Run one batch through the graph.

    Returns (output, captures) where captures maps each requested layer id to
    its recorded activations. zero_channels maps layer ids to channel indices
    whose outputs are forced to zero after that layer executes; this is the
    masking hook the structural-pruning equivalence check is stated against.
    """
    batch = np.ascontiguousarray(batch, dtype=np.float32)
    expected = ("map",) + graph.input_shape
    if batch.ndim != 4 or ("map",) + batch.shape[1:] != expected:
        raise EngineError(f"batch shape {batch.shape} does not match graph input "
                          f"{graph.input_shape}")
    if capture_mode not in ("pre", "post"):
        raise EngineError(f"capture_mode must be 'pre' or 'post', got {capture_mode!r}")
    zero_channels = zero_channels or {}
    targets = _capture_targets(graph, capture, capture_mode)
    values = {"input": batch}
    captures = {}
    if "input" in zero_channels:
        masked = batch.copy()
        masked[:, list(zero_channels["input"])] = 0.0
        values["input"] = masked
    for lid in targets.get("input", ()):
        captures[lid] = values["input"]

    out = values["input"]
    for spec in graph.layers:
        ins = [values[src] for src in spec.inputs]
        kind, p = spec.kind, spec.params
        try:
            if kind == "conv2d":
                named = weights.layer(spec.id)
                out = _conv2d(ins[0], named["weight"], named["bias"],
                              p["stride"], p["padding"])
            elif kind == "dense":
                named = weights.layer(spec.id)
                out = ins[0] @ named["weight"].T + named["bias"]
            elif kind == "relu":
                out = np.maximum(ins[0], np.float32(0.0))
            elif kind == "maxpool":
                out = _maxpool(ins[0], p["window"], p["stride"], p["padding"])
            elif kind == "avgpool":
                out = _avgpool(ins[0], p["window"], p["stride"], p["padding"])
            elif kind == "batchnorm":
                out = _batchnorm(ins[0], weights.layer(spec.id))
            elif kind == "add":
                out = ins[0] + ins[1]
            elif kind == "channel_select":
                out = ins[0][:, p["keep"]]
            elif kind == "flatten":
                out = ins[0].reshape(ins[0].shape[0], -1)
            else:  # softmax
                out = _softmax(ins[0])
        except (ValueError, IndexError, KeyError) as exc:
            raise EngineError(f"layer {spec.id}: {exc}") from exc

        shape = graph.shape(spec.id)
        got = ("map",) + out.shape[1:] if out.ndim == 4 else ("vec",) + out.shape[1:]
        if got != shape:
            raise EngineError(f"layer {spec.id}: produced shape {got}, expected {shape}")
        if spec.id in zero_channels:
            out = out.copy()
            out[:, list(zero_channels[spec.id])] = 0.0
        values[spec.id] = out
        for lid in targets.get(spec.id, ()):
            captures[lid] = out
    return values[graph.output_id], captures


def evaluate_accuracy(graph, weights, dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    if graph.shape(graph.output_id)[0] != "vec":
        raise EngineError("output layer must produce a class-score vector")
    correct = 0
    for start in range(0, dataset.num_samples, batch_size):
        out, _ = forward(graph, weights, dataset.inputs[start:start + batch_size])
        pred = out.argmax(axis=1)
        correct += int((pred == dataset.labels[start:start + batch_size]).sum())
    return correct / dataset.num_samples


def capture_activations(graph, weights, dataset, layer_id, mode: str = "post",
                        batch_size: int = 256) -> np.ndarray:
    """Activations of one layer over the whole dataset, as [N, C, W, H].

    Vector-valued layers come back with W = H = 1 so dense units are scored
    by the same code as conv channels.
    """
    if layer_id != "input":
        graph.layer(layer_id)  # raises on unknown id
    chunks = []
    for start in range(0, dataset.num_samples, batch_size):
        _, caps = forward(graph, weights, dataset.inputs[start:start + batch_size],
                          capture=(layer_id,), capture_mode=mode)
        chunks.append(caps[layer_id])
    acts = np.concatenate(chunks, axis=0)
    if acts.ndim == 2:
        acts = acts[:, :, None, None]
    return np.ascontiguousarray(acts)


# ---------------------------------------------------------------------------
# Weight-level plan application
# ---------------------------------------------------------------------------

def apply_plan_weights(graph, weights, plan):
    """Apply a pruning plan to graph and weights together.

    Removes planned output filters (rows) and the matching input slices
    (columns) of every consumer, shrinks per-channel batchnorm parameters
    along passthrough chains, and shrinks kept-lists of selection layers.
    Returns (pruned graph, pruned WeightStore), both revalidated.
    """
    validate_weights(graph, weights)
    pruned_graph = apply_plan_graph(graph, plan)  # validates the plan too
    arrays = {lid: dict(named) for lid, named in weights.arrays.items()}
    for layer_id, removed in plan.entries:
        if not removed:
            continue
        removed = np.asarray(removed, dtype=np.int64)
        spec = graph.layer(layer_id)
        if spec.kind in ("conv2d", "dense"):
            named = arrays[layer_id]
            named["weight"] = np.delete(named["weight"], removed, axis=0)
            named["bias"] = np.delete(named["bias"], removed, axis=0)
        effects = removal_effects(graph, layer_id)
        for cid in effects.conv_consumers:
            arrays[cid]["weight"] = np.delete(arrays[cid]["weight"], removed, axis=1)
        for cid, block in effects.dense_consumers:
            cols = (removed[:, None] * block + np.arange(block)).ravel()
            arrays[cid]["weight"] = np.delete(arrays[cid]["weight"], cols, axis=1)
        for pid in effects.passthrough:
            if graph.layer(pid).kind == "batchnorm":
                arrays[pid] = {name: np.delete(arr, removed, axis=0)
                               for name, arr in arrays[pid].items()}
    pruned_weights = WeightStore(arrays)
    validate_weights(pruned_graph, pruned_weights)
    return pruned_graph, pruned_weights


# ---------------------------------------------------------------------------
# Weights directory manifest
# ---------------------------------------------------------------------------

def save_weights(weights, dir_path) -> None:
    """Write one tensor file per array plus a manifest mapping layer ids."""
    os.makedirs(dir_path, exist_ok=True)
    manifest = {"version": 1, "layers": {}}
    for lid, named in weights.arrays.items():
        manifest["layers"][lid] = {}
        for name, arr in named.items():
            fname = f"{lid}.{name}.ptsr"
            tensorstore.save_tensor(os.path.join(dir_path, fname), arr)
            manifest["layers"][lid][name] = fname
    with open(os.path.join(dir_path, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def load_weights(path) -> WeightStore:
    """Load a WeightStore from a manifest file or its directory."""
    manifest_path = path
    if os.path.isdir(path):
        manifest_path = os.path.join(path, MANIFEST_NAME)
    with open(manifest_path) as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as exc:
            raise EngineError(f"weights manifest is not valid JSON: {exc}") from exc
    if manifest.get("version") != 1:
        raise EngineError(f"unsupported weights manifest version {manifest.get('version')!r}")
    base = os.path.dirname(os.path.abspath(manifest_path))
    arrays = {}
    for lid, named in manifest.get("layers", {}).items():
        arrays[lid] = {name: tensorstore.load_tensor(os.path.join(base, rel))
                       for name, rel in named.items()}
    return WeightStore(arrays)
