"""CNN architecture IR, exact FLOP/parameter accounting, and pruning plans.

The graph is a DAG of layers with a single input and a single output. Channel
counts and spatial sizes are propagated from the input shape at construction,
so an invalid architecture (mismatched widths, an `add` joining unequal
shapes, impossible stride arithmetic) never survives into the accounting or
pruning code.

FLOP convention: one multiply-accumulate counts as one FLOP; only conv2d and
dense layers contribute (elementwise ops round to zero at the scales this
tool targets). The single-channel FLOP loss of a layer and all plan deltas
are computed by full-graph recomputation on a clone, never by a local
formula, so residual blocks and channel-selection layers are handled by the
same code path as plain chains.

Residual blocks keep their skip path at full width: the only way a plan may
narrow a block is through the channel-selection layer at the block entry,
whose kept-channel list feeds the first trunk convolution.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

LAYER_KINDS = ("conv2d", "dense", "relu", "maxpool", "avgpool", "batchnorm",
               "add", "channel_select", "flatten", "softmax")

INPUT_ID = "input"

SCHEMA_VERSION = 1


class GraphError(ValueError):
    """The architecture, a plan, or their combination is invalid."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer: id, kind, kind-specific geometry, producer ids.

    prunable=None means "derive from structure"; an explicit True is rejected
    at graph construction if shrinking the layer's output width would break
    an add join or change the network output.
    """

    id: str
    kind: str
    params: dict = field(default_factory=dict)
    inputs: tuple = (INPUT_ID,)
    prunable: bool | None = None


def conv2d(id, in_ch, out_ch, kernel, stride=1, padding=0, inputs=None, prunable=None):
    return LayerSpec(id, "conv2d",
                     {"in_ch": in_ch, "out_ch": out_ch, "kernel": kernel,
                      "stride": stride, "padding": padding},
                     _inputs(inputs), prunable)


def dense(id, in_dim, out_dim, inputs=None, prunable=None):
    return LayerSpec(id, "dense", {"in_dim": in_dim, "out_dim": out_dim},
                     _inputs(inputs), prunable)


def pool(id, kind, window, stride=None, padding=0, inputs=None):
    return LayerSpec(id, kind,
                     {"window": window, "stride": stride or window, "padding": padding},
                     _inputs(inputs))


def simple(id, kind, inputs=None):
    return LayerSpec(id, kind, {}, _inputs(inputs))


def channel_select(id, keep, inputs=None, prunable=None):
    return LayerSpec(id, "channel_select", {"keep": list(keep)}, _inputs(inputs), prunable)


def _inputs(inputs):
    if inputs is None:
        return (INPUT_ID,)
    if isinstance(inputs, str):
        return (inputs,)
    return tuple(inputs)


class NetworkGraph:
    """Validated, immutable layer DAG with propagated shapes.

    Shapes are ("map", channels, w, h) before flattening and ("vec", dim)
    after. Treat instances as read-only; every mutating operation returns a
    new graph.
    """

    def __init__(self, input_shape, layers):
        if len(input_shape) != 3 or any(int(d) <= 0 for d in input_shape):
            raise GraphError(f"input_shape must be 3 positive ints, got {input_shape}")
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers = _toposort(layers)
        self._by_id = {spec.id: spec for spec in self.layers}
        self._consumers = {spec.id: [] for spec in self.layers}
        self._consumers[INPUT_ID] = []
        for spec in self.layers:
            for src in spec.inputs:
                self._consumers[src].append(spec.id)
        sinks = [spec.id for spec in self.layers if not self._consumers[spec.id]]
        if len(sinks) != 1:
            raise GraphError(f"graph must have exactly one output layer, found {sinks}")
        self.output_id = sinks[0]
        self._shapes = _infer_shapes(self)
        for spec in self.layers:
            if spec.prunable and not _structurally_prunable(self, spec.id):
                raise GraphError(f"layer {spec.id} declared prunable but its output "
                                 f"width is structurally fixed")

    def layer(self, layer_id) -> LayerSpec:
        try:
            return self._by_id[layer_id]
        except KeyError:
            raise GraphError(f"unknown layer {layer_id!r}") from None

    def shape(self, layer_id):
        """Output shape of a layer (or of the graph input)."""
        return self._shapes[layer_id]

    def consumers(self, layer_id):
        return tuple(self._consumers[layer_id])

    def out_width(self, layer_id) -> int:
        """Output channel (or unit) count of a layer."""
        spec = self.layer(layer_id)
        if spec.kind == "dense":
            return spec.params["out_dim"]
        shape = self.shape(layer_id)
        return shape[1]

    def is_prunable(self, layer_id) -> bool:
        spec = self.layer(layer_id)
        if spec.prunable is not None:
            return spec.prunable and self.out_width(layer_id) >= 2
        return (self.out_width(layer_id) >= 2
                and _structurally_prunable(self, layer_id))

    def prunable_layers(self) -> list:
        return [spec.id for spec in self.layers if self.is_prunable(spec.id)]

    def replace_layers(self, new_params) -> "NetworkGraph":
        """New graph with params dicts swapped for the given layer ids."""
        layers = [replace(spec, params=new_params.get(spec.id, spec.params))
                  for spec in self.layers]
        return NetworkGraph(self.input_shape, layers)


def _toposort(layers):
    layers = list(layers)
    ids = [spec.id for spec in layers]
    if len(set(ids)) != len(ids):
        raise GraphError("duplicate layer ids")
    if INPUT_ID in ids:
        raise GraphError(f"layer id {INPUT_ID!r} is reserved")
    known = set(ids) | {INPUT_ID}
    for spec in layers:
        if spec.kind not in LAYER_KINDS:
            raise GraphError(f"layer {spec.id}: unknown kind {spec.kind!r}")
        if not spec.inputs:
            raise GraphError(f"layer {spec.id} has no producer")
        for src in spec.inputs:
            if src not in known:
                raise GraphError(f"layer {spec.id} references unknown producer {src!r}")
    # Kahn's algorithm, stable in the given order.
    placed = {INPUT_ID}
    ordered, pending = [], list(layers)
    while pending:
        ready = [spec for spec in pending if all(s in placed for s in spec.inputs)]
        if not ready:
            raise GraphError("cycle detected in layer graph")
        for spec in ready:
            ordered.append(spec)
            placed.add(spec.id)
        pending = [spec for spec in pending if spec.id not in placed]
    return tuple(ordered)


def _pos_int(spec, key, minimum=1):
    value = spec.params.get(key)
    if not isinstance(value, int) or value < minimum:
        raise GraphError(f"layer {spec.id}: {key} must be an int >= {minimum}, got {value!r}")
    return value


def _spatial_out(spec, size, kernel, stride, padding):
    padded = size + 2 * padding
    if padded < kernel:
        raise GraphError(f"layer {spec.id}: window {kernel} exceeds padded size {padded}")
    return (padded - kernel) // stride + 1


def _infer_shapes(graph):
    shapes = {INPUT_ID: ("map",) + graph.input_shape}
    for spec in graph.layers:
        ins = [shapes[src] for src in spec.inputs]
        if spec.kind == "add":
            if len(ins) != 2:
                raise GraphError(f"add layer {spec.id} needs exactly 2 producers")
            if ins[0] != ins[1]:
                raise GraphError(f"add layer {spec.id} joins unequal shapes "
                                 f"{ins[0]} and {ins[1]}")
            shapes[spec.id] = ins[0]
            continue
        if len(ins) != 1:
            raise GraphError(f"layer {spec.id} needs exactly 1 producer")
        shape = ins[0]
        kind = spec.kind
        if kind == "conv2d":
            if shape[0] != "map":
                raise GraphError(f"conv2d {spec.id} needs a spatial producer")
            in_ch, out_ch = _pos_int(spec, "in_ch"), _pos_int(spec, "out_ch")
            k = _pos_int(spec, "kernel")
            s, p = _pos_int(spec, "stride"), _pos_int(spec, "padding", 0)
            if in_ch != shape[1]:
                raise GraphError(f"conv2d {spec.id}: in_ch {in_ch} != producer "
                                 f"channels {shape[1]}")
            w = _spatial_out(spec, shape[2], k, s, p)
            h = _spatial_out(spec, shape[3], k, s, p)
            shapes[spec.id] = ("map", out_ch, w, h)
        elif kind == "dense":
            if shape[0] != "vec":
                raise GraphError(f"dense {spec.id} needs a flattened producer")
            in_dim, out_dim = _pos_int(spec, "in_dim"), _pos_int(spec, "out_dim")
            if in_dim != shape[1]:
                raise GraphError(f"dense {spec.id}: in_dim {in_dim} != producer dim {shape[1]}")
            shapes[spec.id] = ("vec", out_dim)
        elif kind in ("maxpool", "avgpool"):
            if shape[0] != "map":
                raise GraphError(f"{kind} {spec.id} needs a spatial producer")
            wnd = _pos_int(spec, "window")
            s, p = _pos_int(spec, "stride"), _pos_int(spec, "padding", 0)
            w = _spatial_out(spec, shape[2], wnd, s, p)
            h = _spatial_out(spec, shape[3], wnd, s, p)
            shapes[spec.id] = ("map", shape[1], w, h)
        elif kind == "batchnorm":
            if shape[0] != "map":
                raise GraphError(f"batchnorm {spec.id} needs a spatial producer")
            shapes[spec.id] = shape
        elif kind == "channel_select":
            if shape[0] != "map":
                raise GraphError(f"channel_select {spec.id} needs a spatial producer")
            keep = spec.params.get("keep")
            if (not isinstance(keep, list) or not keep
                    or any(not isinstance(i, int) for i in keep)
                    or any(b <= a for a, b in zip(keep, keep[1:]))
                    or keep[0] < 0 or keep[-1] >= shape[1]):
                raise GraphError(f"channel_select {spec.id}: keep list must be strictly "
                                 f"increasing within [0, {shape[1]})")
            shapes[spec.id] = ("map", len(keep), shape[2], shape[3])
        elif kind == "flatten":
            if shape[0] != "map":
                raise GraphError(f"flatten {spec.id} needs a spatial producer")
            shapes[spec.id] = ("vec", shape[1] * shape[2] * shape[3])
        elif kind == "relu":
            shapes[spec.id] = shape
        elif kind == "softmax":
            if shape[0] != "vec":
                raise GraphError(f"softmax {spec.id} needs a flattened producer")
            shapes[spec.id] = shape
        else:  # pragma: no cover - kinds are checked in _toposort
            raise GraphError(f"unhandled kind {kind}")
    return shapes


# ---------------------------------------------------------------------------
# Channel-removal propagation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RemovalEffects:
    """Which layers a channel removal touches, and how.

    passthrough layers carry the shrunk channel space unchanged (batchnorm
    parameters shrink with it); conv_consumers lose input channels;
    dense_consumers lose `block` input columns per removed channel.
    """

    layer_id: str
    passthrough: tuple
    conv_consumers: tuple
    dense_consumers: tuple  # of (layer_id, block)


class _NotPrunable(Exception):
    pass


def _trace_removal(graph, layer_id):
    start = graph.layer(layer_id)
    if start.kind not in ("conv2d", "dense", "channel_select"):
        raise _NotPrunable(f"{start.kind} layers have no removable output channels")
    passthrough, convs, denses = [], [], []
    seen = set()
    block0 = 1 if start.kind == "dense" else None   # None = still in channel space
    frontier = [(cid, block0) for cid in graph.consumers(layer_id)]
    if not frontier:
        raise _NotPrunable("output layer width is fixed")
    while frontier:
        cid, block = frontier.pop()
        if cid in seen:
            continue
        seen.add(cid)
        spec = graph.layer(cid)
        kind = spec.kind
        if kind == "add":
            raise _NotPrunable(f"{cid}: add join requires equal widths")
        if kind == "channel_select":
            raise _NotPrunable(f"{cid}: selection indices refer to the full producer width")
        if kind == "conv2d":
            if block is not None:
                raise GraphError(f"{cid}: conv2d after flatten")
            convs.append(cid)
            continue
        if kind == "dense":
            denses.append((cid, block if block is not None else 1))
            continue
        if kind == "flatten":
            shape = graph.shape(spec.inputs[0])
            block = shape[2] * shape[3]
        elif kind in ("relu", "maxpool", "avgpool", "batchnorm", "softmax"):
            passthrough.append(cid)
        else:  # pragma: no cover
            raise GraphError(f"unhandled kind {kind}")
        nxt = graph.consumers(cid)
        if not nxt:
            raise _NotPrunable(f"removal would change the network output width via {cid}")
        frontier.extend((n, block) for n in nxt)
    return RemovalEffects(layer_id, tuple(passthrough), tuple(convs), tuple(denses))


def _structurally_prunable(graph, layer_id) -> bool:
    try:
        _trace_removal(graph, layer_id)
        return True
    except _NotPrunable:
        return False


def removal_effects(graph, layer_id) -> RemovalEffects:
    """Layers affected by removing output channels of `layer_id`.

    Raises GraphError when the layer's output width is structurally fixed
    (it feeds an add join, a selection layer, or the network output).
    """
    try:
        return _trace_removal(graph, layer_id)
    except _NotPrunable as exc:
        raise GraphError(f"layer {layer_id} is not prunable: {exc}") from exc


# ---------------------------------------------------------------------------
# FLOP and parameter accounting
# ---------------------------------------------------------------------------

def flop_count(graph) -> int:
    """Total multiply-accumulates of one forward pass.

    conv2d: out_ch * in_ch * k^2 * out_w * out_h; dense: out_dim * in_dim;
    everything else counts zero.
    """
    total = 0
    for spec in graph.layers:
        if spec.kind == "conv2d":
            _, _, w, h = graph.shape(spec.id)
            p = spec.params
            total += p["out_ch"] * p["in_ch"] * p["kernel"] ** 2 * w * h
        elif spec.kind == "dense":
            total += spec.params["out_dim"] * spec.params["in_dim"]
    return total


def param_count(graph) -> int:
    """Learnable parameter count: conv/dense weights + biases, 2 per
    batchnorm channel (scale, shift; running stats excluded)."""
    total = 0
    for spec in graph.layers:
        if spec.kind == "conv2d":
            p = spec.params
            total += p["out_ch"] * (p["in_ch"] * p["kernel"] ** 2 + 1)
        elif spec.kind == "dense":
            total += spec.params["out_dim"] * (spec.params["in_dim"] + 1)
        elif spec.kind == "batchnorm":
            total += 2 * graph.shape(spec.id)[1]
    return total


# ---------------------------------------------------------------------------
# Pruning plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PruningPlan:
    """Exact (layer, removed output-channel indices) set plus expected deltas.

    The deltas are recomputed from the whole graph when the plan is built, so
    they account for inter-layer interactions (a consumer pruned on both its
    input and output side, selection layers, flatten blocks).
    """

    entries: tuple  # of (layer_id, tuple of removed indices)
    expected_flop_delta: int
    expected_param_delta: int
    metric: str = ""
    alpha: float | None = None
    k: int | None = None
    samples: int | None = None
    seed: int | None = None


def _validated_entries(graph, entries):
    out, seen = [], set()
    for layer_id, removed in entries:
        if layer_id in seen:
            raise GraphError(f"plan names layer {layer_id} twice")
        seen.add(layer_id)
        if not graph.is_prunable(layer_id):
            raise GraphError(f"plan targets unprunable layer {layer_id}")
        width = graph.out_width(layer_id)
        idx = sorted(int(i) for i in removed)
        if len(set(idx)) != len(idx):
            raise GraphError(f"plan for {layer_id} repeats channel indices")
        if idx and (idx[0] < 0 or idx[-1] >= width):
            raise GraphError(f"plan for {layer_id} has channel index out of [0, {width})")
        if len(idx) >= width:
            raise GraphError(f"plan would remove all {width} channels of {layer_id}")
        out.append((layer_id, tuple(idx)))
    return tuple(out)


def apply_plan_graph(graph, plan) -> NetworkGraph:
    """Structure-level plan application; returns a revalidated graph.

    Producer output widths shrink, consumer input widths shrink with them;
    a channel_select entry shrinks its kept-channel list (positions in the
    plan index the select's output), leaving the skip path's width alone.
    """
    entries = _validated_entries(graph, plan.entries)
    new_params = {}

    def params_of(lid):
        if lid not in new_params:
            new_params[lid] = dict(graph.layer(lid).params)
        return new_params[lid]

    for layer_id, removed in entries:
        if not removed:
            continue
        k = len(removed)
        spec = graph.layer(layer_id)
        if spec.kind == "conv2d":
            params_of(layer_id)["out_ch"] -= k
        elif spec.kind == "dense":
            params_of(layer_id)["out_dim"] -= k
        else:
            keep = params_of(layer_id)["keep"]
            gone = set(removed)
            params_of(layer_id)["keep"] = [v for pos, v in enumerate(keep)
                                           if pos not in gone]
        effects = removal_effects(graph, layer_id)
        for cid in effects.conv_consumers:
            params_of(cid)["in_ch"] -= k
        for cid, block in effects.dense_consumers:
            params_of(cid)["in_dim"] -= k * block
    return graph.replace_layers(new_params)


def floss(graph, layer_id) -> int:
    """Network-wide FLOP reduction from removing one output channel.

    Computed by cloning the graph, removing the layer's last channel, and
    recomputing the total; the FLOP model is linear in channel count so any
    index gives the same answer.
    """
    if not graph.is_prunable(layer_id):
        raise GraphError(f"layer {layer_id} is not prunable")
    width = graph.out_width(layer_id)
    probe = PruningPlan(((layer_id, (width - 1,)),), 0, 0)
    value = flop_count(graph) - flop_count(apply_plan_graph(graph, probe))
    if value <= 0:
        raise GraphError(f"layer {layer_id} has non-positive single-channel FLOP loss")
    return value


@dataclass(frozen=True)
class FlossEntry:
    layer_id: str
    width: int
    floss: int
    n_channels: int


@dataclass(frozen=True)
class FlossTable:
    """Per-layer single-channel FLOP loss and pruning channel counts."""

    alpha: float
    entries: tuple

    @property
    def floss_max(self) -> int:
        return max(e.floss for e in self.entries)

    def entry(self, layer_id) -> FlossEntry:
        for e in self.entries:
            if e.layer_id == layer_id:
                return e
        raise GraphError(f"layer {layer_id} not in FLOSS table")


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5))


def pruning_counts(graph, alpha: float) -> FlossTable:
    """FLOSS table with n = round(alpha * FLOSS_max / FLOSS_l) per layer.

    Rounding is half-away-from-zero and n is clamped to [0, width-1] so at
    least one channel always survives. The layer attaining FLOSS_max gets
    round(alpha) by construction.
    """
    if alpha <= 0:
        raise GraphError(f"alpha must be > 0, got {alpha}")
    prunable = graph.prunable_layers()
    if not prunable:
        raise GraphError("graph has no prunable layers")
    losses = [(lid, graph.out_width(lid), floss(graph, lid)) for lid in prunable]
    fmax = max(f for _, _, f in losses)
    entries = []
    for lid, width, f in losses:
        n = _round_half_away(alpha * fmax / f)
        entries.append(FlossEntry(lid, width, f, min(max(n, 0), width - 1)))
    return FlossTable(alpha, tuple(entries))


def build_plan(graph, table, rankings, selected, metric: str = "",
               k: int | None = None, samples: int | None = None,
               seed: int | None = None) -> PruningPlan:
    """Assemble a plan pruning each selected layer's n lowest-ranked channels.

    `rankings` maps layer id to channel indices in ascending score order (at
    least n_l long). Expected FLOP/parameter deltas are measured by applying
    the plan to a clone and diffing the totals.
    """
    if not selected:
        raise GraphError("no layers selected for pruning")
    entries = []
    for lid in selected:
        entry = table.entry(lid)
        if entry.n_channels < 1:
            raise GraphError(f"selected layer {lid} has n = 0 this iteration")
        ranked = rankings.get(lid)
        if ranked is None or len(ranked) < entry.n_channels:
            raise GraphError(f"ranking for {lid} is missing or shorter than "
                             f"{entry.n_channels}")
        entries.append((lid, tuple(sorted(ranked[:entry.n_channels]))))
    probe = PruningPlan(tuple(entries), 0, 0)
    pruned = apply_plan_graph(graph, probe)
    return PruningPlan(tuple(entries),
                       flop_count(graph) - flop_count(pruned),
                       param_count(graph) - param_count(pruned),
                       metric=metric, alpha=table.alpha, k=k,
                       samples=samples, seed=seed)


# ---------------------------------------------------------------------------
# JSON serialization
# ---------------------------------------------------------------------------

def graph_to_json(graph) -> dict:
    layers = []
    for spec in graph.layers:
        entry = {"id": spec.id, "kind": spec.kind, "params": dict(spec.params),
                 "inputs": list(spec.inputs)}
        if spec.prunable is not None:
            entry["prunable"] = spec.prunable
        layers.append(entry)
    return {"version": SCHEMA_VERSION, "input_shape": list(graph.input_shape),
            "layers": layers}


def graph_from_json(doc) -> NetworkGraph:
    if not isinstance(doc, dict):
        raise GraphError("architecture document must be a JSON object")
    if doc.get("version") != SCHEMA_VERSION:
        raise GraphError(f"unsupported architecture schema version {doc.get('version')!r}")
    try:
        layers = [LayerSpec(str(entry["id"]), str(entry["kind"]),
                            dict(entry.get("params", {})),
                            tuple(entry.get("inputs", [INPUT_ID])),
                            entry.get("prunable"))
                  for entry in doc["layers"]]
        return NetworkGraph(doc["input_shape"], layers)
    except (KeyError, TypeError) as exc:
        raise GraphError(f"malformed architecture document: {exc}") from exc


def save_graph(graph, path) -> None:
    with open(path, "w") as f:
        json.dump(graph_to_json(graph), f, indent=1)
        f.write("\n")


def load_graph(path) -> NetworkGraph:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise GraphError(f"architecture file is not valid JSON: {exc}") from exc
    return graph_from_json(doc)


def plan_to_json(plan) -> dict:
    return {"version": SCHEMA_VERSION,
            "metric": plan.metric,
            "alpha": plan.alpha,
            "k": plan.k,
            "samples": plan.samples,
            "seed": plan.seed,
            "entries": [{"layer": lid, "channels": list(idx)}
                        for lid, idx in plan.entries],
            "expected_flop_delta": plan.expected_flop_delta,
            "expected_param_delta": plan.expected_param_delta}


def plan_from_json(doc) -> PruningPlan:
    if not isinstance(doc, dict):
        raise GraphError("plan document must be a JSON object")
    if doc.get("version") != SCHEMA_VERSION:
        raise GraphError(f"unsupported plan schema version {doc.get('version')!r}")
    try:
        entries = tuple((str(e["layer"]), tuple(int(c) for c in e["channels"]))
                        for e in doc["entries"])
        return PruningPlan(entries,
                           int(doc["expected_flop_delta"]),
                           int(doc["expected_param_delta"]),
                           metric=doc.get("metric", ""),
                           alpha=doc.get("alpha"),
                           k=doc.get("k"),
                           samples=doc.get("samples"),
                           seed=doc.get("seed"))
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphError(f"malformed plan document: {exc}") from exc


def save_plan(plan, path) -> None:
    with open(path, "w") as f:
        json.dump(plan_to_json(plan), f, indent=1)
        f.write("\n")


def load_plan(path) -> PruningPlan:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise GraphError(f"plan file is not valid JSON: {exc}") from exc
    return plan_from_json(doc)
