"""Reference architectures encoded in the graph IR.

These exist for exact FLOP/parameter accounting and as ready-made inputs for
the floss/plan commands; the engine is not meant to run them (no reference
weights ship with the package). Both use 224x224 inputs and 1000 classes.

vgg16: 13 convs (3x3, pad 1) + 3 fully connected layers, biases, no
batchnorm. The fully connected layers are marked unprunable: they hold under
1% of the FLOPs, so normalized channel removal is never cost-effective there.

resnet50: bottleneck blocks with the stride-2 convolution on the 3x3 (the
variant whose per-block FLOPs match the published accounting), batchnorm
after every convolution, and a channel-selection layer at each block entry
feeding the first trunk convolution while the skip path keeps full width.
"""

from __future__ import annotations

from .netgraph import LayerSpec, NetworkGraph, channel_select, conv2d, dense, pool, simple


def vgg16() -> NetworkGraph:
    cfg = [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)]
    layers = []
    prev, in_ch = "input", 3
    for stage, (reps, width) in enumerate(cfg, start=1):
        for rep in range(1, reps + 1):
            cid = f"conv{stage}_{rep}"
            layers.append(conv2d(cid, in_ch, width, 3, 1, 1, inputs=prev))
            layers.append(simple(f"relu{stage}_{rep}", "relu", cid))
            prev, in_ch = f"relu{stage}_{rep}", width
        layers.append(pool(f"pool{stage}", "maxpool", 2, 2, inputs=prev))
        prev = f"pool{stage}"
    layers.append(simple("flat", "flatten", prev))
    layers.append(dense("fc_1", 512 * 7 * 7, 4096, inputs="flat", prunable=False))
    layers.append(simple("relu_fc1", "relu", "fc_1"))
    layers.append(dense("fc_2", 4096, 4096, inputs="relu_fc1", prunable=False))
    layers.append(simple("relu_fc2", "relu", "fc_2"))
    layers.append(dense("fc_3", 4096, 1000, inputs="relu_fc2"))
    layers.append(simple("prob", "softmax", "fc_3"))
    return NetworkGraph((3, 224, 224), layers)


def _bottleneck(layers, name, prev, in_ch, width, out_ch, stride):
    """One bottleneck block: entry selection, 1x1 / 3x3(stride) / 1x1 trunk,
    projection on the skip when the shape changes."""
    sel = f"{name}_select"
    layers.append(channel_select(sel, range(in_ch), inputs=prev))
    layers.append(conv2d(f"{name}_a", in_ch, width, 1, 1, 0, inputs=sel))
    layers.append(LayerSpec(f"{name}_a_bn", "batchnorm", {}, (f"{name}_a",)))
    layers.append(simple(f"{name}_a_relu", "relu", f"{name}_a_bn"))
    layers.append(conv2d(f"{name}_b", width, width, 3, stride, 1, inputs=f"{name}_a_relu"))
    layers.append(LayerSpec(f"{name}_b_bn", "batchnorm", {}, (f"{name}_b",)))
    layers.append(simple(f"{name}_b_relu", "relu", f"{name}_b_bn"))
    layers.append(conv2d(f"{name}_c", width, out_ch, 1, 1, 0, inputs=f"{name}_b_relu"))
    layers.append(LayerSpec(f"{name}_c_bn", "batchnorm", {}, (f"{name}_c",)))
    skip = prev
    if stride != 1 or in_ch != out_ch:
        layers.append(conv2d(f"{name}_down", in_ch, out_ch, 1, stride, 0, inputs=prev))
        layers.append(LayerSpec(f"{name}_down_bn", "batchnorm", {}, (f"{name}_down",)))
        skip = f"{name}_down_bn"
    layers.append(LayerSpec(f"{name}_add", "add", {}, (f"{name}_c_bn", skip)))
    layers.append(simple(f"{name}_out", "relu", f"{name}_add"))
    return f"{name}_out"


def resnet50() -> NetworkGraph:
    layers = [
        conv2d("conv1", 3, 64, 7, 2, 3, inputs="input"),
        LayerSpec("conv1_bn", "batchnorm", {}, ("conv1",)),
        simple("conv1_relu", "relu", "conv1_bn"),
        pool("pool1", "maxpool", 3, 2, 1, inputs="conv1_relu"),
    ]
    prev, in_ch = "pool1", 64
    stages = [(3, 64, 256, 1), (4, 128, 512, 2), (6, 256, 1024, 2), (3, 512, 2048, 2)]
    for stage, (blocks, width, out_ch, first_stride) in enumerate(stages, start=1):
        for block in range(1, blocks + 1):
            stride = first_stride if block == 1 else 1
            prev = _bottleneck(layers, f"res{stage}_{block}", prev,
                               in_ch, width, out_ch, stride)
            in_ch = out_ch
    layers.append(pool("gap", "avgpool", 7, 1, inputs=prev))
    layers.append(simple("flat", "flatten", "gap"))
    layers.append(dense("fc1", 2048, 1000, inputs="flat"))
    layers.append(simple("prob", "softmax", "fc1"))
    return NetworkGraph((3, 224, 224), layers)


REFERENCE_BUILDERS = {"vgg16": vgg16, "resnet50": resnet50}
