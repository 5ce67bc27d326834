import numpy as np
import pytest

from chanprune import engine, netgraph as ng, synth

from conftest import (chain_graph, conv2d_sixloop_oracle, masked_forward,
                      residual_graph, zero_mask_for_plan)


def _weights_for(graph, seed=0):
    return synth.random_weights(graph, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# Layer semantics
# ---------------------------------------------------------------------------

def test_identity_conv_passes_input_through(rng):
    g = ng.NetworkGraph((3, 5, 5), [
        ng.conv2d("c", 3, 3, 1),
        ng.simple("f", "flatten", "c"),
        ng.dense("d", 75, 2, inputs="f"),
    ])
    w = engine.WeightStore({
        "c": {"weight": np.eye(3).reshape(3, 3, 1, 1), "bias": np.zeros(3)},
        "d": {"weight": np.zeros((2, 75)), "bias": np.zeros(2)},
    })
    x = rng.standard_normal((4, 3, 5, 5)).astype(np.float32)
    _, caps = engine.forward(g, w, x, capture=("c",), capture_mode="pre")
    np.testing.assert_array_equal(caps["c"], x)


def test_conv2d_matches_sixloop_oracle(rng):
    for stride, padding in [(1, 0), (1, 1), (2, 1), (2, 3)]:
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        got = engine._conv2d(x, w, b, stride, padding)
        want = conv2d_sixloop_oracle(x, w, b, stride, padding)
        np.testing.assert_allclose(got, want, atol=1e-5)


def test_dense_matches_matmul_oracle(rng):
    g = ng.NetworkGraph((6, 1, 1), [
        ng.simple("f", "flatten", "input"),
        ng.dense("d", 6, 4, inputs="f"),
    ])
    w = _weights_for(g)
    x = rng.standard_normal((5, 6, 1, 1)).astype(np.float32)
    out, _ = engine.forward(g, w, x)
    weight, bias = w.layer("d")["weight"], w.layer("d")["bias"]
    want = np.zeros((5, 4))
    for s in range(5):
        for o in range(4):
            want[s, o] = sum(float(weight[o, i]) * float(x[s, i, 0, 0])
                             for i in range(6)) + float(bias[o])
    np.testing.assert_allclose(out, want, atol=1e-6)


def test_residual_block_with_zero_trunk_is_identity():
    g = residual_graph(channels=4)
    w = _weights_for(g, seed=3)
    for lid in ("trunk_a", "trunk_b"):
        w.arrays[lid]["weight"][:] = 0.0
        w.arrays[lid]["bias"][:] = 0.0
    # neutral batchnorm on the trunk
    w.arrays["trunk_a_bn"] = {"scale": np.ones(5), "shift": np.zeros(5),
                              "running_mean": np.zeros(5), "running_var": np.ones(5)}
    x = np.abs(np.random.default_rng(0).standard_normal((3, 2, 8, 8))).astype(np.float32)
    _, caps = engine.forward(g, w, x, capture=("stem_relu", "join"), capture_mode="pre")
    np.testing.assert_allclose(caps["join"], caps["stem_relu"], atol=1e-6)


def test_batchnorm_inference_formula(rng):
    g = ng.NetworkGraph((2, 2, 2), [
        ng.LayerSpec("bn", "batchnorm", {}, ("input",)),
        ng.simple("f", "flatten", "bn"),
        ng.dense("d", 8, 2, inputs="f"),
    ])
    w = _weights_for(g, seed=4)
    x = rng.standard_normal((3, 2, 2, 2)).astype(np.float32)
    _, caps = engine.forward(g, w, x, capture=("bn",), capture_mode="pre")
    bn = w.layer("bn")
    want = ((x - bn["running_mean"].reshape(1, -1, 1, 1))
            / np.sqrt(bn["running_var"].reshape(1, -1, 1, 1) + 1e-5)
            * bn["scale"].reshape(1, -1, 1, 1) + bn["shift"].reshape(1, -1, 1, 1))
    np.testing.assert_allclose(caps["bn"], want, atol=1e-6)


def test_pooling_matches_naive(rng):
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    got_max = engine._maxpool(x, 2, 2, 0)
    got_avg = engine._avgpool(x, 2, 2, 0)
    for s in range(2):
        for c in range(3):
            for i in range(3):
                for j in range(3):
                    window = x[s, c, 2 * i:2 * i + 2, 2 * j:2 * j + 2]
                    assert got_max[s, c, i, j] == window.max()
                    assert got_avg[s, c, i, j] == pytest.approx(window.mean(), abs=1e-6)


def test_maxpool_with_padding(rng):
    x = -np.abs(rng.standard_normal((1, 1, 3, 3))).astype(np.float32)
    out = engine._maxpool(x, 3, 2, 1)
    # padded border is -inf, so corners reduce over the interior only
    assert out.shape == (1, 1, 2, 2)
    assert out[0, 0, 0, 0] == x[0, 0, :2, :2].max()


def test_channel_select_copies_kept_channels(rng):
    g = ng.NetworkGraph((4, 2, 2), [
        ng.channel_select("sel", [0, 2], inputs="input"),
        ng.simple("f", "flatten", "sel"),
        ng.dense("d", 8, 2, inputs="f"),
    ])
    w = _weights_for(g)
    x = rng.standard_normal((3, 4, 2, 2)).astype(np.float32)
    _, caps = engine.forward(g, w, x, capture=("sel",))
    np.testing.assert_array_equal(caps["sel"], x[:, [0, 2]])


def test_softmax_rows_normalize(rng):
    g = ng.NetworkGraph((3, 1, 1), [
        ng.simple("f", "flatten", "input"),
        ng.dense("d", 3, 3, inputs="f"),
        ng.simple("p", "softmax", "d"),
    ])
    w = _weights_for(g)
    out, _ = engine.forward(g, w, rng.standard_normal((4, 3, 1, 1)).astype(np.float32))
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
    assert (out > 0).all()


def test_forward_is_deterministic(rng):
    g, w = synth.random_toy_network(np.random.default_rng(5))
    x = rng.standard_normal((4,) + g.input_shape).astype(np.float32)
    a, _ = engine.forward(g, w, x)
    b, _ = engine.forward(g, w, x)
    np.testing.assert_array_equal(a, b)


def test_forward_shape_errors_are_reported():
    g = chain_graph()
    w = _weights_for(g)
    with pytest.raises(engine.EngineError, match="batch shape"):
        engine.forward(g, w, np.zeros((2, 5, 32, 32), np.float32))
    bad = engine.WeightStore({**w.arrays,
                              "convA": {"weight": np.zeros((8, 3, 5, 5)),
                                        "bias": np.zeros(8)}})
    with pytest.raises(engine.EngineError, match="convA"):
        engine.validate_weights(g, bad)


# ---------------------------------------------------------------------------
# Accuracy
# ---------------------------------------------------------------------------

def _diagonal_readout_model(classes=3):
    """Network whose logits are the per-channel values of a [C,1,1] input."""
    g = ng.NetworkGraph((classes, 1, 1), [
        ng.simple("f", "flatten", "input"),
        ng.dense("d", classes, classes, inputs="f"),
        ng.simple("p", "softmax", "d"),
    ])
    w = engine.WeightStore({"d": {"weight": np.eye(classes), "bias": np.zeros(classes)}})
    return g, w


def test_accuracy_one_for_one_hot_network(rng):
    g, w = _diagonal_readout_model(3)
    labels = rng.integers(0, 3, 30)
    inputs = np.eye(3, dtype=np.float32)[labels].reshape(30, 3, 1, 1)
    ds = engine.Dataset(inputs, labels.astype(np.int64))
    assert engine.evaluate_accuracy(g, w, ds) == 1.0


def test_accuracy_one_over_c_for_constant_network():
    g, w = _diagonal_readout_model(4)
    inputs = np.zeros((40, 4, 1, 1), np.float32)   # all logits tie -> argmax 0
    labels = np.tile(np.arange(4), 10).astype(np.int64)
    assert engine.evaluate_accuracy(g, w, engine.Dataset(inputs, labels)) == 0.25


def test_accuracy_matches_per_sample_oracle(rng):
    g, w = synth.random_toy_network(np.random.default_rng(2))
    n, classes = 32, g.out_width(g.output_id)
    inputs = rng.standard_normal((n,) + g.input_shape).astype(np.float32)
    labels = rng.integers(0, classes, n).astype(np.int64)
    ds = engine.Dataset(inputs, labels)
    correct = 0
    for i in range(n):
        out, _ = engine.forward(g, w, inputs[i:i + 1])
        correct += int(np.argmax(out[0]) == labels[i])
    assert engine.evaluate_accuracy(g, w, ds) == correct / n


def test_accuracy_invariant_under_logit_rescale(rng):
    g, w = synth.random_toy_network(np.random.default_rng(8))
    n = 20
    inputs = rng.standard_normal((n,) + g.input_shape).astype(np.float32)
    labels = rng.integers(0, g.out_width(g.output_id), n).astype(np.int64)
    ds = engine.Dataset(inputs, labels)
    base = engine.evaluate_accuracy(g, w, ds)
    w.arrays["fc2"]["weight"] = w.arrays["fc2"]["weight"] * 7.0
    w.arrays["fc2"]["bias"] = w.arrays["fc2"]["bias"] * 7.0
    assert engine.evaluate_accuracy(g, w, ds) == base


# ---------------------------------------------------------------------------
# Capture
# ---------------------------------------------------------------------------

def test_capture_input_returns_dataset(rng):
    g = chain_graph()
    w = _weights_for(g)
    inputs = rng.standard_normal((5, 3, 32, 32)).astype(np.float32)
    ds = engine.Dataset(inputs, np.zeros(5, np.int64))
    acts = engine.capture_activations(g, w, ds, "input")
    np.testing.assert_array_equal(acts, inputs)


def test_capture_post_takes_following_relu(rng):
    g = synth.fixture_graph()
    w = synth.fixture_weights()
    ds = synth.fixture_dataset(0, 16)
    pre = engine.capture_activations(g, w, ds, "conv1", mode="pre")
    post = engine.capture_activations(g, w, ds, "conv1", mode="post")
    relu = engine.capture_activations(g, w, ds, "relu1", mode="pre")
    np.testing.assert_array_equal(post, relu)
    np.testing.assert_array_equal(post, np.maximum(pre, 0.0))
    assert (pre < 0).any()   # the modes genuinely differ on this data


def test_capture_dense_layer_gets_unit_spatial(rng):
    g = synth.fixture_graph()
    w = synth.fixture_weights()
    ds = synth.fixture_dataset(1, 8)
    acts = engine.capture_activations(g, w, ds, "fc1")
    assert acts.shape == (8, 16, 1, 1)


def test_capture_unknown_layer():
    g = chain_graph()
    w = _weights_for(g)
    ds = engine.Dataset(np.zeros((2, 3, 32, 32), np.float32), np.zeros(2, np.int64))
    with pytest.raises(ng.GraphError, match="unknown layer"):
        engine.capture_activations(g, w, ds, "nope")


# ---------------------------------------------------------------------------
# Weight-level pruning
# ---------------------------------------------------------------------------

def test_pruning_zero_channels_is_bit_identical(rng):
    g, w = synth.random_toy_network(np.random.default_rng(11))
    plan = ng.PruningPlan((), 0, 0)
    g2, w2 = engine.apply_plan_weights(g, w, plan)
    x = rng.standard_normal((4,) + g.input_shape).astype(np.float32)
    a, _ = engine.forward(g, w, x)
    b, _ = engine.forward(g2, w2, x)
    np.testing.assert_array_equal(a, b)


def test_masked_equivalence_chain(rng):
    g = chain_graph()
    w = _weights_for(g, seed=21)
    plan = ng.PruningPlan((("convA", (0, 3)), ("convB", (2, 7, 9))), 0, 0)
    g2, w2 = engine.apply_plan_weights(g, w, plan)
    x = rng.standard_normal((6, 3, 32, 32)).astype(np.float32)
    pruned, _ = engine.forward(g2, w2, x)
    masked = masked_forward(g, w, plan, x)
    np.testing.assert_allclose(pruned, masked, atol=1e-5)


def test_masked_equivalence_residual_select(rng):
    g = residual_graph(channels=4)
    w = _weights_for(g, seed=22)
    plan = ng.PruningPlan((("sel", (1, 2)), ("trunk_a", (0,))), 0, 0)
    g2, w2 = engine.apply_plan_weights(g, w, plan)
    x = rng.standard_normal((5, 2, 8, 8)).astype(np.float32)
    pruned, _ = engine.forward(g2, w2, x)
    masked = masked_forward(g, w, plan, x)
    np.testing.assert_allclose(pruned, masked, atol=1e-5)
    # mask set must cover the batchnorm on trunk_a's passthrough chain
    assert "trunk_a_bn" in zero_mask_for_plan(g, plan)


def test_flop_drop_matches_plan_delta(rng):
    g, w = synth.random_toy_network(np.random.default_rng(13))
    table = ng.pruning_counts(g, 2.0)
    eligible = [e.layer_id for e in table.entries if e.n_channels >= 1]
    rankings = {lid: list(range(g.out_width(lid))) for lid in eligible}
    plan = ng.build_plan(g, table, rankings, eligible)
    g2, w2 = engine.apply_plan_weights(g, w, plan)
    assert ng.flop_count(g) - ng.flop_count(g2) == plan.expected_flop_delta
    x = rng.standard_normal((2,) + g.input_shape).astype(np.float32)
    engine.forward(g2, w2, x)   # pruned model still runs


def test_weights_manifest_round_trip(tmp_path, rng):
    g, w = synth.random_toy_network(np.random.default_rng(17))
    engine.save_weights(w, tmp_path / "weights")
    back = engine.load_weights(tmp_path / "weights")
    engine.validate_weights(g, back)
    for lid, named in w.arrays.items():
        for name, arr in named.items():
            np.testing.assert_array_equal(back.arrays[lid][name], arr)
    x = rng.standard_normal((3,) + g.input_shape).astype(np.float32)
    a, _ = engine.forward(g, w, x)
    b, _ = engine.forward(g, back, x)
    np.testing.assert_array_equal(a, b)


def test_dataset_round_trip(tmp_path):
    ds = synth.fixture_dataset(3, 10)
    engine.save_dataset(ds, tmp_path / "x.ptsr", tmp_path / "y.plbl")
    back = engine.load_dataset(tmp_path / "x.ptsr", tmp_path / "y.plbl")
    np.testing.assert_array_equal(back.inputs, ds.inputs)
    np.testing.assert_array_equal(back.labels, ds.labels)
