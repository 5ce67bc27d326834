import numpy as np
import pytest

from chanprune import engine, metrics, netgraph as ng, sensitivity as sens, synth


@pytest.fixture(scope="module")
def fixture_model():
    return synth.fixture_graph(), synth.fixture_weights()


@pytest.fixture(scope="module")
def fixture_data():
    return synth.fixture_dataset(11, 300), synth.fixture_dataset(12, 400)


def _cfg(**kw):
    base = dict(alpha=2.0, k=2, metric="gsd", seed=0)
    base.update(kw)
    return sens.RunConfig(**base)


def test_run_config_validation():
    with pytest.raises(ValueError):
        sens.RunConfig(alpha=0.0)
    with pytest.raises(ValueError):
        sens.RunConfig(k=0)
    with pytest.raises(ValueError):
        sens.RunConfig(metric="l1norm")
    with pytest.raises(ValueError):
        sens.RunConfig(capture="during")


def test_analyze_dead_channels_keep_baseline(fixture_model, fixture_data):
    # fixture noise channels have zero downstream weights, so every
    # temporarily-pruned candidate scores exactly the baseline accuracy
    graph, weights = fixture_model
    val, scoring = fixture_data
    report = sens.analyze(graph, weights, val, scoring, _cfg())
    assert report.baseline_accuracy == 1.0
    assert len(report.rows) == 4
    for row in report.rows:
        assert row.accuracy == report.baseline_accuracy


def test_analyze_does_not_mutate_inputs(fixture_model, fixture_data):
    graph, weights = fixture_model
    val, scoring = fixture_data
    before = {lid: {k: v.copy() for k, v in named.items()}
              for lid, named in weights.arrays.items()}
    widths = {spec.id: graph.out_width(spec.id) for spec in graph.layers}
    sens.analyze(graph, weights, val, scoring, _cfg())
    for lid, named in before.items():
        for name, arr in named.items():
            np.testing.assert_array_equal(weights.arrays[lid][name], arr)
    assert {spec.id: graph.out_width(spec.id) for spec in graph.layers} == widths


def test_analyze_is_deterministic_and_thread_invariant(fixture_model, fixture_data):
    graph, weights = fixture_model
    val, scoring = fixture_data
    a = sens.analyze(graph, weights, val, scoring, _cfg(metric="mmd"))
    b = sens.analyze(graph, weights, val, scoring, _cfg(metric="mmd", threads=3))
    assert a.rows == b.rows
    assert a.rankings == b.rankings


def test_symmetric_parallel_layers_get_identical_accuracy(rng):
    # two parallel trunks with identical weights joined by one add: their
    # entry selects are both prunable and perfectly symmetric
    layers = [
        ng.conv2d("stem", 3, 4, 3, 1, 1),
        ng.simple("stem_relu", "relu", "stem"),
        ng.channel_select("selA", range(4), inputs="stem_relu"),
        ng.channel_select("selB", range(4), inputs="stem_relu"),
        ng.conv2d("convA", 4, 4, 3, 1, 1, inputs="selA"),
        ng.conv2d("convB", 4, 4, 3, 1, 1, inputs="selB"),
        ng.LayerSpec("join", "add", {}, ("convA", "convB")),
        ng.simple("join_relu", "relu", "join"),
        ng.simple("flat", "flatten", "join_relu"),
        ng.dense("fc", 4 * 36, 3, inputs="flat"),
        ng.simple("prob", "softmax", "fc"),
    ]
    graph = ng.NetworkGraph((3, 6, 6), layers)
    weights = synth.random_weights(graph, np.random.default_rng(4))
    weights.arrays["convB"] = {k: v.copy() for k, v in weights.arrays["convA"].items()}
    inputs = rng.standard_normal((60, 3, 6, 6)).astype(np.float32)
    labels = rng.integers(0, 3, 60).astype(np.int64)
    ds = engine.Dataset(inputs, labels)
    report = sens.analyze(graph, weights, ds, ds, _cfg(k=1))
    accs = {row.layer_id: row.accuracy for row in report.rows}
    assert accs["selA"] == accs["selB"]


def test_analyze_matches_hand_scripted_loop(fixture_model, fixture_data):
    # independently scripted prune-then-evaluate pass over each layer
    graph, weights = fixture_model
    val, scoring = fixture_data
    cfg = _cfg()
    report = sens.analyze(graph, weights, val, scoring, cfg)
    table = ng.pruning_counts(graph, cfg.alpha)
    order = {spec.id: i for i, spec in enumerate(graph.layers)}
    num_classes = graph.out_width(graph.output_id)
    for row in report.rows:
        entry = table.entry(row.layer_id)
        acts = engine.capture_activations(graph, weights, scoring, row.layer_id)
        scores = metrics.score_layer(acts, scoring.labels, num_classes, "gsd",
                                     layer_id=row.layer_id,
                                     seed=sens.layer_seed(0, order[row.layer_id]))
        chans = metrics.rank_channels(scores, entry.n_channels)
        plan = ng.PruningPlan(((row.layer_id, tuple(sorted(chans))),), 0, 0)
        g2, w2 = engine.apply_plan_weights(graph, weights, plan)
        assert engine.evaluate_accuracy(g2, w2, val) == row.accuracy
        assert row.floss == entry.floss
        assert row.n_channels == entry.n_channels


def test_rows_ordered_by_accuracy_then_layer_order(fixture_model, fixture_data):
    graph, weights = fixture_model
    val, scoring = fixture_data
    report = sens.analyze(graph, weights, val, scoring, _cfg())
    # all accuracies tie at baseline, so the tie rule fixes the order
    assert [r.layer_id for r in report.rows] == ["conv1", "conv2", "conv3", "conv4"]


def test_excluded_layers_are_reported(fixture_model, fixture_data):
    graph, weights = fixture_model
    val, scoring = fixture_data
    report = sens.analyze(graph, weights, val, scoring, _cfg(alpha=0.3, k=1))
    assert {e.layer_id for e in report.excluded} == {"conv1", "conv2"}
    assert {r.layer_id for r in report.rows} == {"conv3", "conv4"}


def test_scoring_subsample_is_seeded(fixture_model, fixture_data):
    graph, weights = fixture_model
    val, scoring = fixture_data
    a = sens.analyze(graph, weights, val, scoring, _cfg(scoring_samples=100))
    b = sens.analyze(graph, weights, val, scoring, _cfg(scoring_samples=100))
    assert a.rankings == b.rankings


def test_select_and_plan_topk(fixture_model, fixture_data):
    graph, weights = fixture_model
    val, scoring = fixture_data
    cfg = _cfg(k=2)
    report = sens.analyze(graph, weights, val, scoring, cfg)
    plan = sens.select_and_plan(graph, report, cfg)
    # ties resolve toward earlier layers
    assert [lid for lid, _ in plan.entries] == ["conv1", "conv2"]
    assert all(len(idx) == 2 for _, idx in plan.entries)

    all_cfg = _cfg(k=4)
    plan_all = sens.select_and_plan(graph, sens.analyze(graph, weights, val,
                                                        scoring, all_cfg), all_cfg)
    assert len(plan_all.entries) == 4

    with pytest.raises(ValueError, match="exceeds"):
        sens.select_and_plan(graph, report, _cfg(k=9))


def test_single_cycle_iterate_equals_manual(fixture_model, fixture_data):
    graph, weights = fixture_model
    val, scoring = fixture_data
    cfg = _cfg()
    results = list(sens.iterate(graph, weights, val, scoring, cfg, cycles=1))
    assert len(results) == 1
    report = sens.analyze(graph, weights, val, scoring, cfg)
    plan = sens.select_and_plan(graph, report, cfg)
    assert results[0].plan == plan
    manual_graph, _ = engine.apply_plan_weights(graph, weights, plan)
    assert ng.flop_count(results[0].graph) == ng.flop_count(manual_graph)


def test_iterate_flops_strictly_decrease(fixture_model, fixture_data):
    graph, weights = fixture_model
    val, scoring = fixture_data
    flops = [ng.flop_count(graph)]
    for result in sens.iterate(graph, weights, val, scoring, _cfg(k=1), cycles=3):
        flops.append(ng.flop_count(result.graph))
    assert all(b < a for a, b in zip(flops, flops[1:]))


def test_two_cycles_survive_save_load_round_trip(tmp_path, fixture_model, fixture_data):
    graph, weights = fixture_model
    val, scoring = fixture_data
    cfg = _cfg(k=1)
    direct = list(sens.iterate(graph, weights, val, scoring, cfg, cycles=2))

    first = next(iter(sens.iterate(graph, weights, val, scoring, cfg, cycles=1)))
    ng.save_graph(first.graph, tmp_path / "arch.json")
    engine.save_weights(first.weights, tmp_path / "weights")
    g2 = ng.load_graph(tmp_path / "arch.json")
    w2 = engine.load_weights(tmp_path / "weights")
    second = next(iter(sens.iterate(g2, w2, val, scoring, cfg, cycles=1)))

    assert direct[0].plan == first.plan
    assert direct[1].plan == second.plan
    assert ng.flop_count(direct[1].graph) == ng.flop_count(second.graph)


def test_report_files_round_trip(tmp_path, fixture_model, fixture_data):
    graph, weights = fixture_model
    val, scoring = fixture_data
    report = sens.analyze(graph, weights, val, scoring, _cfg())
    csv_path, json_path = tmp_path / "report.csv", tmp_path / "report.json"
    sens.write_report_csv(report, csv_path)
    sens.write_report_json(report, json_path)

    rows = sens.read_report_csv(csv_path)
    assert [r["layer_id"] for r in rows] == [r.layer_id for r in report.rows]
    assert all(r["baseline_acc"] == report.baseline_accuracy for r in rows)

    import json
    doc = json.loads(json_path.read_text())
    assert doc["version"] == 1
    assert doc["config"]["alpha"] == 2.0
    assert doc["config"]["metric_cfg"]["ridge_rho"] == 1e-4
    assert set(doc["rankings"]) == {r.layer_id for r in report.rows}

    bad = tmp_path / "bad.csv"
    bad.write_text("layer_id,n_channels,floss,acc,baseline_acc\na,1,5,0.1,0.9\nb,1,5,0.9,0.9\n")
    with pytest.raises(ValueError, match="ordered"):
        sens.read_report_csv(bad)


def test_labels_must_fit_output_width(fixture_model):
    graph, weights = fixture_model
    bad = engine.Dataset(np.zeros((4, 4, 8, 8), np.float32),
                         np.array([0, 1, 2, 7], np.int64))
    good = synth.fixture_dataset(0, 16)
    with pytest.raises(ValueError, match="labels exceed"):
        sens.analyze(graph, weights, bad, good, _cfg())
