import json

import numpy as np
import pytest

from emdispatch import predictor
from emdispatch.centrality import N_FEATURES, NormStats
from emdispatch.graph import (EMERGENCY, EVENT_SHORTAGE, PREVENTATIVE, RESCUE,
                              Scenario, WorkStationGraph)
from emdispatch.predictor import (Correction, FeedbackState, GACRNNModel,
                                  KeyNodePrediction, PredictorError,
                                  TrainConfig, apply_human_feedback, evaluate,
                                  metrics_from_confusion, predict_key_nodes,
                                  scheduled_sampling_prob, train)
from emdispatch.sim import EmergencySim, capture_dataset


def chain_scenario(n=20):
    nodes = list(range(n))
    edges = [(i, i + 1) for i in range(n - 1)]
    wsg = WorkStationGraph(nodes, edges, {e: 1.0 for e in edges},
                           {i: "storage" for i in nodes})
    return Scenario(wsg, [], {i: [("move", 10 ** 6, 1.0)] for i in nodes},
                    {i: (0, 10.0) for i in nodes})


@pytest.fixture(scope="module")
def toy():
    """Deterministic diffusion: the event frontier advances one hop per tick."""
    scenario = chain_scenario(20)

    def make_sim(i):
        start = (i * 7) % 20
        return EmergencySim(scenario, episode_ticks=26, seed=i,
                            events=[(0, start, EVENT_SHORTAGE)],
                            diffusion_rates={EVENT_SHORTAGE: 10.0})

    capture = capture_dataset(make_sim, runs=8, window=10)
    adjacency = scenario.build().base.adjacency
    return scenario, capture, adjacency


@pytest.fixture(scope="module")
def trained(toy):
    _, capture, adjacency = toy
    cfg = TrainConfig(epochs=25, batch_size=8, window=10, hidden=12, depth=2,
                      seed=0, lr=3e-3)
    model, history = train(capture.windows(), adjacency, cfg)
    return model, history, capture, adjacency


def fresh_model(window=10, n=6, seed=0):
    model = GACRNNModel(hidden=8, depth=2, seed=seed)
    model.window = window
    model.norm = NormStats(np.zeros(N_FEATURES), np.ones(N_FEATURES))
    return model


def test_forward_shape_and_distribution():
    model = fresh_model()
    rng = np.random.default_rng(0)
    history = rng.random((10, 6, N_FEATURES))
    adjacency = np.eye(6)
    probs = model.forward(history, adjacency)
    assert probs.shape == (10, 6, 3)
    assert np.allclose(probs.sum(axis=2), 1.0, atol=1e-6)
    assert (probs >= 0).all()
    # untrained head stays near uniform
    assert probs.max() < 0.7


def test_forward_shape_errors():
    model = fresh_model()
    with pytest.raises(PredictorError, match=r"\(10, N, 8\).*\(4, 6, 8\)"):
        model.forward(np.zeros((4, 6, N_FEATURES)), np.eye(6))
    with pytest.raises(PredictorError, match=r"adjacency"):
        model.forward(np.zeros((10, 6, N_FEATURES)), np.eye(5))
    model.norm = None
    with pytest.raises(PredictorError, match="normalization"):
        model.forward(np.zeros((10, 6, N_FEATURES)), np.eye(6))


def test_training_learns_the_diffusion_rule(trained, toy):
    model, history, capture, adjacency = trained
    # loss trends down over the first epochs
    assert history[4] < history[0]
    # frontier at node 12 after ticks 3..12 of the start-0 run: the model
    # must flag the next node to the right with probability above the bar
    run0 = [r for r in capture.records if r.run == 0]
    hist_in = np.stack([r.signal for r in run0[3:13]])
    probs = model.forward(hist_in, adjacency)
    assert probs[0, 13, EMERGENCY] > 0.5
    assert probs[0, 19, EMERGENCY] < 0.5


def test_gacrnn_beats_temporal_ablation(trained, toy):
    model, _, capture, adjacency = trained
    cfg = TrainConfig(epochs=25, batch_size=8, window=10, hidden=12, depth=2,
                      seed=0, lr=3e-3)
    ablation, _ = train(capture.windows(), adjacency, cfg, graph_mode="identity")
    m = evaluate(model, capture.windows(), adjacency)
    a = evaluate(ablation, capture.windows(), adjacency)
    assert m["macro_f1"] > a["macro_f1"]


def test_training_determinism(toy):
    _, capture, adjacency = toy
    cfg = TrainConfig(epochs=2, batch_size=8, window=10, hidden=8, depth=1, seed=5)
    _, h1 = train(capture.windows(), adjacency, cfg)
    _, h2 = train(capture.windows(), adjacency, cfg)
    assert h1 == h2


def test_training_rejects_empty():
    with pytest.raises(PredictorError):
        train([], np.eye(3), TrainConfig())


def test_scheduled_sampling_schedule():
    assert scheduled_sampling_prob(0) > 0.9
    assert scheduled_sampling_prob(200) < 1e-3
    probs = [scheduled_sampling_prob(e) for e in range(0, 100, 10)]
    assert all(a >= b for a, b in zip(probs, probs[1:]))


def test_horizon_causality(toy):
    # two captures identical through the history window, divergent afterwards
    scenario, _, adjacency = toy

    def run(extra_event):
        events = [(0, 0, EVENT_SHORTAGE)] + ([(14, 19, EVENT_SHORTAGE)]
                                             if extra_event else [])
        sim = EmergencySim(scenario, episode_ticks=20, seed=3, events=events,
                           diffusion_rates={EVENT_SHORTAGE: 10.0})
        signals = []
        for _ in range(20):
            signals.append(sim.signal().matrix)
            sim.step()
        return signals

    a = run(False)
    b = run(True)
    model = fresh_model(n=20)
    pa = model.forward(np.stack(a[3:13]), adjacency)
    pb = model.forward(np.stack(b[3:13]), adjacency)
    assert (pa == pb).all()


def test_predict_key_nodes_filtering():
    probs = np.zeros((10, 6, 3))
    probs[:, :, 0] = 1.0
    assert predict_key_nodes(probs, 5).entries == []

    probs = np.zeros((10, 10, 3))
    g = np.array([0.9, 0.6, 0.2, 0.95, 0.55, 0.7, 0.51, 0.8, 0.52, 0.63])
    probs[0, :, EMERGENCY] = g
    pred = predict_key_nodes(probs, 7)
    assert len(pred.entries) == 7
    assert pred.stations() == [3, 0, 7, 5, 9, 1, 4]

    tie = np.zeros((10, 4, 3))
    tie[0, :, EMERGENCY] = [0.8, 0.9, 0.9, 0.7]
    assert predict_key_nodes(tie, 2).stations() == [1, 2]

    with pytest.raises(PredictorError):
        predict_key_nodes(probs, 0)


def test_prediction_to_tasks():
    scenario = chain_scenario(4)
    sim = EmergencySim(scenario, seed=0, events=[(0, 1, EVENT_SHORTAGE)])
    pred = KeyNodePrediction([(1, 0.9), (2, 0.7)], tick=0, horizon=10)
    tasks = pred.to_tasks(sim, task_value=2.0, preventative_deadline=60)
    assert tasks[0].kind == RESCUE and tasks[0].station == 1
    assert tasks[0].deadline == sim.active_events[1].rescue_deadline
    assert tasks[1].kind == PREVENTATIVE and tasks[1].deadline == 60


def test_evaluate_perfect_and_one_class():
    confusion = np.diag([10, 5, 3])
    m = metrics_from_confusion(confusion)
    assert m["accuracy"] == 1.0 and m["f1"] == 1.0 and m["macro_f1"] == 1.0
    # everything predicted class 0 on a 50/50 split of classes 0 and 1
    confusion = np.array([[10, 0, 0], [10, 0, 0], [0, 0, 0]])
    m = metrics_from_confusion(confusion)
    assert m["accuracy"] == 0.5
    assert m["recall"] == 0.0


def test_evaluate_matches_independent_confusion_script(trained):
    model, _, capture, adjacency = trained
    samples = capture.windows()[:50]
    reported = evaluate(model, samples, adjacency)
    # oracle: standalone confusion-matrix calculation over a prediction dump
    confusion = np.zeros((3, 3), dtype=np.int64)
    for s in samples:
        pred = model.forward(s.inputs, adjacency).argmax(axis=2)
        for t in range(pred.shape[0]):
            for i in range(pred.shape[1]):
                confusion[s.labels[t, i], pred[t, i]] += 1
    assert reported["confusion"] == confusion.tolist()
    assert reported["accuracy"] == pytest.approx(np.trace(confusion) / confusion.sum())


def test_model_roundtrip(tmp_path, trained):
    model, _, capture, adjacency = trained
    path = tmp_path / "model.bin"
    model.save(path)
    loaded = GACRNNModel.load(path)
    assert loaded.graph_mode == model.graph_mode
    sample = capture.windows()[0]
    assert (loaded.forward(sample.inputs, adjacency)
            == model.forward(sample.inputs, adjacency)).all()


def test_model_version_mismatch(tmp_path):
    model = fresh_model()
    path = tmp_path / "model.bin"
    model.save(path)
    sidecar = path.with_suffix(".bin.json")
    data = json.loads(sidecar.read_text())
    data["format_version"] = 99
    sidecar.write_text(json.dumps(data))
    with pytest.raises(PredictorError, match="version"):
        GACRNNModel.load(path)


def test_human_feedback_add_delete_reset():
    state = FeedbackState()
    listed = {3, 4}
    apply_human_feedback(state, [Correction("add", 7, tick=12)], listed, 10)
    assert state.label_overrides[(12, 7)] == EMERGENCY
    apply_human_feedback(state, [Correction("delete", 3, tick=12)], listed, 10)
    assert state.label_overrides[(12, 3)] == 0
    # delete of an unlisted station is a no-op with a warning
    apply_human_feedback(state, [Correction("delete", 9, tick=12)], listed, 10)
    assert (12, 9) not in state.label_overrides
    apply_human_feedback(state, [Correction("reset", None, tick=13)], listed, 10)
    assert state.reset_requested
    assert [a["op"] for a in state.audit] == ["add", "delete", "reset"]
    with pytest.raises(PredictorError):
        apply_human_feedback(state, [Correction("add", 99, tick=1)], listed, 10)


def test_human_feedback_retrain_buffer(toy):
    _, capture, _ = toy
    state = FeedbackState()
    tick = capture.records[15].tick
    apply_human_feedback(state, [Correction("add", 2, tick=tick)], set(), 20,
                         recent=capture)
    assert state.retrain_buffer
    assert len(state.retrain_buffer) % predictor.HUMAN_SAMPLE_WEIGHT == 0
    # the corrected step carries the forced label
    forced = [s for s in state.retrain_buffer
              if (s.labels[:, 2] == EMERGENCY).any()]
    assert forced
