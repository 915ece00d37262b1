import json

import numpy as np
import pytest

from emdispatch.graph import (DAMAGED, EMERGENCY, EVENT_FAILURE, EVENT_FIRE,
                              EVENT_SHORTAGE, NORMAL, Scenario,
                              WorkStationGraph)
from emdispatch.sim import (AREA_PROCESSES, ConfigError, EmergencySim,
                            InjectionError, ScenarioConfig, SimClock,
                            capture_dataset, generate_scenario,
                            generate_warehouse, random_events, scale_events)


def small_config(**kw):
    defaults = dict(inbound=2, storage=6, picking=2, outbound=2, security=1,
                    other=1, road=2, seed=5, episode_ticks=80)
    defaults.update(kw)
    return ScenarioConfig(**defaults)


def test_default_warehouse_counts():
    wsg, diffusion, situation = generate_warehouse(ScenarioConfig(seed=1))
    assert len(wsg.nodes) == 150
    counts = {}
    for i in wsg.nodes:
        counts[wsg.areas[i]] = counts.get(wsg.areas[i], 0) + 1
    assert counts == {"inbound": 25, "storage": 70, "picking": 10,
                      "outbound": 25, "security": 8, "other": 2, "road": 10}
    for i in wsg.nodes:
        area = wsg.areas[i]
        sub = situation.subgraphs.get(i)
        if area == "other":
            assert sub is None
        elif area == "road":
            assert len(sub.items) == 1  # single mobile operation node
        else:
            assert [v.label for v in sub.items] == AREA_PROCESSES[area]


def test_minimal_warehouse_connected():
    cfg = ScenarioConfig(inbound=1, storage=1, picking=1, outbound=1,
                         security=1, other=1, road=0, seed=2)
    scenario = generate_scenario(cfg)
    assert len(scenario.stations.nodes) == 6
    # BFS over the road edges reaches every station
    adj = {i: set() for i in scenario.stations.nodes}
    for a, b in scenario.stations.edges:
        adj[a].add(b)
        adj[b].add(a)
    seen = {0}
    frontier = [0]
    while frontier:
        nxt = [j for i in frontier for j in adj[i] if j not in seen]
        seen.update(nxt)
        frontier = nxt
    assert seen == set(scenario.stations.nodes)


def test_scenario_determinism():
    a = generate_scenario(ScenarioConfig(seed=11))
    b = generate_scenario(ScenarioConfig(seed=11))
    assert json.dumps(a.to_dict(), sort_keys=True) == json.dumps(b.to_dict(), sort_keys=True)


def test_bad_config_rejected():
    with pytest.raises(ConfigError):
        ScenarioConfig(inbound=-1).validate()
    with pytest.raises(ConfigError):
        ScenarioConfig(episode_ticks=0).validate()
    with pytest.raises(ConfigError):
        ScenarioConfig(scale=4).validate()


def test_inject_event():
    scenario = generate_scenario(small_config())
    sim = EmergencySim(scenario, seed=5)
    storage = [i for i in scenario.stations.nodes
               if scenario.stations.areas[i] == "storage"][0]
    ev = sim.inject_event(storage, EVENT_FIRE)
    assert sim.graph.base.stations[storage].k == EMERGENCY
    assert sim.graph.base.stations[storage].event_type == EVENT_FIRE
    assert ev.rescue_deadline == 30
    with pytest.raises(InjectionError):
        sim.inject_event(storage, EVENT_SHORTAGE)


def test_equipment_failure_prepends_shutdown_and_pauses():
    scenario = generate_scenario(small_config())
    sim = EmergencySim(scenario, seed=5)
    station = [i for i in scenario.stations.nodes
               if scenario.stations.areas[i] == "inbound"][0]
    sim.inject_event(station, EVENT_FAILURE)
    sub = sim.graph.subgraphs[station]
    assert sub.items[0].label == "shutdown"
    report = sim.step()
    executed_here = [e for e in report.executed if e[0] == station]
    assert executed_here == [(station, "shutdown", 1, 0.2, 1)]
    report = sim.step()  # now the head is a normal work node: paused
    assert [e for e in report.executed if e[0] == station] == []


def test_scale_event_sets():
    scenario = generate_scenario(ScenarioConfig(seed=3))
    s1 = scale_events(1, scenario, seed=3)
    assert len(s1) == 4 and all(t != EVENT_FIRE for _, _, t in s1)
    s2 = scale_events(2, scenario, seed=3)
    assert len(s2) == 4 and any(t == EVENT_FIRE for _, _, t in s2)
    s3 = scale_events(3, scenario, seed=3)
    assert len(s3) == 6 and all(t != EVENT_FIRE for _, _, t in s3)
    sim = EmergencySim(scenario, events=s2, seed=3)
    assert len(sim.graph.base.emergency_set) == 4


def test_step_without_events_changes_no_states():
    scenario = generate_scenario(small_config())
    sim = EmergencySim(scenario, seed=5)
    for _ in range(20):
        report = sim.step()
        assert report.new_events == [] and report.failures == []
    assert all(s.k == NORMAL for s in sim.graph.base.stations.values())
    assert len(sim.graph.completed) > 0


def test_zero_diffusion_rate_never_spreads():
    scenario = generate_scenario(small_config())
    events = scale_events(1, scenario, seed=5)
    sim = EmergencySim(scenario, events=events, seed=5,
                       diffusion_rates={EVENT_SHORTAGE: 0.0, EVENT_FAILURE: 0.0,
                                        EVENT_FIRE: 0.0})
    initial = set(sim.graph.base.emergency_set)
    for _ in range(40):
        sim.step()
        assert sim.graph.base.emergency_set <= initial


def test_diffusion_locality():
    # a station can only ignite if a live neighbor was alight the tick before
    scenario = generate_scenario(small_config(seed=9))
    events = [(0, scenario.stations.nodes[3], EVENT_FIRE)]
    rates = {EVENT_SHORTAGE: 0.3, EVENT_FAILURE: 0.3, EVENT_FIRE: 0.6}
    sim = EmergencySim(scenario, events=events, seed=9, diffusion_rates=rates)
    prev_emergency = set(sim.graph.base.emergency_set)
    prev_adj = sim.graph.base.adjacency.copy()
    for _ in range(60):
        report = sim.step()
        for station, _ in report.new_events:
            nbrs = {j for j in range(prev_adj.shape[0]) if prev_adj[station, j] != 0}
            assert nbrs & prev_emergency, f"non-local infection at {station}"
        prev_emergency = set(sim.graph.base.emergency_set)
        prev_adj = sim.graph.base.adjacency.copy()


def test_path_graph_spreads_in_hop_order():
    # chain 0-1-2-3: with an event at 0, node 2 can only ignite after node 1
    wsg = WorkStationGraph([0, 1, 2, 3], [(0, 1), (1, 2), (2, 3)],
                           {(0, 1): 1.0, (1, 2): 1.0, (2, 3): 1.0})
    scenario = Scenario(wsg, [], {i: [("move", 999, 1.0)] for i in range(4)},
                        {i: (0, 10.0) for i in range(4)})
    first_hit = {}
    for seed in range(30):
        sim = EmergencySim(scenario, episode_ticks=2000, seed=seed,
                           events=[(0, 0, EVENT_SHORTAGE)],
                           diffusion_rates={EVENT_SHORTAGE: 0.9})
        hits = {}
        # disable escalation by stretching the deadline
        sim.active_events[0].rescue_deadline = 10 ** 9
        for _ in range(60):
            report = sim.step()
            for station, _ in report.new_events:
                hits.setdefault(station, sim.tick)
            for ev in sim.active_events.values():
                ev.rescue_deadline = 10 ** 9
        if 1 in hits and 2 in hits:
            assert hits[1] < hits[2]
            first_hit[seed] = (hits[1], hits[2])
    assert first_hit, "diffusion never reached two hops in any seed"


def test_fire_burns_resources_then_fails():
    scenario = generate_scenario(small_config())
    storage = [i for i in scenario.stations.nodes
               if scenario.stations.areas[i] == "storage"][0]
    sim = EmergencySim(scenario, events=[(0, storage, EVENT_FIRE)], seed=5,
                       diffusion_rates={EVENT_FIRE: 0.0})
    last = sim.graph.base.stations[storage].resources
    for _ in range(30):
        sim.step()
        now = sim.graph.base.stations[storage].resources
        assert now <= last
        last = now
    assert sim.graph.base.stations[storage].k == EMERGENCY
    sim.step()  # the step processing tick 30 hits the fire rescue deadline
    assert sim.graph.base.stations[storage].k == DAMAGED
    assert storage in sim.cumulative_failures
    assert sim.graph.base.neighbors(storage) == []


def test_determinism_of_tick_stream():
    def run():
        scenario = generate_scenario(small_config(seed=21))
        events = scale_events(2, scenario, seed=21)
        sim = EmergencySim(scenario, events=events, seed=21)
        return [sim.step().to_dict() for _ in range(80)]

    assert run() == run()


def test_clock_seconds():
    assert SimClock().seconds_per_tick == 3


def test_capture_dataset_records_and_split():
    scenario = generate_scenario(small_config(episode_ticks=120))

    def make_sim(i):
        return EmergencySim(scenario, episode_ticks=120, seed=100 + i,
                            events=random_events(scenario, 100 + i, 3,
                                                 allow_fire=True, onset_window=60))

    capture = capture_dataset(make_sim, runs=2, window=20)
    assert len(capture.records) == 240
    windows = capture.windows()
    # each 120-tick run yields 120 - 2*20 + 1 windows
    assert len(windows) == 2 * (120 - 39)
    n = len(scenario.stations.nodes)
    assert windows[0].inputs.shape == (20, n, 8)
    assert windows[0].labels.shape == (20, n)
    labels = np.concatenate([w.labels.ravel() for w in windows])
    assert set(np.unique(labels)) <= {0, 1, 2}
    train, test = capture.split(0.8)
    assert len(train) == int(len(windows) * 0.8)
    assert len(train) + len(test) == len(windows)


def test_capture_dataset_skips_short_runs(caplog):
    scenario = generate_scenario(small_config(episode_ticks=30))

    def make_sim(i):
        return EmergencySim(scenario, episode_ticks=30, seed=i)

    capture = capture_dataset(make_sim, runs=1, window=20)
    assert capture.windows() == []


def test_capture_roundtrip(tmp_path):
    scenario = generate_scenario(small_config(episode_ticks=50))

    def make_sim(i):
        return EmergencySim(scenario, episode_ticks=50, seed=i,
                            events=[(0, 0, EVENT_SHORTAGE)])

    capture = capture_dataset(make_sim, runs=1, window=10)
    path = tmp_path / "data.jsonl"
    capture.save(path)
    loaded = type(capture).load(path, window=10)
    assert len(loaded.records) == len(capture.records)
    assert np.allclose(loaded.records[7].signal, capture.records[7].signal)
    assert (loaded.records[7].labels == capture.records[7].labels).all()
