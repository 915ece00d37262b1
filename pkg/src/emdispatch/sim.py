"""Discrete-event simulator: warehouse generation, event injection,
spatio-temporal diffusion and labeled-dataset capture.

One tick is 3 seconds of wall time. Within a tick the order of effects is
fixed (and therefore reproducible): scheduled injections, head execution,
delay negation, fire decay, deadline escalation, diffusion trials, cyclic
refill. Diffusion draws come from a counter-based hash of
(seed, tick, src, dst), so two runs that differ only in scheduling policy
face identical hazard outcomes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import centrality
from .graph import (DAMAGED, EMERGENCY, EVENT_FAILURE, EVENT_FIRE, EVENT_NONE,
                    EVENT_SHORTAGE, NORMAL, TYPE_TASK, TYPE_WORK, DisposalTask,
                    GraphError, Scenario, SituationGraph, WorkNode,
                    WorkStationGraph, complete_work, fail_station, mark_delayed,
                    vertex_key)

log = logging.getLogger(__name__)

SECONDS_PER_TICK = 3

# per-tick infection rate scale by event type; fire spreads fastest
DIFFUSION_RATES = {EVENT_SHORTAGE: 0.17, EVENT_FAILURE: 0.35, EVENT_FIRE: 0.7}
# ticks from onset until an unresolved event destroys the station
RESCUE_DEADLINES = {EVENT_SHORTAGE: 100, EVENT_FAILURE: 60, EVENT_FIRE: 30}
FIRE_DECAY = 0.02          # fraction of resources lost per burning tick
SHUTDOWN_LABEL = "shutdown"

AREA_PROCESSES = {
    "inbound": ["unload", "scan", "register", "transfer"],
    "storage": ["confirm", "verify", "scan", "position", "store"],
    "picking": ["pick", "verify", "pack", "seal"],
    "outbound": ["stage", "check", "load", "dispatch"],
    "security": ["patrol", "inspect"],
    "road": ["move"],
    "other": [],
}
# where each event type can strike
EVENT_AREAS = {
    EVENT_SHORTAGE: ("picking",),
    EVENT_FAILURE: ("inbound", "storage", "picking", "outbound", "road"),
    EVENT_FIRE: ("storage",),
}


class ConfigError(Exception):
    pass


class InjectionError(Exception):
    pass


@dataclass
class ScenarioConfig:
    """Warehouse layout counts, event plan and episode parameters."""

    inbound: int = 25
    storage: int = 70
    picking: int = 10
    outbound: int = 25
    security: int = 8
    other: int = 2
    road: int = 10
    seed: int = 0
    episode_ticks: int = 600
    cyclic_schedules: bool = True
    resource_kinds: int = 4
    scale: Optional[int] = None                  # 1, 2 or 3; overrides `events`
    events: list[tuple[int, int, int]] = field(default_factory=list)  # (tick, station, type)
    n_random_events: int = 0                     # alternative: sample this many
    random_event_window: int = 300               # onset ticks drawn from [0, window)
    allow_fire: bool = False

    def validate(self) -> None:
        counts = (self.inbound, self.storage, self.picking, self.outbound,
                  self.security, self.other, self.road)
        if any(c < 0 for c in counts):
            raise ConfigError("area counts must be non-negative")
        if sum(counts) <= 0:
            raise ConfigError("warehouse needs at least one station")
        if self.episode_ticks <= 0:
            raise ConfigError("episode length must be positive")
        if self.scale is not None and self.scale not in (1, 2, 3):
            raise ConfigError(f"unknown scale tag {self.scale}")


@dataclass
class EventInstance:
    station: int
    type: int
    onset: int
    rescue_deadline: int     # absolute tick


@dataclass
class SimClock:
    tick: int = 0
    seconds_per_tick: int = SECONDS_PER_TICK


@dataclass
class TickReport:
    tick: int
    executed: list[tuple]   # (station, label, vertex type, value, duration)
    new_events: list[tuple[int, int]]             # (station, event type)
    resolved: list[int]
    protected: list[int]
    failures: list[int]
    delayed: list[tuple[int, str]]

    def to_dict(self) -> dict:
        return {
            "tick": self.tick,
            "executed": [list(e) for e in self.executed],
            "new_events": [[s, t] for s, t in self.new_events],
            "resolved": self.resolved,
            "protected": self.protected,
            "failures": self.failures,
            "delayed": [[s, l] for s, l in self.delayed],
        }


# ---------------------------------------------------------------------------
# scenario generation

def generate_scenario(cfg: ScenarioConfig) -> Scenario:
    """Deterministic warehouse layout: road backbone, area rows, pipelines."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)

    areas: dict[int, str] = {}
    order = [("inbound", cfg.inbound), ("storage", cfg.storage),
             ("picking", cfg.picking), ("outbound", cfg.outbound),
             ("security", cfg.security), ("other", cfg.other), ("road", cfg.road)]
    nodes: list[int] = []
    by_area: dict[str, list[int]] = {a: [] for a, _ in order}
    nid = 0
    for area, count in order:
        for _ in range(count):
            nodes.append(nid)
            areas[nid] = area
            by_area[area].append(nid)
            nid += 1

    edges: list[tuple[int, int]] = []
    distances: dict[tuple[int, int], float] = {}

    def add_edge(a: int, b: int, d: float) -> None:
        if a == b or (a, b) in distances or (b, a) in distances:
            return
        edges.append((a, b))
        distances[(a, b)] = round(float(d), 3)

    roads = by_area["road"]
    for i in range(len(roads) - 1):
        add_edge(roads[i], roads[i + 1], rng.uniform(1.5, 2.5))
    if len(roads) > 2:
        add_edge(roads[-1], roads[0], rng.uniform(1.5, 2.5))

    # every non-road station hangs off a road node; area rows of ten chained
    non_road = [i for i in nodes if areas[i] != "road"]
    for idx, i in enumerate(non_road):
        if roads:
            add_edge(i, roads[idx % len(roads)], rng.uniform(1.0, 3.0))
    for area, members in by_area.items():
        if area == "road":
            continue
        for i in range(len(members) - 1):
            if i % 10 != 9:
                add_edge(members[i], members[i + 1], 1.0)

    if not roads and len(nodes) > 1:
        # degenerate layouts (counts of 1) still need to be connected
        for i in range(len(nodes) - 1):
            add_edge(nodes[i], nodes[i + 1], 1.0)

    resources: dict[int, tuple[int, float]] = {}
    for i in nodes:
        area = areas[i]
        if area == "storage":
            kind = int(rng.integers(1, cfg.resource_kinds + 1))
            amount = float(rng.uniform(5.0, 20.0))
        elif area == "picking":
            kind, amount = 0, float(rng.uniform(2.0, 8.0))
        else:
            kind, amount = 0, float(rng.uniform(1.0, 5.0))
        resources[i] = (kind, round(amount, 3))

    # pipeline links between storage nodes sharing a resource kind
    pipelines: list[tuple[int, int, float]] = []
    kinds: dict[int, list[int]] = {}
    for i in by_area["storage"]:
        kinds.setdefault(resources[i][0], []).append(i)
    for members in kinds.values():
        for a, b in zip(members, members[1:]):
            pipelines.append((a, b, round(float(rng.uniform(2.0, 4.0)), 3)))

    schedules: dict[int, list[tuple[str, int, float]]] = {}
    for i in nodes:
        steps = AREA_PROCESSES[areas[i]]
        if not steps:
            continue
        specs = []
        for k, label in enumerate(steps):
            value = round(float(rng.uniform(0.5, 2.0)), 3)
            specs.append((label, (k + 1) * 3, value))
        schedules[i] = specs

    wsg = WorkStationGraph(nodes, edges, distances, areas)
    return Scenario(wsg, pipelines, schedules, resources)


def generate_warehouse(cfg: ScenarioConfig):
    """Scenario plus the three graph views, as fresh objects."""
    scenario = generate_scenario(cfg)
    situation = scenario.build()
    return scenario.stations, situation.base, situation


def scale_events(scale: int, scenario: Scenario, seed: int) -> list[tuple[int, int, int]]:
    """Initial event sets for the three experiment scales.

    Scale 1: 4 events, no fire. Scale 2: 4 events including at least one
    fire. Scale 3: 6 events, no fire. All injected at tick 0.
    """
    rng = np.random.default_rng(seed)
    count = {1: 4, 2: 4, 3: 6}[scale]
    with_fire = scale == 2
    return _sample_events(scenario, rng, count, with_fire, onset_window=1)


def random_events(scenario: Scenario, seed: int, count: int,
                  allow_fire: bool, onset_window: int) -> list[tuple[int, int, int]]:
    rng = np.random.default_rng(seed)
    return _sample_events(scenario, rng, count, allow_fire, onset_window,
                          fire_required=False)


def _sample_events(scenario: Scenario, rng, count: int, with_fire: bool,
                   onset_window: int, fire_required: bool = True):
    areas = scenario.stations.areas
    types = [EVENT_SHORTAGE, EVENT_FAILURE] + ([EVENT_FIRE] if with_fire else [])
    events = []
    used: set[int] = set()
    for k in range(count):
        if with_fire and fire_required and k == 0:
            etype = EVENT_FIRE
        else:
            etype = int(rng.choice(types))
        eligible = [i for i in scenario.stations.nodes
                    if areas.get(i) in EVENT_AREAS[etype] and i not in used]
        if not eligible:
            eligible = [i for i in scenario.stations.nodes if i not in used]
        station = int(rng.choice(eligible))
        used.add(station)
        onset = 0 if onset_window <= 1 else int(rng.integers(0, onset_window))
        events.append((onset, station, etype))
    return sorted(events)


# ---------------------------------------------------------------------------
# the simulator

class EmergencySim:
    """Single-writer simulator over one situation graph."""

    def __init__(self, scenario: Scenario, episode_ticks: int = 600, seed: int = 0,
                 events: Optional[list[tuple[int, int, int]]] = None,
                 cyclic_schedules: bool = True,
                 diffusion_rates: Optional[dict[int, float]] = None,
                 rescue_deadlines: Optional[dict[int, int]] = None):
        self.scenario = scenario
        self.graph: SituationGraph = scenario.build()
        self.episode_ticks = episode_ticks
        self.seed = seed
        self.clock = SimClock()
        self.cyclic = cyclic_schedules
        self.rates = dict(diffusion_rates or DIFFUSION_RATES)
        self.deadlines = dict(rescue_deadlines or RESCUE_DEADLINES)
        self.event_schedule = sorted(events or [])
        self.active_events: dict[int, EventInstance] = {}
        self.event_log: list[EventInstance] = []
        self.cumulative_failures: set[int] = set()
        self.w_max = max((s.resources for s in self.graph.base.stations.values()),
                         default=1.0) or 1.0
        self._refill_counts: dict[int, int] = {}
        self._shutdown_seq = 0
        self._progress: dict[int, tuple] = {}   # station -> (head key, ticks spent)
        self._scores_cache: Optional[tuple[int, centrality.CentralityScores]] = None
        self._inject_due(0)

    @property
    def tick(self) -> int:
        return self.clock.tick

    @property
    def done(self) -> bool:
        return self.clock.tick >= self.episode_ticks

    # -- event handling ------------------------------------------------------

    def inject_event(self, station: int, etype: int, tick: Optional[int] = None) -> EventInstance:
        """Put a normal station into the emergency state."""
        tick = self.clock.tick if tick is None else tick
        state = self.graph.base.stations[station]
        if state.k != NORMAL:
            raise InjectionError(
                f"station {station} is in state k={state.k}, cannot inject")
        self.graph.base.set_emergency(station, etype)
        ev = EventInstance(station, etype, tick, tick + self.deadlines[etype])
        self.active_events[station] = ev
        self.event_log.append(ev)
        if etype == EVENT_FAILURE:
            self._prepend_shutdown(station, tick)
        return ev

    def _prepend_shutdown(self, station: int, tick: int) -> None:
        sub = self.graph.subgraphs.get(station)
        if sub is None or not sub.items:
            return
        if any(isinstance(v, WorkNode) and v.label == SHUTDOWN_LABEL for v in sub.items):
            return
        self._shutdown_seq += 1
        node = WorkNode(id=(station, 100000 + self._shutdown_seq),
                        deadline=tick + 5, value=0.2, label=SHUTDOWN_LABEL)
        sub.items.insert(0, node)
        sub.work_pending += 1
        sub.version += 1

    def _inject_due(self, tick: int) -> list[tuple[int, int]]:
        new = []
        for onset, station, etype in self.event_schedule:
            if onset != tick:
                continue
            try:
                self.inject_event(station, etype, tick)
                new.append((station, etype))
            except InjectionError:
                log.warning("scheduled event at station %d skipped (not normal)", station)
        return new

    def _hazard_draw(self, tick: int, src: int, dst: int) -> float:
        digest = hashlib.blake2b(struct.pack("<qqqq", self.seed, tick, src, dst),
                                 digest_size=8).digest()
        return struct.unpack("<Q", digest)[0] / 2.0 ** 64

    # -- clock advance --------------------------------------------------------

    def step(self) -> TickReport:
        g = self.graph
        t = self.clock.tick
        report = TickReport(t, [], [], [], [], [], [])
        sources = [i for i in g.base.emergency_set]  # snapshot: infections land next tick

        if t > 0:
            report.new_events.extend(self._inject_due(t))

        # execute the head vertex of every active chain; a vertex with a
        # multi-tick duration completes after that many execution ticks
        for station in sorted(g.subgraphs):
            state = g.base.stations[station]
            sub = g.subgraphs[station]
            if state.k == DAMAGED or not sub.items:
                continue
            head = sub.items[0]
            if isinstance(head, WorkNode):
                paused = (state.k == EMERGENCY and state.event_type == EVENT_FAILURE
                          and head.label != SHUTDOWN_LABEL)
                if paused:
                    continue
            key = vertex_key(head)
            duration = getattr(head, "duration", 1)
            prev = self._progress.get(station)
            spent = prev[1] + 1 if prev and prev[0] == key else 1
            if spent < duration:
                self._progress[station] = (key, spent)
                continue
            self._progress.pop(station, None)
            if isinstance(head, WorkNode):
                done = complete_work(g, station, head.id, tick=t)
                report.executed.append((station, done.label, TYPE_WORK,
                                        done.value, duration))
            else:
                done = complete_work(g, station, head.uid, tick=t)
                report.executed.append((station, done.label, TYPE_TASK,
                                        done.value, duration))
                if state.k == EMERGENCY:
                    g.base.resolve_emergency(station)
                    self.active_events.pop(station, None)
                    report.resolved.append(station)
                else:
                    g.protected.add(station)
                    report.protected.append(station)

        # delay negation for works past their deadline
        for station in sorted(g.subgraphs):
            if g.base.stations[station].k == DAMAGED:
                continue
            for v in g.subgraphs[station].items:
                if isinstance(v, WorkNode) and not v.delayed and v.deadline <= t:
                    mark_delayed(g, station, v, t)
                    report.delayed.append((station, v.label))

        # fire burns resources while active
        for station, ev in self.active_events.items():
            if ev.type == EVENT_FIRE:
                state = g.base.stations[station]
                state.resources *= (1.0 - FIRE_DECAY)

        # unresolved events past their rescue deadline destroy the station
        for station in sorted(list(self.active_events)):
            ev = self.active_events[station]
            if t >= ev.rescue_deadline:
                fail_station(g, station, tick=t)
                del self.active_events[station]
                self.cumulative_failures.add(station)
                report.failures.append(station)
                if station in sources:
                    sources.remove(station)

        # diffusion trials along live edges from surviving k=1 sources
        infected: list[tuple[int, int]] = []
        for src in sorted(sources):
            if src not in self.active_events:
                continue
            ev = self.active_events[src]
            w_src = g.base.stations[src].resources
            rate = self.rates.get(ev.type, 0.0)
            for dst in g.base.neighbors(src):
                state = g.base.stations[dst]
                if state.k != NORMAL or dst in g.protected:
                    continue
                d = float(g.base.adjacency[src, dst])
                hazard = min(max(rate * (w_src / self.w_max) / d, 0.0), 1.0)
                if hazard > 0 and self._hazard_draw(t, src, dst) < hazard:
                    infected.append((dst, ev.type))
        for dst, etype in infected:
            if g.base.stations[dst].k == NORMAL:
                self.inject_event(dst, etype, t)
                report.new_events.append((dst, etype))

        # cyclic refill keeps scheduled stations busy for the whole episode
        if self.cyclic:
            for station in sorted(g.scheduled_stations):
                sub = g.subgraphs[station]
                if sub.items or g.base.stations[station].k == DAMAGED:
                    continue
                self._refill(station, t)

        self.clock.tick = t + 1
        return report

    def _refill(self, station: int, tick: int) -> None:
        cycle = self._refill_counts.get(station, 0) + 1
        self._refill_counts[station] = cycle
        sub = self.graph.subgraphs[station]
        base_seq = cycle * 100
        for k, (label, rel_deadline, value) in enumerate(self.scenario.schedules[station]):
            sub.items.append(WorkNode(id=(station, base_seq + k),
                                      deadline=tick + rel_deadline,
                                      value=value, label=label))
            sub.work_pending += 1
        sub.version += 1

    # -- features -------------------------------------------------------------

    def centrality_scores(self) -> centrality.CentralityScores:
        """Centralities depend only on topology; cached until an edge change."""
        version = self.graph.base.topology_version
        if self._scores_cache is None or self._scores_cache[0] != version:
            self._scores_cache = (version, centrality.compute_scores(self.graph.base))
        return self._scores_cache[1]

    def signal(self, norm=None) -> centrality.GraphSignal:
        return centrality.assemble_signal(self.graph, self.centrality_scores(),
                                          self.clock.tick, norm)

    def labels(self) -> np.ndarray:
        g = self.graph.base
        return np.array([g.stations[i].k for i in range(g.n)], dtype=np.int64)


# ---------------------------------------------------------------------------
# dataset capture

@dataclass
class TickRecord:
    run: int
    tick: int
    signal: np.ndarray      # N x 8, raw
    labels: np.ndarray      # N, values in {0, 1, 2}


@dataclass
class WindowSample:
    inputs: np.ndarray      # T x N x 8
    labels: np.ndarray      # T x N


@dataclass
class CaptureResult:
    records: list[TickRecord]
    window: int

    def windows(self, stride: int = 1) -> list[WindowSample]:
        by_run: dict[int, list[TickRecord]] = {}
        for r in self.records:
            by_run.setdefault(r.run, []).append(r)
        samples = []
        T = self.window
        for run in sorted(by_run):
            recs = sorted(by_run[run], key=lambda r: r.tick)
            if len(recs) < 2 * T:
                log.warning("run %d has %d ticks (< %d); skipped", run, len(recs), 2 * T)
                continue
            sig = np.stack([r.signal for r in recs])
            lab = np.stack([r.labels for r in recs])
            for t in range(T - 1, len(recs) - T, stride):
                samples.append(WindowSample(sig[t - T + 1:t + 1], lab[t + 1:t + 1 + T]))
        return samples

    def split(self, ratio: float = 0.8,
              stride: int = 1) -> tuple[list[WindowSample], list[WindowSample]]:
        """Chronological split of windowed samples into train/test."""
        samples = self.windows(stride)
        cut = int(len(samples) * ratio)
        return samples[:cut], samples[cut:]

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps({"run": r.run, "tick": r.tick,
                                     "signal": [round(x, 9) for x in
                                                r.signal.ravel().tolist()],
                                     "labels": r.labels.tolist()}) + "\n")

    @classmethod
    def load(cls, path, window: int = 20) -> "CaptureResult":
        records = []
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            labels = np.array(d["labels"], dtype=np.int64)
            n = len(labels)
            sig = np.array(d["signal"], dtype=np.float64).reshape(n, centrality.N_FEATURES)
            records.append(TickRecord(d["run"], d["tick"], sig, labels))
        return cls(records, window)


def capture_dataset(make_sim: Callable[[int], EmergencySim], runs: int,
                    window: int = 20) -> CaptureResult:
    """Run the simulator and collect (signal, label) streams per tick.

    ``make_sim(i)`` must return a fresh simulator for run i; each tick is
    recorded before stepping so record t pairs the tick-t signal with the
    tick-t states. Windowing pairs 20 input ticks with the next 20 label
    ticks.
    """
    records: list[TickRecord] = []
    for run in range(runs):
        sim = make_sim(run)
        while not sim.done:
            records.append(TickRecord(run, sim.tick, sim.signal().matrix, sim.labels()))
            sim.step()
    return CaptureResult(records, window)
