"""Graph model of the work environment.

Three coupled views share one mutable state:

* the work-station graph (stations + physical roads with distances),
* the diffusion graph (stations + roads + implied pipeline/circuit links,
  carrying per-station emergency state),
* the situation graph (the above plus one process subgraph per scheduled
  station, holding the ordered work/task chain that the scheduler mutates).

All mutation goes through the functions at the bottom of this module so the
chain invariant (every subgraph is a single directed chain between its
virtual start/end vertices) survives any sequence of operations.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np

# station states k
NORMAL, EMERGENCY, DAMAGED = 0, 1, 2
# vertex type tags
TYPE_STATION, TYPE_WORK, TYPE_TASK = 0, 1, 2
# event type codes F^a
EVENT_NONE, EVENT_SHORTAGE, EVENT_FAILURE, EVENT_FIRE = 0, 1, 2, 3
EVENT_NAMES = {
    EVENT_NONE: "none",
    EVENT_SHORTAGE: "shortage",
    EVENT_FAILURE: "equipment_failure",
    EVENT_FIRE: "fire",
}
EVENT_CODES = {v: k for k, v in EVENT_NAMES.items()}
# disposal task kinds k_s
PREVENTATIVE, RESCUE = 0, 1


class GraphError(Exception):
    """Base error for graph-model contract violations."""


class UnknownStationError(GraphError):
    def __init__(self, station):
        super().__init__(f"unknown station id: {station!r}")
        self.station = station


class OrderingViolationError(GraphError):
    """Raised when a non-head vertex is completed."""


class StalePositionError(GraphError):
    """Raised when an insertion position no longer matches the subgraph."""


@dataclass
class WorkStationGraph:
    """Physical station layout: nodes, roads and road distances."""

    nodes: list[int]
    edges: list[tuple[int, int]]
    distances: dict[tuple[int, int], float]
    areas: dict[int, str] = field(default_factory=dict)

    def validate(self) -> None:
        known = set(self.nodes)
        if sorted(known) != list(range(len(self.nodes))):
            raise GraphError("station ids must be dense integers 0..N-1")
        for a, b in self.edges:
            if a == b:
                raise GraphError(f"self-loop edge on station {a}")
            if a not in known or b not in known:
                raise UnknownStationError(a if a not in known else b)
            if self.distance(a, b) <= 0:
                raise GraphError(f"non-positive distance on edge ({a},{b})")

    def distance(self, a: int, b: int) -> float:
        key = (a, b) if (a, b) in self.distances else (b, a)
        return self.distances[key]


@dataclass
class StationState:
    """Per-station weight tuple: state k, event type F^a, resources w, kind m."""

    k: int = NORMAL
    event_type: int = EVENT_NONE
    resources: float = 0.0
    resource_kind: int = 0

    def check(self) -> None:
        if self.k == NORMAL and self.event_type != EVENT_NONE:
            raise GraphError("normal station cannot carry an event type")
        if self.k == DAMAGED and self.resources != 0.0:
            raise GraphError("damaged station must have zero resources")


class DiffusionGraph:
    """Station nodes plus road and pipeline connectivity with emergency state.

    ``adjacency`` is the symmetric N x N distance matrix D (0 = no edge).
    ``emergency_set`` always equals {i : k_i == 1}; it is maintained by the
    mutators below, never recomputed by scans.
    """

    def __init__(self, stations: dict[int, StationState],
                 edges: list[tuple[int, int]], adjacency: np.ndarray):
        self.stations = stations
        self.edges = edges
        self.adjacency = adjacency
        self.emergency_set: set[int] = {i for i, s in stations.items() if s.k == EMERGENCY}
        self.topology_version = 0

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    def neighbors(self, i: int) -> list[int]:
        return [int(j) for j in np.nonzero(self.adjacency[i])[0]]

    def set_emergency(self, i: int, event_type: int) -> None:
        state = self.stations[i]
        state.k = EMERGENCY
        state.event_type = event_type
        self.emergency_set.add(i)

    def resolve_emergency(self, i: int) -> None:
        state = self.stations[i]
        state.k = NORMAL
        state.event_type = EVENT_NONE
        self.emergency_set.discard(i)

    def disconnect(self, i: int) -> None:
        self.adjacency[i, :] = 0.0
        self.adjacency[:, i] = 0.0
        self.edges = [(a, b) for a, b in self.edges if a != i and b != i]
        self.topology_version += 1

    def copy(self) -> "DiffusionGraph":
        g = DiffusionGraph({i: copy.copy(s) for i, s in self.stations.items()},
                           list(self.edges), self.adjacency.copy())
        g.topology_version = self.topology_version
        return g


@dataclass
class WorkNode:
    """One indivisible process step of a station's plan."""

    id: tuple[int, int]                 # (station, sequence index)
    deadline: int                       # absolute tick it must finish by
    value: float
    label: str = "work"
    delayed: bool = False

    @property
    def station(self) -> int:
        return self.id[0]


@dataclass
class DisposalTask:
    """Out-of-plan step that rescues or shields one station.

    ``duration`` is the number of execution ticks the step occupies at the
    head of its chain; normal work steps always take one tick, rescue work
    is slower and erecting a firewall is quick.
    """

    station: int
    kind: int                           # PREVENTATIVE or RESCUE
    deadline: int                       # absolute tick (0 when station damaged)
    value: float
    uid: int = -1
    placed: bool = False
    duration: int = 1

    @property
    def label(self) -> str:
        return "rescue" if self.kind == RESCUE else "preventative"


ChainVertex = Union[WorkNode, DisposalTask]


def vertex_type(v: ChainVertex) -> int:
    return TYPE_TASK if isinstance(v, DisposalTask) else TYPE_WORK


def vertex_key(v: ChainVertex):
    if isinstance(v, DisposalTask):
        return ("t", v.uid)
    return ("w",) + v.id


@dataclass
class ProcessSubgraph:
    """Ordered chain of work/task vertices between virtual start and end.

    ``version`` is bumped by every mutation; insertion positions carry the
    version they were enumerated against and go stale when it moves on.
    ``work_pending`` mirrors the number of WorkNode items (kept in step with
    the mutators so the completion rate avoids a chain scan).
    """

    station: int
    items: list[ChainVertex] = field(default_factory=list)
    version: int = 0
    work_pending: int = 0

    def __post_init__(self):
        self.work_pending = sum(1 for v in self.items if isinstance(v, WorkNode))

    @property
    def order_edges(self) -> list[tuple]:
        """Directed order edges between non-virtual vertices only."""
        return [(vertex_key(a), vertex_key(b))
                for a, b in zip(self.items, self.items[1:])]

    @property
    def head(self) -> Optional[ChainVertex]:
        return self.items[0] if self.items else None

    def pending_works(self) -> list[WorkNode]:
        return [v for v in self.items if isinstance(v, WorkNode)]

    def pending_tasks(self) -> list[DisposalTask]:
        return [v for v in self.items if isinstance(v, DisposalTask)]


@dataclass(frozen=True)
class InsertPosition:
    """Gap handle inside one subgraph; invalid once the chain mutates."""

    station: int
    gap: int
    version: int


@dataclass
class CompletedRecord:
    station: int
    key: tuple
    label: str
    value: float
    kind: int            # TYPE_WORK or TYPE_TASK
    tick: int


@dataclass
class FailedRecord:
    station: int
    key: tuple
    label: str
    value: float         # the negated value
    kind: int
    tick: int
    reason: str          # "delay" or "station_failed"


class SituationGraph:
    """Diffusion graph + process subgraphs + bookkeeping sets S^t and U."""

    def __init__(self, base: DiffusionGraph, subgraphs: dict[int, ProcessSubgraph],
                 areas: Optional[dict[int, str]] = None):
        self.base = base
        self.subgraphs = subgraphs
        self.areas = dict(areas or {})
        self.completed: list[CompletedRecord] = []
        self.failed: list[FailedRecord] = []
        self.protected: set[int] = set()          # stations with an erected firewall
        self.completed_task_uids: set[int] = set()
        self.damage_costs: dict[int, float] = {}  # frozen -(sum w_ij + w_ji) per failed station
        # set fixed at build time: the |mG| denominator for completion-rate means
        self.scheduled_stations: frozenset[int] = frozenset(
            s for s, sub in subgraphs.items() if sub.items)
        self._completed_works: dict[int, int] = {}
        self._task_uid = 0

    def next_task_uid(self) -> int:
        self._task_uid += 1
        return self._task_uid

    def subgraph(self, station: int, create: bool = False) -> Optional[ProcessSubgraph]:
        if station not in self.base.stations:
            raise UnknownStationError(station)
        sub = self.subgraphs.get(station)
        if sub is None and create:
            sub = ProcessSubgraph(station)
            self.subgraphs[station] = sub
        return sub

    def completed_work_count(self, station: int) -> int:
        return self._completed_works.get(station, 0)

    def completion_rate(self, station: int) -> float:
        """Work completion rate p_succ: |sv| / (|nw| + |sv|); 0 when damaged."""
        if self.base.stations[station].k == DAMAGED:
            return 0.0
        sv = self._completed_works.get(station, 0)
        sub = self.subgraphs.get(station)
        nw = sub.work_pending if sub else 0
        total = sv + nw
        return sv / total if total else 0.0

    def total_signed_value(self) -> float:
        """Sum of values over completed, failed and pending vertices."""
        total = sum(r.value for r in self.completed)
        total += sum(r.value for r in self.failed)
        for sub in self.subgraphs.values():
            for v in sub.items:
                if not (isinstance(v, WorkNode) and v.delayed) and not _in_failed(self, v):
                    total += v.value
        return total

    def copy(self) -> "SituationGraph":
        g = SituationGraph(self.base.copy(),
                           {s: ProcessSubgraph(sub.station, [copy.copy(v) for v in sub.items],
                                               sub.version)
                            for s, sub in self.subgraphs.items()},
                           self.areas)
        g.completed = list(self.completed)
        g.failed = list(self.failed)
        g.protected = set(self.protected)
        g.completed_task_uids = set(self.completed_task_uids)
        g.damage_costs = dict(self.damage_costs)
        g.scheduled_stations = self.scheduled_stations
        g._completed_works = dict(self._completed_works)
        g._task_uid = self._task_uid
        return g


def _in_failed(g: SituationGraph, v: ChainVertex) -> bool:
    key = vertex_key(v)
    return any(r.key == key for r in g.failed)


# ---------------------------------------------------------------------------
# construction

def build_situation(stations: WorkStationGraph,
                    schedules: dict[int, list],
                    pipelines: Iterable[tuple[int, int, float]] = (),
                    resources: Optional[dict[int, tuple[int, float]]] = None) -> SituationGraph:
    """Assemble the situation graph from the physical layout and work plans.

    ``schedules`` maps station -> ordered list of work specs; each spec is a
    (label, deadline, value) tuple or an equivalent dict. Stations absent
    from ``schedules`` get no subgraph.
    """
    stations.validate()
    n = len(stations.nodes)
    adjacency = np.zeros((n, n), dtype=np.float64)
    edges: list[tuple[int, int]] = []
    for a, b in stations.edges:
        d = stations.distance(a, b)
        adjacency[a, b] = adjacency[b, a] = d
        edges.append((a, b))
    for a, b, d in pipelines:
        if a not in set(stations.nodes) or b not in set(stations.nodes):
            raise UnknownStationError(a if a not in set(stations.nodes) else b)
        if adjacency[a, b] == 0.0:
            edges.append((a, b))
        adjacency[a, b] = adjacency[b, a] = float(d)

    resources = resources or {}
    states = {}
    for i in stations.nodes:
        kind, amount = resources.get(i, (0, 0.0))
        states[i] = StationState(resources=float(amount), resource_kind=int(kind))
    base = DiffusionGraph(states, edges, adjacency)

    subgraphs: dict[int, ProcessSubgraph] = {}
    for station, specs in schedules.items():
        if station not in states:
            raise UnknownStationError(station)
        items: list[ChainVertex] = []
        for seq, spec in enumerate(specs):
            if isinstance(spec, dict):
                label, deadline, value = spec["label"], spec["deadline"], spec["value"]
            else:
                label, deadline, value = spec
            items.append(WorkNode(id=(station, seq), deadline=int(deadline),
                                  value=float(value), label=str(label)))
        subgraphs[station] = ProcessSubgraph(station, items)
    return SituationGraph(base, subgraphs, stations.areas)


# ---------------------------------------------------------------------------
# mutation operations

def complete_work(g: SituationGraph, station: int, work_id, tick: int = 0) -> ChainVertex:
    """Remove the head vertex of a station chain and record it completed.

    ``work_id`` must identify the current head (ordering violation
    otherwise); a damaged station performs no work at all.
    """
    sub = g.subgraph(station)
    if g.base.stations[station].k == DAMAGED:
        raise OrderingViolationError(f"station {station} is damaged and performs no work")
    if sub is None or not sub.items:
        raise OrderingViolationError(f"station {station} has no pending vertices")
    head = sub.items[0]
    if _matches(head, work_id):
        sub.items.pop(0)
    else:
        if any(_matches(v, work_id) for v in sub.items):
            raise OrderingViolationError(
                f"vertex {work_id!r} is not the head of station {station}'s chain")
        raise GraphError(f"vertex {work_id!r} not found at station {station}")
    sub.version += 1
    kind = vertex_type(head)
    g.completed.append(CompletedRecord(station, vertex_key(head), head.label,
                                       head.value, kind, tick))
    if kind == TYPE_WORK:
        sub.work_pending -= 1
        g._completed_works[station] = g._completed_works.get(station, 0) + 1
    else:
        head.placed = False
        g.completed_task_uids.add(head.uid)
    return head


def _matches(v: ChainVertex, work_id) -> bool:
    if isinstance(v, DisposalTask):
        return work_id == v.uid or work_id == vertex_key(v)
    return work_id == v.id or work_id == vertex_key(v)


def mark_delayed(g: SituationGraph, station: int, work: WorkNode, tick: int) -> None:
    """Negate a late work node's value once and add it to the failed set U."""
    if work.delayed:
        return
    work.value = -work.value
    work.delayed = True
    g.failed.append(FailedRecord(station, vertex_key(work), work.label,
                                 work.value, TYPE_WORK, tick, "delay"))


def fail_station(g: SituationGraph, station: int, tick: int = 0) -> None:
    """Transition a station to the damaged state (idempotent on k=2).

    Clears resources, freezes the lost-connectivity cost, negates every
    pending work/task value into U and disconnects the station's edges in
    both the diffusion and situation graphs.
    """
    state = g.base.stations[station]
    if state.k == DAMAGED:
        return
    # connectivity loss is valued against the pre-failure resources/edges
    w = state.resources
    cost = 0.0
    for j in g.base.neighbors(station):
        d = float(g.base.adjacency[station, j])
        w_ij = w / d
        w_ji = g.base.stations[j].resources / d
        cost += w_ij + w_ji
    g.damage_costs[station] = -cost

    state.k = DAMAGED
    state.resources = 0.0
    g.base.emergency_set.discard(station)
    g.base.disconnect(station)

    sub = g.subgraphs.get(station)
    if sub is not None:
        for v in sub.items:
            if isinstance(v, WorkNode) and v.delayed:
                continue  # already negated by delay
            v.value = -v.value
            g.failed.append(FailedRecord(station, vertex_key(v), v.label, v.value,
                                         vertex_type(v), tick, "station_failed"))


def insertable_positions(sub: ProcessSubgraph) -> list[InsertPosition]:
    """Every gap a task can occupy: |order edges| + 2, or exactly 1 if empty."""
    count = len(sub.items) + 1
    return [InsertPosition(sub.station, gap, sub.version) for gap in range(count)]


def insert_task(g: SituationGraph, task: DisposalTask, pos: InsertPosition) -> None:
    """Splice a disposal task into a chain gap; repositions if already placed.

    The position must have been enumerated against the subgraph's current
    version, otherwise the handle is stale.
    """
    sub = g.subgraph(pos.station, create=True)
    if pos.version != sub.version:
        raise StalePositionError(
            f"position v{pos.version} is stale (subgraph at v{sub.version})")
    if task.uid < 0:
        task.uid = g.next_task_uid()
    gap = pos.gap
    if task.placed:
        try:
            old = next(i for i, v in enumerate(sub.items)
                       if isinstance(v, DisposalTask) and v.uid == task.uid)
        except StopIteration:
            raise GraphError(f"task {task.uid} marked placed but absent from chain")
        sub.items.pop(old)
        if old < gap:
            gap -= 1
    if not 0 <= gap <= len(sub.items):
        raise StalePositionError(f"gap {pos.gap} out of range for station {pos.station}")
    sub.items.insert(gap, task)
    task.placed = True
    sub.version += 1


def task_links(g: SituationGraph, task: DisposalTask) -> dict[str, list]:
    """In/out order links of a placed task (both empty when unplaced)."""
    if not task.placed:
        return {"in_e": [], "out_e": []}
    sub = g.subgraphs.get(task.station)
    if sub is None:
        return {"in_e": [], "out_e": []}
    for i, v in enumerate(sub.items):
        if isinstance(v, DisposalTask) and v.uid == task.uid:
            in_e = [vertex_key(sub.items[i - 1])] if i > 0 else [("start", task.station)]
            out_e = ([vertex_key(sub.items[i + 1])] if i + 1 < len(sub.items)
                     else [("end", task.station)])
            return {"in_e": in_e, "out_e": out_e}
    return {"in_e": [], "out_e": []}


def check_chain_invariant(g: SituationGraph) -> None:
    """Every subgraph is a single chain and bookkeeping sets are disjoint."""
    for station, sub in g.subgraphs.items():
        keys = [vertex_key(v) for v in sub.items]
        if len(keys) != len(set(keys)):
            raise GraphError(f"duplicate vertex in station {station}'s chain")
        for v in sub.items:
            if v.station != station:
                raise GraphError(f"foreign vertex {vertex_key(v)} in station {station}")
    done = {r.key for r in g.completed}
    lost = {r.key for r in g.failed if r.reason == "station_failed"}
    if done & lost:
        raise GraphError("completed and failed sets overlap")
    live = {i for i, s in g.base.stations.items() if s.k == EMERGENCY}
    if live != g.base.emergency_set:
        raise GraphError("emergency_set out of sync with station states")


# ---------------------------------------------------------------------------
# scenario file round-trip

@dataclass
class Scenario:
    """JSON-serializable description of a work environment."""

    stations: WorkStationGraph
    pipelines: list[tuple[int, int, float]]
    schedules: dict[int, list[tuple[str, int, float]]]
    resources: dict[int, tuple[int, float]]

    def build(self) -> SituationGraph:
        return build_situation(self.stations, self.schedules,
                               self.pipelines, self.resources)

    def to_dict(self) -> dict:
        return {
            "stations": [{"id": i, "area": self.stations.areas.get(i, "")}
                         for i in self.stations.nodes],
            "edges": [{"a": a, "b": b, "distance": self.stations.distance(a, b)}
                      for a, b in self.stations.edges],
            "pipelines": [{"a": a, "b": b, "distance": d} for a, b, d in self.pipelines],
            "schedules": {str(s): [{"label": l, "deadline": dl, "value": v}
                                   for l, dl, v in specs]
                          for s, specs in self.schedules.items()},
            "resources": {str(s): {"kind": k, "amount": w}
                          for s, (k, w) in self.resources.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        nodes = [int(s["id"]) for s in data["stations"]]
        areas = {int(s["id"]): s.get("area", "") for s in data["stations"]}
        edges = [(int(e["a"]), int(e["b"])) for e in data["edges"]]
        distances = {(int(e["a"]), int(e["b"])): float(e["distance"]) for e in data["edges"]}
        wsg = WorkStationGraph(nodes, edges, distances, areas)
        pipelines = [(int(p["a"]), int(p["b"]), float(p["distance"]))
                     for p in data.get("pipelines", [])]
        schedules = {int(s): [(str(x["label"]), int(x["deadline"]), float(x["value"]))
                              for x in specs]
                     for s, specs in data.get("schedules", {}).items()}
        resources = {int(s): (int(r["kind"]), float(r["amount"]))
                     for s, r in data.get("resources", {}).items()}
        return cls(wsg, pipelines, schedules, resources)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "Scenario":
        return cls.from_dict(json.loads(Path(path).read_text()))
