"""Task-insertion scheduling: the MDP environment over the situation graph,
the three-part reward, the constraint mask, Double DQN training and the
greedy baseline.

The action space is a fixed lattice of (task slot, chain gap) pairs plus an
always-legal no-op at index 0; dynamically invalid or rule-forbidden entries
are masked and their Q values forced to an unselectable minimum at selection
time. One agent action is taken per tick while any listed task is unplaced
or repositionable; ticks without a task list auto-advance.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

import numpy as np

from .centrality import mean_inverse_centrality
from .graph import (DAMAGED, EMERGENCY, EVENT_CODES, EVENT_NONE, NORMAL,
                    PREVENTATIVE, RESCUE, DisposalTask, InsertPosition,
                    SituationGraph, insert_task, insertable_positions)
from .nnet import Adam, Dense, ParamSet
from .predictor import GACRNNModel, predict_key_nodes
from .sim import EmergencySim

log = logging.getLogger(__name__)

NOOP = 0


class MaskViolation(Exception):
    """A masked action was submitted to the environment."""


@dataclass
class RewardBreakdown:
    r_work: float
    r_e: float
    r_n: float
    beta: float
    z: float
    r: float = 0.0

    def to_dict(self) -> dict:
        return {"r_work": self.r_work, "r_e": self.r_e, "r_n": self.r_n,
                "beta": self.beta, "z": self.z, "r": self.r}


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def scenario_total_value(g: SituationGraph) -> float:
    """Normalization denominator: initial resources plus absolute work values."""
    total = sum(s.resources for s in g.base.stations.values())
    total += sum(abs(v.value) for sub in g.subgraphs.values() for v in sub.items)
    return max(total, 1e-9)


def reward_components(g: SituationGraph, total_value: float,
                      beta_override: Optional[float] = None) -> RewardBreakdown:
    """Work progress, emergency impact and healthy-resource terms with the
    adaptive mixing weight.

    R_work averages completion rates over the stations scheduled at build
    time. A station in the emergency state costs its resources plus its
    pending work/task values; a damaged one costs its frozen connectivity
    loss plus its (already negated) chain values. The resource terms are
    squashed into [-1, 1] by division with the initial scenario value before
    mixing.
    """
    if g.scheduled_stations:
        r_work = sum(g.completion_rate(i) for i in g.scheduled_stations) \
            / len(g.scheduled_stations)
    else:
        r_work = 0.0

    r_e = 0.0
    for i, state in g.base.stations.items():
        sub = g.subgraphs.get(i)
        pending = sum(v.value for v in sub.items) if sub else 0.0
        if state.k == EMERGENCY:
            r_e += state.resources + pending
        elif state.k == DAMAGED:
            r_e += g.damage_costs.get(i, 0.0) + pending

    r_n = sum(state.resources for i, state in g.base.stations.items()
              if state.k == NORMAL)

    eta = max(-1.0, min(1.0, (r_n + r_e) / total_value))
    beta = sigmoid(r_work - eta) if beta_override is None else float(beta_override)
    z = beta * r_work + (1.0 - beta) * eta
    return RewardBreakdown(r_work, r_e, r_n, beta, z)


# ---------------------------------------------------------------------------
# constraint rules

@dataclass
class ConstraintRule:
    """Declarative insertion constraint compiled from JSON.

    ``match`` narrows which tasks the rule binds to (by the station's event
    type, the station's area, or both); ``effect`` is one of
    ``forbid_before``/``forbid_after`` (relative to the first chain vertex
    whose label equals ``work_label``) or ``force_front`` (only the earliest
    gap that passes every forbid rule stays legal).
    """

    effect: str
    event_type: Optional[int] = None
    area: Optional[str] = None
    work_label: Optional[str] = None
    reason: str = ""

    EFFECTS = ("forbid_before", "forbid_after", "force_front")

    def __post_init__(self):
        if self.effect not in self.EFFECTS:
            raise ValueError(f"unknown rule effect {self.effect!r}")
        if self.effect != "force_front" and not self.work_label:
            raise ValueError(f"{self.effect} rule needs a work_label")

    @classmethod
    def from_dict(cls, data: dict) -> "ConstraintRule":
        match = data.get("match", {})
        event = match.get("event_type")
        if isinstance(event, str):
            if event not in EVENT_CODES:
                raise ValueError(f"unknown event type {event!r}")
            event = EVENT_CODES[event]
        try:
            return cls(effect=data["effect"], event_type=event,
                       area=match.get("area"), work_label=match.get("work_label"),
                       reason=data.get("reason", ""))
        except KeyError as exc:
            raise ValueError(f"constraint rule missing field: {exc}") from exc

    def matches(self, task: DisposalTask, station_event: int, area: str) -> bool:
        if self.event_type is not None and station_event != self.event_type:
            return False
        if self.area is not None and area != self.area:
            return False
        return True

    def forbidden_gaps(self, items: list, n_gaps: int) -> set[int]:
        if self.effect == "force_front":
            return set()
        idx = next((i for i, v in enumerate(items)
                    if getattr(v, "label", None) == self.work_label), None)
        if idx is None:
            return set()
        if self.effect == "forbid_before":
            return set(range(0, idx + 1))
        return set(range(idx + 1, n_gaps))


def vi_c_constraints() -> list[ConstraintRule]:
    """The two human-experience constraints of the warehouse experiments."""
    return [
        ConstraintRule.from_dict({
            "match": {"event_type": "equipment_failure", "work_label": "shutdown"},
            "effect": "forbid_before",
            "reason": "repair only after the shutdown step",
        }),
        ConstraintRule.from_dict({
            "match": {"event_type": "equipment_failure", "area": "road"},
            "effect": "force_front",
            "reason": "conveyor failures are disposed of first",
        }),
    ]


# ---------------------------------------------------------------------------
# task list sources

class TaskSource(Protocol):
    def propose(self, sim: EmergencySim) -> list[DisposalTask]: ...


RESCUE_DURATION = 10
PREVENTATIVE_DURATION = 1


def infection_pressure(sim: EmergencySim) -> dict[int, float]:
    """Per-station sum of w_src / d over alight neighbors (spread exposure)."""
    g = sim.graph
    pressure: dict[int, float] = {}
    for src in sorted(g.base.emergency_set):
        w = g.base.stations[src].resources
        for dst in g.base.neighbors(src):
            state = g.base.stations[dst]
            if state.k != NORMAL or dst in g.protected:
                continue
            d = float(g.base.adjacency[src, dst])
            pressure[dst] = pressure.get(dst, 0.0) + w / d
    return pressure


def _interleave(rescues: list[DisposalTask],
                preventatives: list[DisposalTask]) -> list[DisposalTask]:
    out: list[DisposalTask] = []
    for i in range(max(len(rescues), len(preventatives))):
        if i < len(rescues):
            out.append(rescues[i])
        if i < len(preventatives):
            out.append(preventatives[i])
    return out


@dataclass
class SurrogateSource:
    """Ground-truth stand-in for the filtering phase during offline training.

    Rescue tasks for every alight station (by deadline) interleaved with
    preventative tasks for their still-normal unprotected neighbors (by
    infection pressure), so a constrained task window always carries both
    kinds.
    """

    task_value: float = 2.0
    preventative_deadline: int = 60
    rescue_duration: int = RESCUE_DURATION
    preventative_duration: int = PREVENTATIVE_DURATION
    last_scores: dict = field(default_factory=dict)

    def propose(self, sim: EmergencySim) -> list[DisposalTask]:
        g = sim.graph
        rescues: list[DisposalTask] = []
        self.last_scores = {}
        for station in sorted(g.base.emergency_set):
            ev = sim.active_events.get(station)
            deadline = ev.rescue_deadline if ev else sim.tick
            rescues.append(DisposalTask(station, RESCUE, deadline, self.task_value,
                                        duration=self.rescue_duration))
            self.last_scores[station] = 1.0
        rescues.sort(key=lambda t: (t.deadline, t.station))
        pressure = infection_pressure(sim)
        preventatives = []
        for dst, p in sorted(pressure.items(), key=lambda kv: (-kv[1], kv[0])):
            preventatives.append(
                DisposalTask(dst, PREVENTATIVE, sim.tick + self.preventative_deadline,
                             self.task_value, duration=self.preventative_duration))
            self.last_scores[dst] = min(1.0, 0.5 + 0.5 * p / max(sim.w_max, 1e-9))
        return _interleave(rescues, preventatives)


@dataclass
class PredictorSource:
    """Live filtering phase: the trained predictor ranks the key nodes."""

    model: GACRNNModel
    task_size: int = 7
    task_value: float = 2.0
    preventative_deadline: int = 60
    rescue_duration: int = RESCUE_DURATION
    preventative_duration: int = PREVENTATIVE_DURATION
    ensure_rescues: bool = True
    _history: list = field(default_factory=list)
    _history_tick: int = -1
    last_scores: dict = field(default_factory=dict)

    def propose(self, sim: EmergencySim) -> list[DisposalTask]:
        if sim.tick != self._history_tick:  # propose may run twice per tick
            self._history.append(sim.signal().matrix)
            self._history_tick = sim.tick
        if len(self._history) > self.model.window:
            self._history.pop(0)
        tasks: list[DisposalTask] = []
        self.last_scores = {}
        if self.ensure_rescues:
            for station in sorted(sim.graph.base.emergency_set):
                ev = sim.active_events.get(station)
                deadline = ev.rescue_deadline if ev else sim.tick
                tasks.append(DisposalTask(station, RESCUE, deadline, self.task_value,
                                          duration=self.rescue_duration))
                self.last_scores[station] = 1.0
        if len(self._history) == self.model.window:
            history = np.stack(self._history)
            probs = self.model.forward(history, sim.graph.base.adjacency)
            pred = predict_key_nodes(probs, self.task_size, tick=sim.tick)
            listed = {t.station for t in tasks}
            for (station, score) in pred.entries:
                self.last_scores.setdefault(station, score)
            for task in pred.to_tasks(sim, self.task_value, self.preventative_deadline):
                if task.station not in listed:
                    task.duration = (self.rescue_duration if task.kind == RESCUE
                                     else self.preventative_duration)
                    tasks.append(task)
        return tasks

    def last_prediction(self, sim: EmergencySim):
        if len(self._history) < self.model.window:
            return None
        probs = self.model.forward(np.stack(self._history), sim.graph.base.adjacency)
        return predict_key_nodes(probs, self.task_size, tick=sim.tick)


@dataclass
class CentralitySource:
    """Comparison baseline: emergency nodes plus the reciprocal-centrality ranking."""

    task_size: int = 7
    task_value: float = 2.0
    preventative_deadline: int = 60
    rescue_duration: int = RESCUE_DURATION
    preventative_duration: int = PREVENTATIVE_DURATION

    def propose(self, sim: EmergencySim) -> list[DisposalTask]:
        g = sim.graph
        tasks = []
        for station in sorted(g.base.emergency_set):
            ev = sim.active_events.get(station)
            deadline = ev.rescue_deadline if ev else sim.tick
            tasks.append(DisposalTask(station, RESCUE, deadline, self.task_value,
                                      duration=self.rescue_duration))
        cbar = mean_inverse_centrality(sim.centrality_scores())
        # the most central stations have the smallest reciprocal score
        ranked = sorted(cbar.items(), key=lambda kv: (kv[1], kv[0]))
        listed = {t.station for t in tasks}
        for station, _ in ranked:
            if len(listed) >= self.task_size:
                break
            state = g.base.stations[station]
            if station in listed or state.k != NORMAL or station in g.protected:
                continue
            listed.add(station)
            tasks.append(DisposalTask(station, PREVENTATIVE,
                                      sim.tick + self.preventative_deadline,
                                      self.task_value,
                                      duration=self.preventative_duration))
        return tasks


# ---------------------------------------------------------------------------
# environment

@dataclass
class EnvConfig:
    task_size: int = 7
    max_positions: int = 12        # gap slots per task in the action lattice
    station_feature_width: int = 7
    task_feature_width: int = 8


@dataclass
class TaskSlot:
    task: DisposalTask
    slot: int


class DisposalEnv:
    """Gym-style wrapper: insertion actions in, reward deltas out."""

    def __init__(self, sim_factory: Callable[[], EmergencySim], source: TaskSource,
                 rules: Optional[list[ConstraintRule]] = None,
                 cfg: Optional[EnvConfig] = None,
                 beta_override: Optional[float] = None):
        self.sim_factory = sim_factory
        self.source = source
        self.rules = list(rules or [])
        self.cfg = cfg or EnvConfig()
        self.beta_override = beta_override
        self.sim: Optional[EmergencySim] = None
        self.slots: list[Optional[TaskSlot]] = []
        self.task_limit = self.cfg.task_size   # live human window, <= task_size
        self.priority_stations: set[int] = set()  # human adds bypass the window
        self.total_value = 1.0
        self.w_max = 1.0
        self.last_z = 0.0
        self.initial_z = 0.0
        self.cumulative_tasks: set[tuple[int, int]] = set()
        self.tick_log: list[dict] = []

    # -- dimensions ------------------------------------------------------------

    @property
    def n_actions(self) -> int:
        return 1 + self.cfg.task_size * self.cfg.max_positions

    @property
    def obs_dim(self) -> int:
        n = self.sim.graph.base.n
        return (self.cfg.task_size * self.cfg.task_feature_width
                + n * self.cfg.station_feature_width)

    def action_of(self, slot: int, gap: int) -> int:
        return 1 + slot * self.cfg.max_positions + gap

    def slot_gap_of(self, action: int) -> tuple[int, int]:
        a = action - 1
        return a // self.cfg.max_positions, a % self.cfg.max_positions

    # -- lifecycle ---------------------------------------------------------------

    def reset(self) -> tuple[np.ndarray, np.ndarray]:
        self.sim = self.sim_factory()
        self.slots = [None] * self.cfg.task_size
        self.total_value = scenario_total_value(self.sim.graph)
        self.w_max = self.sim.w_max
        self.cumulative_tasks = set()
        self.tick_log = []
        self._refresh_tasks()
        breakdown = reward_components(self.sim.graph, self.total_value,
                                      self.beta_override)
        self.last_z = breakdown.z
        self.initial_z = breakdown.z
        return self.observation(), self.mask()

    def _refresh_tasks(self) -> None:
        g = self.sim.graph
        for i, slot in enumerate(self.slots):
            if slot is None:
                continue
            task = slot.task
            state = g.base.stations[task.station]
            executed = task.uid in g.completed_task_uids
            dead = state.k == DAMAGED
            resolved_preventative = (task.kind == RESCUE and state.k == NORMAL
                                     and not task.placed)
            if executed or dead or resolved_preventative:
                if task.placed and dead:
                    pass  # stays in the dead chain; the slot is still freed
                self.slots[i] = None
        listed = {s.task.station for s in self.slots if s is not None}
        # a shrunken human window evicts unplaced surplus entries first
        if len(listed) > self.task_limit:
            for i in reversed(range(len(self.slots))):
                slot = self.slots[i]
                if slot is not None and not slot.task.placed:
                    listed.discard(slot.task.station)
                    self.slots[i] = None
                    if len(listed) <= self.task_limit:
                        break
        proposals = self.source.propose(self.sim)
        for task in proposals:
            if task.station in listed:
                continue
            if len(listed) >= self.task_limit \
                    and task.station not in self.priority_stations:
                continue
            free = next((i for i, s in enumerate(self.slots) if s is None), None)
            if free is None:
                break
            task.uid = g.next_task_uid()
            self.slots[free] = TaskSlot(task, free)
            listed.add(task.station)
            self.cumulative_tasks.add((task.station, task.uid))

    def evict_unplaced(self, station: int) -> bool:
        """Free the slot of an unplaced task at this station (human delete)."""
        for i, slot in enumerate(self.slots):
            if slot is not None and slot.task.station == station \
                    and not slot.task.placed:
                self.slots[i] = None
                return True
        return False

    def listed_stations(self) -> set[int]:
        return {s.task.station for s in self.slots if s is not None}

    def has_decisions(self) -> bool:
        return any(s is not None for s in self.slots)

    # -- featurization ------------------------------------------------------------

    def observation(self) -> np.ndarray:
        g = self.sim.graph
        n = g.base.n
        tick = self.sim.tick
        obs = np.zeros(self.obs_dim)
        tw = self.cfg.task_feature_width
        pressure = infection_pressure(self.sim)
        for i, slot in enumerate(self.slots):
            if slot is None:
                continue
            task = slot.task
            state = g.base.stations[task.station]
            base = i * tw
            obs[base] = float(task.kind)
            obs[base + 1] = max(-1.0, min(1.0, (task.deadline - tick) / 100.0))
            obs[base + 2 + min(state.k, 2)] = 1.0
            obs[base + 5] = 1.0 if task.placed else 0.0
            obs[base + 6] = min(1.0, pressure.get(task.station, 0.0) / self.w_max)
            obs[base + 7] = state.resources / self.w_max
        off = self.cfg.task_size * tw
        sw = self.cfg.station_feature_width
        for i in range(n):
            state = g.base.stations[i]
            base = off + i * sw
            obs[base] = g.completion_rate(i)
            obs[base + 1 + state.k] = 1.0
            obs[base + 4] = state.resources / self.w_max
            obs[base + 5] = 1.0 if i in g.protected else 0.0
            obs[base + 6] = min(1.0, pressure.get(i, 0.0) / self.w_max)
        return obs

    # -- masking ----------------------------------------------------------------

    def mask(self) -> np.ndarray:
        g = self.sim.graph
        mask = np.zeros(self.n_actions, dtype=bool)
        mask[NOOP] = True
        for i, slot in enumerate(self.slots):
            if slot is None:
                continue
            task = slot.task
            if task.placed and self._executing(task):
                continue  # a step already being executed cannot move
            sub = g.subgraphs.get(task.station)
            items = sub.items if sub else []
            n_gaps = min(len(items) + 1, self.cfg.max_positions)
            state = g.base.stations[task.station]
            area = g.areas.get(task.station, "")
            forbidden: set[int] = set()
            force = False
            for rule in self.rules:
                if not rule.matches(task, state.event_type, area):
                    continue
                if rule.effect == "force_front":
                    force = True
                else:
                    forbidden |= rule.forbidden_gaps(items, n_gaps)
            legal = [gap for gap in range(n_gaps) if gap not in forbidden]
            if force and legal:
                legal = legal[:1]
            if task.placed and legal:
                # repositioning is screened down to a single useful move:
                # promote the waiting step to its earliest legal gap
                current = next((j for j, v in enumerate(items)
                                if isinstance(v, DisposalTask) and v.uid == task.uid),
                               None)
                legal = [legal[0]] if current is not None and legal[0] < current else []
            for gap in legal:
                mask[self.action_of(i, gap)] = True
        return mask

    def _executing(self, task: DisposalTask) -> bool:
        progress = self.sim._progress.get(task.station)
        return progress is not None and progress[0] == ("t", task.uid)

    def legal_actions(self) -> tuple[list[int], np.ndarray]:
        mask = self.mask()
        return [int(a) for a in np.nonzero(mask)[0]], mask

    # -- stepping -----------------------------------------------------------------

    def step(self, action: int):
        mask = self.mask()
        if not mask[action]:
            raise MaskViolation(f"action {action} is masked at tick {self.sim.tick}")
        applied = None
        if action != NOOP:
            slot_idx, gap = self.slot_gap_of(action)
            slot = self.slots[slot_idx]
            task = slot.task
            sub = self.sim.graph.subgraph(task.station, create=True)
            insert_task(self.sim.graph, task,
                        InsertPosition(task.station, gap, sub.version))
            applied = {"station": task.station, "gap": gap, "kind": task.kind}

        report = self.sim.step()
        reward_total = 0.0
        breakdown = reward_components(self.sim.graph, self.total_value,
                                      self.beta_override)
        breakdown.r = breakdown.z - self.last_z
        self.last_z = breakdown.z
        reward_total += breakdown.r
        self._log_tick(report, action, applied, breakdown, mask)
        self._refresh_tasks()

        # ticks with nothing to decide advance on their own
        while not self.sim.done and not self.has_decisions():
            report = self.sim.step()
            auto = reward_components(self.sim.graph, self.total_value,
                                     self.beta_override)
            auto.r = auto.z - self.last_z
            self.last_z = auto.z
            reward_total += auto.r
            self._log_tick(report, None, None, auto, None)
            self._refresh_tasks()

        done = self.sim.done
        return self.observation(), reward_total, done, self.mask(), breakdown

    def _log_tick(self, report, action, applied, breakdown, mask) -> None:
        k_counts = [0, 0, 0]
        for state in self.sim.graph.base.stations.values():
            k_counts[state.k] += 1
        self.tick_log.append({
            "tick": report.tick,
            "action": int(action) if action is not None else None,
            "applied": applied,
            "masked_count": int((~mask).sum()) if mask is not None else None,
            "reward": breakdown.to_dict(),
            "k_counts": k_counts,
            "executed": [list(e) for e in report.executed],
            "failures": list(report.failures),
            "new_events": [[s, t] for s, t in report.new_events],
            "cum_tasks": len(self.cumulative_tasks),
            "cum_failures": len(self.sim.cumulative_failures),
        })

    def potential(self) -> float:
        """State potential for (optional) policy-invariant training shaping."""
        return -float(len(self.sim.graph.base.emergency_set))

    # -- spec-shaped state view ----------------------------------------------------

    def state_snapshot(self) -> dict:
        from .graph import task_links
        g = self.sim.graph
        tasks = [s.task for s in self.slots if s is not None]
        return {
            "task_list": [{"station": t.station, "kind": t.kind,
                           "deadline": t.deadline, "value": t.value,
                           "placed": t.placed} for t in tasks],
            "station_states": {i: g.base.stations[i].k for i in range(g.base.n)},
            "subgraphs": {s: [list(k) for k in
                              (sub.order_edges or [])]
                          for s, sub in g.subgraphs.items()},
            "placements": {f"t{t.uid}": task_links(g, t) for t in tasks},
        }


# ---------------------------------------------------------------------------
# Q networks

class QNetwork:
    """Plain MLP with rectified hidden layers over the kernel's dense layers."""

    def __init__(self, obs_dim: int, n_actions: int, hidden: tuple[int, ...] = (128, 64),
                 seed: int = 0):
        self.params = ParamSet()
        rng = np.random.default_rng(seed)
        dims = [obs_dim, *hidden, n_actions]
        self.layers = [Dense(self.params, f"l{i}", dims[i], dims[i + 1], rng)
                       for i in range(len(dims) - 1)]

    def forward(self, x: np.ndarray, collect: bool = False):
        caches = []
        out = x
        for i, layer in enumerate(self.layers):
            out, cache = layer.forward(out)
            pre = out
            if i < len(self.layers) - 1:
                out = np.maximum(out, 0.0)
            caches.append((cache, pre))
        return (out, caches) if collect else out

    def backward(self, dout: np.ndarray, caches) -> None:
        grad = dout
        for i in reversed(range(len(self.layers))):
            cache, pre = caches[i]
            if i < len(self.layers) - 1:
                grad = grad * (pre > 0)
            grad = self.layers[i].backward(grad, cache)


class SlotQNetwork:
    """Slot-equivariant Q head over the fixed action lattice.

    The station block is pooled into a global context vector; one shared MLP
    scores each task slot's gaps from (slot features, context), and a
    separate head scores the no-op. Output stays a flat vector aligned with
    the lattice, but weights are shared across slots, so the value of "place
    the hot firewall" transfers between slot indices.
    """

    def __init__(self, env_cfg: EnvConfig, n_stations: int, embed: int = 32,
                 slot_hidden: int = 64, seed: int = 0):
        self.cfg = env_cfg
        self.n_stations = n_stations
        self.embed = embed
        self.params = ParamSet()
        rng = np.random.default_rng(seed)
        sw = env_cfg.station_feature_width
        tw = env_cfg.task_feature_width
        self.enc1 = Dense(self.params, "enc1", n_stations * sw, 64, rng)
        self.enc2 = Dense(self.params, "enc2", 64, embed, rng)
        self.slot1 = Dense(self.params, "slot1", tw + embed, slot_hidden, rng)
        self.slot2 = Dense(self.params, "slot2", slot_hidden, env_cfg.max_positions, rng)
        self.noop_head = Dense(self.params, "noop", embed, 1, rng)

    def forward(self, x: np.ndarray, collect: bool = False):
        B = x.shape[0]
        T = self.cfg.task_size
        tw = self.cfg.task_feature_width
        tasks = x[:, :T * tw].reshape(B * T, tw)
        stations = x[:, T * tw:]
        h1, c1 = self.enc1.forward(stations)
        a1 = np.maximum(h1, 0.0)
        h2, c2 = self.enc2.forward(a1)
        ctx = np.maximum(h2, 0.0)
        ctx_rep = np.repeat(ctx, T, axis=0)
        z = np.concatenate([tasks, ctx_rep], axis=1)
        s1, c3 = self.slot1.forward(z)
        a3 = np.maximum(s1, 0.0)
        s2, c4 = self.slot2.forward(a3)
        q_noop, c5 = self.noop_head.forward(ctx)
        out = np.concatenate([q_noop, s2.reshape(B, -1)], axis=1)
        if collect:
            return out, (B, h1, h2, s1, c1, c2, c3, c4, c5)
        return out

    def backward(self, dout: np.ndarray, caches) -> None:
        B, h1, h2, s1, c1, c2, c3, c4, c5 = caches
        T = self.cfg.task_size
        tw = self.cfg.task_feature_width
        d_noop = dout[:, :1]
        d_slots = dout[:, 1:].reshape(B * T, self.cfg.max_positions)
        d_a3 = self.slot2.backward(d_slots, c4)
        d_s1 = d_a3 * (s1 > 0)
        d_z = self.slot1.backward(d_s1, c3)
        d_ctx = d_z[:, tw:].reshape(B, T, self.embed).sum(axis=1)
        d_ctx += self.noop_head.backward(d_noop, c5)
        d_h2 = d_ctx * (h2 > 0)
        d_a1 = self.enc2.backward(d_h2, c2)
        d_h1 = d_a1 * (h1 > 0)
        self.enc1.backward(d_h1, c1)


@dataclass
class QNetworkPair:
    online: QNetwork
    target: QNetwork
    sync_every: int

    def sync(self) -> None:
        self.target.params.copy_values_from(self.online.params)


def select_action(q_values: np.ndarray, mask: np.ndarray, epsilon: float,
                  rng: np.random.Generator, noop: int = NOOP) -> int:
    """Epsilon-greedy over unmasked actions; everything masked means no-op."""
    legal = np.nonzero(mask)[0]
    if len(legal) == 0:
        return noop
    if rng.random() < epsilon:
        return int(legal[rng.integers(0, len(legal))])
    q = np.where(mask, q_values, -np.inf)
    return int(np.argmax(q))


def ddqn_targets(pair: QNetworkPair, rewards: np.ndarray, next_obs: np.ndarray,
                 next_masks: np.ndarray, dones: np.ndarray,
                 gamma: float) -> np.ndarray:
    """Alg.-2 targets: select by the sum of both nets, evaluate on the target.

    Terminal transitions bootstrap nothing: y = r.
    """
    q1 = pair.online.forward(next_obs)
    q2 = pair.target.forward(next_obs)
    combined = np.where(next_masks, q1 + q2, -np.inf)
    # rows with no legal action fall back to no-op
    best = np.argmax(combined, axis=1)
    boot = q2[np.arange(len(best)), best]
    boot = np.where(next_masks.any(axis=1), boot, 0.0)
    return rewards + gamma * boot * (1.0 - dones)


@dataclass
class Transition:
    obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray
    next_mask: np.ndarray
    done: bool


class ReplayMemory:
    """Uniform ring buffer of transitions."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.buffer: list[Transition] = []
        self.cursor = 0

    def __len__(self) -> int:
        return len(self.buffer)

    def push(self, t: Transition) -> None:
        if len(self.buffer) < self.capacity:
            self.buffer.append(t)
        else:
            self.buffer[self.cursor] = t
        self.cursor = (self.cursor + 1) % self.capacity

    def sample(self, batch: int, rng: np.random.Generator) -> list[Transition]:
        idx = rng.integers(0, len(self.buffer), size=batch)
        return [self.buffer[int(i)] for i in idx]


@dataclass
class DdqnConfig:
    capacity: int = 2000
    batch_size: int = 32
    episodes: int = 1500
    gamma: float = 0.97
    epsilon_start: float = 0.9
    epsilon_floor: float = 0.1
    epsilon_decay: float = 0.9995
    lr: float = 1e-3
    sync_every: int = 200          # target refresh period, in decision steps
    hidden: tuple[int, ...] = (128, 64)
    seed: int = 0
    max_steps_per_episode: int = 10 ** 6
    # training-only conditioning: replay rewards are scaled, and optionally
    # shaped with the policy-invariant potential difference gamma*P(s')-P(s)
    # when the env exposes potential(). Logged env rewards stay untouched.
    reward_scale: float = 1.0
    potential_coef: float = 0.0


@dataclass
class TrainResult:
    pair: QNetworkPair
    episode_rewards: list[float]
    epsilon: float
    steps: int


def train_ddqn(env, cfg: DdqnConfig,
               net_factory: Optional[Callable[[int, int, int], object]] = None,
               step_hook: Optional[Callable[[int, int, float], None]] = None,
               sync_hook: Optional[Callable[[int], None]] = None,
               resume_pair: Optional[QNetworkPair] = None,
               resume_epsilon: Optional[float] = None,
               episodes_done: int = 0,
               episode_hook: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Offline Double-DQN training against any env with the step protocol.

    The env must expose ``reset() -> (obs, mask)`` and
    ``step(a) -> (obs, r, done, mask, info)``. Masked Q values never win the
    argmax, in either the behavior policy or the bootstrap target.
    """
    rng = np.random.default_rng(cfg.seed)
    obs, mask = env.reset()
    if net_factory is None:
        net_factory = lambda o, a, s: QNetwork(o, a, cfg.hidden, s)
    if resume_pair is not None:
        pair = resume_pair
    else:
        pair = QNetworkPair(net_factory(len(obs), len(mask), cfg.seed),
                            net_factory(len(obs), len(mask), cfg.seed),
                            cfg.sync_every)
        pair.sync()
    opt = Adam(pair.online.params, lr=cfg.lr)
    replay = ReplayMemory(cfg.capacity)
    epsilon = cfg.epsilon_start if resume_epsilon is None else resume_epsilon
    steps = 0
    episode_rewards: list[float] = []
    shaped = cfg.potential_coef != 0.0 and hasattr(env, "potential")

    try:
        for episode in range(episodes_done, cfg.episodes):
            if episode > episodes_done:
                obs, mask = env.reset()
            total = 0.0
            phi = env.potential() if shaped else 0.0
            for _ in range(cfg.max_steps_per_episode):
                q = pair.online.forward(obs[None, :])[0]
                action = select_action(q, mask, epsilon, rng)
                next_obs, reward, done, next_mask, _ = env.step(action)
                r_train = float(reward)
                if shaped:
                    phi2 = env.potential()
                    r_train += cfg.potential_coef * (cfg.gamma * phi2 - phi)
                    phi = phi2
                replay.push(Transition(obs, action, cfg.reward_scale * r_train,
                                       next_obs, next_mask.copy(), bool(done)))
                obs, mask = next_obs, next_mask
                total += reward
                steps += 1
                epsilon = max(cfg.epsilon_floor, epsilon * cfg.epsilon_decay)

                if len(replay) >= cfg.batch_size:
                    batch = replay.sample(cfg.batch_size, rng)
                    b_obs = np.stack([t.obs for t in batch])
                    b_next = np.stack([t.next_obs for t in batch])
                    b_masks = np.stack([t.next_mask for t in batch])
                    b_r = np.array([t.reward for t in batch])
                    b_done = np.array([float(t.done) for t in batch])
                    b_a = np.array([t.action for t in batch])
                    y = ddqn_targets(pair, b_r, b_next, b_masks, b_done, cfg.gamma)
                    q_all, caches = pair.online.forward(b_obs, collect=True)
                    picked = q_all[np.arange(len(batch)), b_a]
                    dq = np.zeros_like(q_all)
                    dq[np.arange(len(batch)), b_a] = 2.0 * (picked - y) / len(batch)
                    pair.online.backward(dq, caches)
                    opt.step()

                if steps % cfg.sync_every == 0:
                    pair.sync()
                    if sync_hook is not None:
                        sync_hook(steps)
                if step_hook is not None:
                    step_hook(episode, steps, epsilon)
                if done:
                    break
            episode_rewards.append(total)
            if episode_hook is not None:
                episode_hook(episode, total)
    except KeyboardInterrupt:
        log.warning("training interrupted after %d episodes",
                    episodes_done + len(episode_rewards))
    return TrainResult(pair, episode_rewards, epsilon, steps)


# ---------------------------------------------------------------------------
# policies over the environment

def run_policy(env: DisposalEnv, choose: Callable[[DisposalEnv, np.ndarray], int]):
    """Roll one episode; returns (tick log, episode reward)."""
    obs, mask = env.reset()
    total = 0.0
    done = env.sim.done
    while not done:
        action = choose(env, mask)
        obs, r, done, mask, _ = env.step(action)
        total += r
    return env.tick_log, total


def greedy_action(env: DisposalEnv, mask: np.ndarray) -> int:
    """Most urgent unplaced task (deadline, then value) at its earliest legal gap."""
    candidates = []
    for i, slot in enumerate(env.slots):
        if slot is None or slot.task.placed:
            continue
        candidates.append((slot.task.deadline, -slot.task.value, i))
    for _, _, i in sorted(candidates):
        for gap in range(env.cfg.max_positions):
            a = env.action_of(i, gap)
            if mask[a]:
                return a
    return NOOP


def greedy_baseline(env: DisposalEnv):
    return run_policy(env, greedy_action)


def dqn_policy(pair: QNetworkPair):
    def choose(env: DisposalEnv, mask: np.ndarray) -> int:
        q = pair.online.forward(env.observation()[None, :])[0]
        return select_action(q, mask, epsilon=0.0,
                             rng=np.random.default_rng(0))
    return choose


def slot_network_factory(env: DisposalEnv, embed: int = 32, slot_hidden: int = 64):
    """Factory for the slot-equivariant Q architecture bound to one env."""
    def make(obs_dim: int, n_actions: int, seed: int):
        return SlotQNetwork(env.cfg, env.sim.graph.base.n, embed, slot_hidden, seed)
    return make


# ---------------------------------------------------------------------------
# run metrics and exports

def run_metrics(tick_log: list[dict]) -> dict:
    """Per-run means plus the damage rate of Eq.-28 form."""
    if not tick_log:
        return {"mean_r_work": 0.0, "rate_fail": 0.0, "mean_r": 0.0}
    mean_r_work = float(np.mean([t["reward"]["r_work"] for t in tick_log]))
    mean_r = float(np.mean([t["reward"]["r"] for t in tick_log]))
    failures = tick_log[-1]["cum_failures"]
    tasks = tick_log[-1]["cum_tasks"]
    t_max = len(tick_log)
    rate_fail = failures / (tasks * t_max) if tasks else 0.0
    return {"mean_r_work": mean_r_work, "rate_fail": rate_fail, "mean_r": mean_r,
            "failures": failures, "tasks": tasks}


def export_gantt(tick_log: list[dict], areas: dict[int, str]) -> list[dict]:
    """One bar per executed vertex: station, area, label, kind, start, end.

    A vertex completing at tick t after d execution ticks spans [t-d+1, t+1).
    """
    rows = []
    for entry in tick_log:
        for record in entry["executed"]:
            station, label, kind, _value = record[:4]
            duration = record[4] if len(record) > 4 else 1
            rows.append({"station": int(station), "area": areas.get(station, ""),
                         "label": label, "kind": int(kind),
                         "start": entry["tick"] - int(duration) + 1,
                         "end": entry["tick"] + 1})
    return rows


def write_run_log(tick_log: list[dict], path) -> None:
    with open(path, "w") as fh:
        for entry in tick_log:
            fh.write(json.dumps(entry) + "\n")


def read_run_log(path) -> list[dict]:
    import pathlib
    return [json.loads(line) for line in pathlib.Path(path).read_text().splitlines()
            if line.strip()]
