"""Session orchestration of the two-phase loop and the human-facing HTTP/WS API.

One writer loop per session: every tick runs features -> prediction -> human
edits -> task list -> scheduler insertion -> simulator step -> frame
broadcast. API handlers enqueue edits/config changes, which are applied at
the next tick boundary; reads serve snapshots.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse

from .graph import EMERGENCY, RESCUE, Scenario
from .predictor import GACRNNModel
from .scheduler import (ConstraintRule, DisposalEnv, EnvConfig, NOOP,
                        PredictorSource, QNetwork, QNetworkPair, SlotQNetwork,
                        SurrogateSource, dqn_policy, export_gantt,
                        greedy_action, run_metrics, select_action)
from .sim import EmergencySim, ScenarioConfig, generate_scenario, scale_events

log = logging.getLogger(__name__)

FRAME_VERSION = 1


class ServiceError(Exception):
    def __init__(self, message: str, status: int = 400):
        super().__init__(message)
        self.status = status


def file_digest(path) -> str:
    return hashlib.blake2b(Path(path).read_bytes(), digest_size=8).hex()


@dataclass
class SessionSpec:
    """Everything needed to (re)build one deterministic session."""

    scenario_path: Optional[str] = None
    scenario_inline: Optional[dict] = None
    predictor_path: Optional[str] = None
    scheduler_path: Optional[str] = None
    scale: int = 1
    seed: int = 0
    episode_ticks: int = 600
    task_size: int = 7
    tick_interval: float = 0.0
    constraints: list = field(default_factory=list)
    beta: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "scenario_path": self.scenario_path,
            "scenario_inline": self.scenario_inline,
            "predictor_path": self.predictor_path,
            "scheduler_path": self.scheduler_path,
            "scale": self.scale, "seed": self.seed,
            "episode_ticks": self.episode_ticks, "task_size": self.task_size,
            "tick_interval": self.tick_interval,
            "constraints": self.constraints, "beta": self.beta,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SessionSpec":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in data.items() if k in known})


class EditableSource:
    """Wraps the machine task source with the human V^hE edit semantics.

    Deleted stations stay suppressed until a reset (except that a station in
    the emergency state can only be suppressed for the tick on which it was
    deleted); added stations join the list as long as they stay relevant.
    check=true with no pending edits freezes the current machine list for
    task_size ticks.
    """

    def __init__(self, base):
        self.base = base
        self.deleted: set[int] = set()
        self.deleted_this_tick: set[int] = set()
        self.added: set[int] = set()
        self.machine_list: list = []
        self.machine_scores: dict[int, float] = {}
        self.locked_until = -1
        self.locked_list: list = []

    @property
    def last_scores(self) -> dict:
        return self.machine_scores

    def propose(self, sim: EmergencySim):
        if sim.tick < self.locked_until:
            proposals = list(self.locked_list)
        else:
            proposals = self.base.propose(sim)
            self.machine_list = list(proposals)
            self.machine_scores = dict(getattr(self.base, "last_scores", {}))
        out = []
        for task in proposals:
            state = sim.graph.base.stations[task.station]
            if task.station in self.deleted and state.k != EMERGENCY:
                continue
            if task.station in self.deleted_this_tick:
                continue
            out.append(task)
        listed = {t.station for t in out}
        human_extra = []
        for station in sorted(self.added):
            if station in listed:
                continue
            extra = [t for t in self.base.propose_for(sim, station)] \
                if hasattr(self.base, "propose_for") else []
            if extra:
                human_extra.extend(extra)
            else:
                from .scheduler import (PREVENTATIVE_DURATION, RESCUE_DURATION)
                from .graph import DisposalTask, PREVENTATIVE
                state = sim.graph.base.stations[station]
                if state.k == EMERGENCY:
                    ev = sim.active_events.get(station)
                    deadline = ev.rescue_deadline if ev else sim.tick
                    human_extra.append(DisposalTask(station, RESCUE, deadline, 2.0,
                                                    duration=RESCUE_DURATION))
                else:
                    human_extra.append(DisposalTask(station, PREVENTATIVE,
                                                    sim.tick + 60, 2.0,
                                                    duration=PREVENTATIVE_DURATION))
        self.deleted_this_tick = set()
        return human_extra + out

    def lock(self, sim: EmergencySim, ticks: int) -> None:
        self.locked_until = sim.tick + ticks
        self.locked_list = list(self.machine_list)

    def reset(self) -> None:
        self.deleted.clear()
        self.added.clear()
        self.locked_until = -1
        if hasattr(self.base, "_history"):
            pass  # prediction is recomputed from current data on the next tick


class Session:
    """Single simulation session driven by one writer loop."""

    def __init__(self, spec: SessionSpec, sid: Optional[str] = None):
        self.id = sid or uuid.uuid4().hex[:12]
        self.spec = spec
        self.mode = "paused"
        self.frames: list[dict] = []
        self.edit_log: list[dict] = []
        self.pending_edits: list[dict] = []
        self.model_digests: dict[str, str] = {}
        self.lock = threading.RLock()
        self._thread: Optional[threading.Thread] = None
        self._stop = threading.Event()
        self._build()

    # -- construction ------------------------------------------------------------

    def _build(self) -> None:
        spec = self.spec
        if spec.scenario_inline is not None:
            scenario = Scenario.from_dict(spec.scenario_inline)
        elif spec.scenario_path:
            scenario = Scenario.load(spec.scenario_path)
        else:
            scenario = generate_scenario(ScenarioConfig(seed=spec.seed))
        self.scenario = scenario

        predictor = None
        if spec.predictor_path:
            path = Path(spec.predictor_path)
            if not path.exists():
                raise ServiceError(f"predictor model not found: {path}", 404)
            predictor = GACRNNModel.load(path)
            self.model_digests["predictor"] = file_digest(path)

        self.policy_pair = None
        if spec.scheduler_path:
            path = Path(spec.scheduler_path)
            if not path.exists():
                raise ServiceError(f"scheduler model not found: {path}", 404)
            self.policy_pair = load_policy(path)
            self.model_digests["scheduler"] = file_digest(path)

        if predictor is not None:
            base = PredictorSource(predictor, task_size=spec.task_size)
        else:
            base = SurrogateSource()
        self.source = EditableSource(base)

        events = scale_events(spec.scale, scenario, spec.seed)
        factory = lambda: EmergencySim(scenario, episode_ticks=spec.episode_ticks,
                                       seed=spec.seed, events=events)
        try:
            rules = [ConstraintRule.from_dict(r) for r in spec.constraints]
        except ValueError as exc:
            raise ServiceError(f"constraint compile error: {exc}", 400)
        self.env = DisposalEnv(factory, self.source, rules,
                               EnvConfig(task_size=max(spec.task_size, 7)),
                               beta_override=spec.beta)
        self.env.task_limit = spec.task_size
        self.obs, self.mask = self.env.reset()
        self.done = False

    # -- edits and config ----------------------------------------------------------

    def enqueue_edit(self, op: str, station: Optional[int] = None,
                     actor: str = "human") -> dict:
        with self.lock:
            if op not in ("add", "delete", "reset", "confirm"):
                raise ServiceError(f"unknown edit op {op!r}", 400)
            if op in ("add", "delete"):
                if station is None or station not in self.env.sim.graph.base.stations:
                    raise ServiceError(f"unknown station {station!r}", 400)
            record = {"op": op, "station": station, "tick": self.env.sim.tick,
                      "actor": actor, "applied": False}
            self.pending_edits.append(record)
            self.edit_log.append(record)
            return record

    def set_config(self, task_size: Optional[int] = None,
                   beta: Optional[float] = None,
                   constraint_list: Optional[list] = None,
                   clear_beta: bool = False) -> None:
        with self.lock:
            if task_size is not None:
                if task_size < 1:
                    raise ServiceError("task_size must be >= 1", 400)
                self.spec.task_size = task_size
                self.env.task_limit = min(task_size, self.env.cfg.task_size)
                if hasattr(self.source.base, "task_size"):
                    self.source.base.task_size = task_size
            if beta is not None:
                self.env.beta_override = float(beta)
            if clear_beta:
                self.env.beta_override = None
            if constraint_list is not None:
                try:
                    self.env.rules = [ConstraintRule.from_dict(r)
                                      for r in constraint_list]
                except ValueError as exc:
                    raise ServiceError(f"constraint compile error: {exc}", 400)
                self.spec.constraints = constraint_list

    def _apply_pending_edits(self) -> list[dict]:
        applied = []
        for edit in self.pending_edits:
            op, station = edit["op"], edit["station"]
            if op == "add":
                self.source.added.add(station)
                self.source.deleted.discard(station)
                self.env.priority_stations.add(station)
            elif op == "delete":
                self.source.added.discard(station)
                self.source.deleted.add(station)
                self.source.deleted_this_tick.add(station)
                self.env.priority_stations.discard(station)
                self.env.evict_unplaced(station)
            elif op == "reset":
                self.source.reset()
                self.env.priority_stations.clear()
                for s in list(self.env.listed_stations()):
                    self.env.evict_unplaced(s)
            elif op == "confirm":
                self.source.lock(self.env.sim, self.spec.task_size)
            edit["applied"] = True
            applied.append(edit)
        self.pending_edits = []
        return applied

    # -- the loop -------------------------------------------------------------------

    def tick(self) -> dict:
        """One full pass of the two-phase loop; returns the broadcast frame."""
        with self.lock:
            if self.done:
                return self.frames[-1] if self.frames else {}
            applied = self._apply_pending_edits()
            self.env._refresh_tasks()
            mask = self.env.mask()
            action = self._choose_action(mask)
            obs, reward, done, next_mask, breakdown = self.env.step(action)
            self.obs, self.mask, self.done = obs, next_mask, done
            frame = self._frame(applied, breakdown, mask)
            self.frames.append(frame)
            return frame

    def _choose_action(self, mask: np.ndarray) -> int:
        if self.policy_pair is not None:
            q = self.policy_pair.online.forward(self.env.observation()[None, :])[0]
            return select_action(q, mask, 0.0, np.random.default_rng(0))
        return greedy_action(self.env, mask)

    def _frame(self, applied_edits, breakdown, mask) -> dict:
        env = self.env
        tick_entry = env.tick_log[-1] if env.tick_log else {}
        tasks = []
        scores = self.source.last_scores
        for slot in env.slots:
            if slot is None:
                continue
            t = slot.task
            k = env.sim.graph.base.stations[t.station].k
            tasks.append({
                "station": t.station,
                "g": round(float(scores.get(t.station, 1.0)), 6),
                "color": "red" if k == EMERGENCY else "yellow",
                "kind": t.kind,
                "placed": t.placed,
                "deadline": t.deadline,
            })
        tasks.sort(key=lambda e: (-e["g"], e["station"]))
        metrics = run_metrics(env.tick_log)
        return {
            "type": "frame",
            "version": FRAME_VERSION,
            "tick": env.sim.tick,
            "done": self.done,
            "tasks": tasks,
            "beta": breakdown.beta,
            "reward": breakdown.to_dict(),
            "metrics": {"mean_r_work": metrics["mean_r_work"],
                        "rate_fail": metrics["rate_fail"],
                        "mean_r": metrics["mean_r"]},
            "mask_stats": {"legal": int(mask.sum()),
                           "total": int(mask.size)},
            "gantt_delta": export_gantt([tick_entry], env.sim.graph.areas)
            if tick_entry else [],
            "edits_applied": [{k: v for k, v in e.items() if k != "applied"}
                              for e in applied_edits],
            "k_counts": tick_entry.get("k_counts", []),
        }

    # -- control -----------------------------------------------------------------

    def control(self, mode: str) -> None:
        if mode == "step":
            self.tick()
            return
        if mode == "run":
            with self.lock:
                if self.mode == "running":
                    return
                self.mode = "running"
                self._stop.clear()
                self._thread = threading.Thread(target=self._run_loop, daemon=True)
                self._thread.start()
            return
        if mode == "pause":
            self._stop.set()
            if self._thread is not None:
                self._thread.join(timeout=5)
            self.mode = "paused"
            return
        raise ServiceError(f"unknown control mode {mode!r}", 400)

    def _run_loop(self) -> None:
        while not self._stop.is_set() and not self.done:
            self.tick()
            if self.spec.tick_interval > 0:
                time.sleep(self.spec.tick_interval)
        self.mode = "paused" if not self.done else "finished"

    # -- views ---------------------------------------------------------------------

    def state(self) -> dict:
        with self.lock:
            return {
                "id": self.id,
                "mode": self.mode,
                "tick": self.env.sim.tick,
                "done": self.done,
                "frames": len(self.frames),
                "task_size": self.spec.task_size,
                "beta_override": self.env.beta_override,
                "model_digests": self.model_digests,
                "spec": self.spec.to_dict(),
            }

    def tasklist(self) -> list[dict]:
        with self.lock:
            return self.frames[-1]["tasks"] if self.frames else []

    def metrics(self) -> dict:
        with self.lock:
            return run_metrics(self.env.tick_log)

    def gantt(self) -> list[dict]:
        with self.lock:
            return export_gantt(self.env.tick_log, self.env.sim.graph.areas)

    def snapshot_frame(self) -> dict:
        with self.lock:
            if self.frames:
                snap = dict(self.frames[-1])
            else:
                snap = {"type": "frame", "version": FRAME_VERSION,
                        "tick": self.env.sim.tick, "done": False, "tasks": [],
                        "beta": 0.5, "metrics": {}, "mask_stats": {},
                        "gantt_delta": [], "edits_applied": [], "reward": {},
                        "k_counts": []}
            snap["type"] = "snapshot"
            snap["frame_index"] = len(self.frames) - 1
            return snap

    # -- persistence ------------------------------------------------------------------

    def persist(self, path) -> None:
        with self.lock, open(path, "w") as fh:
            header = {"type": "header", "version": FRAME_VERSION,
                      "spec": self.spec.to_dict(),
                      "model_digests": self.model_digests,
                      "frame_count": len(self.frames),
                      "scenario": self.scenario.to_dict()}
            fh.write(json.dumps(header) + "\n")
            for edit in self.edit_log:
                fh.write(json.dumps({"type": "edit", **{k: v for k, v in
                                                        edit.items()
                                                        if k != "applied"}}) + "\n")
            for frame in self.frames:
                fh.write(json.dumps(frame) + "\n")


def replay(path) -> tuple[Session, list[dict], list[str]]:
    """Re-run a persisted session; returns (session, recorded frames, mismatches)."""
    lines = [json.loads(l) for l in Path(path).read_text().splitlines() if l.strip()]
    if not lines or lines[0].get("type") != "header":
        raise ServiceError("run file has no header", 400)
    header = lines[0]
    if header.get("version") != FRAME_VERSION:
        raise ServiceError(
            f"run file version {header.get('version')} not supported", 400)
    spec = SessionSpec.from_dict(header["spec"])
    spec.scenario_inline = header["scenario"]
    spec.scenario_path = None
    session = Session(spec)
    for name, digest in header.get("model_digests", {}).items():
        if session.model_digests.get(name) != digest:
            raise ServiceError(
                f"model artifact mismatch for {name!r}: run recorded {digest}, "
                f"loaded {session.model_digests.get(name)}", 409)
    edits = [l for l in lines if l.get("type") == "edit"]
    frames = [l for l in lines if l.get("type") == "frame"]
    expected = header.get("frame_count")
    if expected is not None and len(frames) != expected:
        last_good = frames[-1]["tick"] if frames else None
        raise ServiceError(
            f"run file is truncated: {len(frames)}/{expected} frames "
            f"(last good tick: {last_good})", 400)
    by_tick: dict[int, list[dict]] = {}
    for e in edits:
        by_tick.setdefault(e["tick"], []).append(e)
    mismatches = []
    for i, recorded in enumerate(frames):
        for e in by_tick.get(session.env.sim.tick, []):
            session.enqueue_edit(e["op"], e.get("station"), e.get("actor", "human"))
        produced = session.tick()
        if json.dumps(produced, sort_keys=True) != json.dumps(recorded, sort_keys=True):
            mismatches.append(f"frame {i} (tick {recorded.get('tick')}) differs")
    return session, frames, mismatches


def load_policy(path) -> QNetworkPair:
    """Load a trained scheduler artifact (params + architecture sidecar)."""
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    kind = sidecar.get("arch", "mlp")
    if kind == "slot":
        env_cfg = EnvConfig(**sidecar["env_cfg"])
        net = SlotQNetwork(env_cfg, sidecar["n_stations"], sidecar["embed"],
                           sidecar["slot_hidden"], seed=0)
        twin = SlotQNetwork(env_cfg, sidecar["n_stations"], sidecar["embed"],
                            sidecar["slot_hidden"], seed=0)
    else:
        net = QNetwork(sidecar["obs_dim"], sidecar["n_actions"],
                       tuple(sidecar["hidden"]), seed=0)
        twin = QNetwork(sidecar["obs_dim"], sidecar["n_actions"],
                        tuple(sidecar["hidden"]), seed=0)
    net.params.load(path)
    twin.params.load(path)
    return QNetworkPair(net, twin, sync_every=0)


def save_policy(pair: QNetworkPair, path, env: Optional[DisposalEnv] = None) -> None:
    path = Path(path)
    pair.online.params.save(path)
    if isinstance(pair.online, SlotQNetwork):
        sidecar = {"arch": "slot",
                   "env_cfg": {"task_size": pair.online.cfg.task_size,
                               "max_positions": pair.online.cfg.max_positions,
                               "station_feature_width": pair.online.cfg.station_feature_width,
                               "task_feature_width": pair.online.cfg.task_feature_width},
                   "n_stations": pair.online.n_stations,
                   "embed": pair.online.embed,
                   "slot_hidden": pair.online.slot1.W.value.shape[1]}
    else:
        dims = [layer.W.value.shape for layer in pair.online.layers]
        sidecar = {"arch": "mlp", "obs_dim": dims[0][0],
                   "n_actions": dims[-1][1],
                   "hidden": [d[1] for d in dims[:-1]]}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=1))


# ---------------------------------------------------------------------------
# HTTP app

def create_app(sessions: Optional[dict[str, Session]] = None) -> FastAPI:
    import asyncio

    app = FastAPI(title="emdispatch collaboration service")
    app.state.sessions = sessions if sessions is not None else {}

    def get_session(sid: str) -> Session:
        session = app.state.sessions.get(sid)
        if session is None:
            raise ServiceError(f"no session {sid!r}", 404)
        return session

    @app.exception_handler(ServiceError)
    async def service_error_handler(_request, exc: ServiceError):
        return JSONResponse(status_code=exc.status, content={"error": str(exc)})

    @app.post("/sessions")
    def create_session(payload: dict):
        spec = SessionSpec.from_dict(payload or {})
        session = Session(spec)
        app.state.sessions[session.id] = session
        return {"id": session.id, "state": session.state()}

    @app.get("/sessions/{sid}/state")
    def state(sid: str):
        return get_session(sid).state()

    @app.get("/sessions/{sid}/tasklist")
    def tasklist(sid: str):
        return {"tasks": get_session(sid).tasklist()}

    @app.post("/sessions/{sid}/edits")
    def edits(sid: str, payload: dict):
        record = get_session(sid).enqueue_edit(payload.get("op", ""),
                                               payload.get("station"),
                                               payload.get("actor", "human"))
        return {"queued": {k: v for k, v in record.items() if k != "applied"}}

    @app.put("/sessions/{sid}/config")
    def config(sid: str, payload: dict):
        session = get_session(sid)
        session.set_config(payload.get("task_size"), payload.get("beta"),
                           payload.get("constraint_list"),
                           clear_beta=payload.get("clear_beta", False))
        return session.state()

    @app.post("/sessions/{sid}/control")
    def control(sid: str, payload: dict):
        session = get_session(sid)
        session.control(payload.get("mode", ""))
        return session.state()

    @app.get("/sessions/{sid}/metrics")
    def metrics(sid: str):
        return get_session(sid).metrics()

    @app.get("/sessions/{sid}/gantt")
    def gantt(sid: str):
        return {"bars": get_session(sid).gantt()}

    @app.websocket("/sessions/{sid}/stream")
    async def stream(websocket: WebSocket, sid: str):
        ws = websocket
        session = app.state.sessions.get(sid)
        await ws.accept()
        if session is None:
            await ws.close(code=4404)
            return
        try:
            snap = session.snapshot_frame()
            await ws.send_json(snap)
            cursor = len(session.frames)
            while True:
                if len(session.frames) > cursor:
                    frame = session.frames[cursor]
                    cursor += 1
                    await ws.send_json(frame)
                    continue
                if session.done:
                    break
                await asyncio.sleep(0.01)
        except WebSocketDisconnect:
            return
        await ws.close()

    return app
