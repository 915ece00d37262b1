"""Key-node prediction: a graph-attention/convolution recurrent
encoder-decoder over the per-tick signal matrix, trained sequence-to-sequence
with scheduled sampling, plus the human correction loop around it.

The decoder consumes its own previous class distribution (or, during
training, the ground-truth one-hot with a probability that decays per epoch);
fed-back predictions are treated as constants in the backward pass.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .centrality import N_FEATURES, NormStats
from .graph import EMERGENCY, PREVENTATIVE, RESCUE, DisposalTask, SituationGraph
from .nnet import (Adam, Dense, GraphGRUCell, GraphStructure, ParamSet,
                   cross_entropy, softmax_rows)
from .sim import CaptureResult, EmergencySim, RESCUE_DEADLINES, WindowSample

log = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
N_CLASSES = 3


class PredictorError(Exception):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    window: int = 20
    lr: float = 1e-3
    ss_kappa: float = 10.0        # inverse-sigmoid scheduled-sampling decay
    seed: int = 0
    hidden: int = 32
    depth: int = 2
    class_weighting: bool = True


@dataclass
class KeyNodePrediction:
    """Ranked (station, probability-of-emergency) list above the 0.5 bar."""

    entries: list[tuple[int, float]]
    tick: int
    horizon: int

    def stations(self) -> list[int]:
        return [s for s, _ in self.entries]

    def to_tasks(self, sim: EmergencySim, task_value: float = 2.0,
                 preventative_deadline: int = 60) -> list[DisposalTask]:
        """Disposal task per listed station: rescue if alight, else firewall."""
        tasks = []
        for station, _ in self.entries:
            state = sim.graph.base.stations[station]
            if state.k == EMERGENCY:
                ev = sim.active_events.get(station)
                deadline = ev.rescue_deadline if ev else sim.tick
                tasks.append(DisposalTask(station, RESCUE, deadline, task_value))
            else:
                tasks.append(DisposalTask(station, PREVENTATIVE,
                                          sim.tick + preventative_deadline, task_value))
        return tasks


def scheduled_sampling_prob(epoch: int, kappa: float = 10.0) -> float:
    """Probability of feeding ground truth to the decoder at this epoch."""
    return kappa / (kappa + np.exp(epoch / kappa))


def one_hot(labels: np.ndarray, n: int = N_CLASSES) -> np.ndarray:
    out = np.zeros((labels.shape[0], n))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


class GACRNNModel:
    """Stacked graph-GRU encoder/decoder with a 3-way softmax head.

    ``graph_mode`` selects the spatial operator: "attention" couples
    neighbors through the GAT-GCN composition, "identity" restricts every
    neighborhood to the node itself (the temporal-only ablation).
    """

    def __init__(self, hidden: int = 32, depth: int = 2, seed: int = 0,
                 graph_mode: str = "attention"):
        if graph_mode not in ("attention", "identity"):
            raise PredictorError(f"unknown graph mode {graph_mode!r}")
        self.hidden = hidden
        self.depth = depth
        self.seed = seed
        self.graph_mode = graph_mode
        self.window = 20
        self.params = ParamSet()
        rng = np.random.default_rng(seed)
        self.encoder = [GraphGRUCell(self.params, f"enc{l}",
                                     N_FEATURES if l == 0 else hidden, hidden, rng)
                        for l in range(depth)]
        self.decoder = [GraphGRUCell(self.params, f"dec{l}",
                                     N_CLASSES if l == 0 else hidden, hidden, rng)
                        for l in range(depth)]
        self.head = Dense(self.params, "head", hidden, N_CLASSES, rng)
        self.norm: Optional[NormStats] = None

    def structure(self, adjacency: np.ndarray) -> GraphStructure:
        if self.graph_mode == "identity":
            return GraphStructure.self_only(adjacency.shape[0])
        return GraphStructure.from_adjacency(adjacency)

    # -- forward ---------------------------------------------------------------

    def forward(self, history: np.ndarray, adjacency: np.ndarray,
                teacher: Optional[np.ndarray] = None,
                teacher_mask: Optional[np.ndarray] = None,
                collect: bool = False):
        """Decode ``window`` future per-node state distributions.

        ``history`` is (T, N, 8) raw signal; normalization stats must be
        loaded. With ``teacher`` (T, N) labels, decoder steps flagged in
        ``teacher_mask`` consume the ground-truth one-hot instead of the
        previous prediction. ``collect`` returns the caches for backward.
        """
        if self.norm is None:
            raise PredictorError("normalization stats not loaded")
        history = np.asarray(history, dtype=np.float64)
        T = self.window
        if history.ndim != 3 or history.shape[0] != T or history.shape[2] != N_FEATURES:
            raise PredictorError(
                f"expected history of shape ({T}, N, {N_FEATURES}), got {history.shape}")
        n = history.shape[1]
        if adjacency.shape != (n, n):
            raise PredictorError(
                f"expected adjacency of shape ({n}, {n}), got {adjacency.shape}")
        g = self.structure(adjacency)

        h = [np.zeros((n, self.hidden)) for _ in range(self.depth)]
        enc_caches = []
        for t in range(T):
            x = self.norm.apply(history[t])
            step_caches = []
            for l, cell in enumerate(self.encoder):
                h[l], cache = cell.forward(x if l == 0 else x_next, h[l], g)
                x_next = h[l]
                step_caches.append(cache)
            enc_caches.append(step_caches)

        probs = np.zeros((T, n, N_CLASSES))
        dec_caches = []
        head_caches = []
        y = np.zeros((n, N_CLASSES))
        for s in range(T):
            if teacher is not None and teacher_mask is not None and s > 0 and teacher_mask[s]:
                y = one_hot(teacher[s - 1])
            step_caches = []
            for l, cell in enumerate(self.decoder):
                h[l], cache = cell.forward(y if l == 0 else x_next, h[l], g)
                x_next = h[l]
                step_caches.append(cache)
            logits, hc = self.head.forward(h[-1])
            p = softmax_rows(logits)
            probs[s] = p
            y = p  # fed back as a constant
            dec_caches.append(step_caches)
            head_caches.append(hc)
        if collect:
            return probs, (enc_caches, dec_caches, head_caches)
        return probs

    def backward(self, dlogits_steps: list[np.ndarray], caches) -> None:
        enc_caches, dec_caches, head_caches = caches
        T = self.window
        dh = [np.zeros_like(c[1]) for c in
              [dec_caches[0][l] for l in range(self.depth)]]
        for s in reversed(range(T)):
            dh[-1] = dh[-1] + self.head.backward(dlogits_steps[s], head_caches[s])
            for l in reversed(range(self.depth)):
                dx, dh_prev = self.decoder[l].backward(dh[l], dec_caches[s][l])
                dh[l] = dh_prev
                if l > 0:
                    dh[l - 1] = dh[l - 1] + dx
        for t in reversed(range(T)):
            for l in reversed(range(self.depth)):
                dx, dh_prev = self.encoder[l].backward(dh[l], enc_caches[t][l])
                dh[l] = dh_prev
                if l > 0:
                    dh[l - 1] = dh[l - 1] + dx

    # -- persistence -------------------------------------------------------------

    def save(self, path) -> None:
        path = Path(path)
        self.params.save(path)
        sidecar = {
            "format_version": MODEL_FORMAT_VERSION,
            "hidden": self.hidden,
            "depth": self.depth,
            "seed": self.seed,
            "graph_mode": self.graph_mode,
            "window": self.window,
            "norm": self.norm.to_dict() if self.norm else None,
        }
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=1))

    @classmethod
    def load(cls, path) -> "GACRNNModel":
        path = Path(path)
        sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        if sidecar.get("format_version") != MODEL_FORMAT_VERSION:
            raise PredictorError(
                f"model format version {sidecar.get('format_version')} not supported "
                f"(expected {MODEL_FORMAT_VERSION})")
        model = cls(hidden=sidecar["hidden"], depth=sidecar["depth"],
                    seed=sidecar["seed"], graph_mode=sidecar["graph_mode"])
        model.window = sidecar["window"]
        model.params.load(path)
        if sidecar["norm"]:
            model.norm = NormStats.from_dict(sidecar["norm"])
        return model


# ---------------------------------------------------------------------------

def class_weights_from(samples: list[WindowSample]) -> np.ndarray:
    counts = np.zeros(N_CLASSES)
    for s in samples:
        for c in range(N_CLASSES):
            counts[c] += (s.labels == c).sum()
    total = counts.sum()
    weights = np.ones(N_CLASSES)
    nz = counts > 0
    weights[nz] = np.sqrt(total / (N_CLASSES * counts[nz]))
    return np.clip(weights, 0.2, 8.0)


def train(samples: list[WindowSample], adjacency: np.ndarray, cfg: TrainConfig,
          graph_mode: str = "attention",
          extra_samples: Optional[list[WindowSample]] = None) -> tuple[GACRNNModel, list[float]]:
    """Fit the predictor on captured windows; returns (model, loss history)."""
    if not samples:
        raise PredictorError("empty training dataset")
    model = GACRNNModel(hidden=cfg.hidden, depth=cfg.depth, seed=cfg.seed,
                        graph_mode=graph_mode)
    model.window = cfg.window
    model.norm = NormStats.fit([s.inputs.reshape(-1, N_FEATURES) for s in samples])
    pool = list(samples) + list(extra_samples or [])
    weights = class_weights_from(pool) if cfg.class_weighting else None
    opt = Adam(model.params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    history: list[float] = []
    for epoch in range(cfg.epochs):
        p_ss = scheduled_sampling_prob(epoch, cfg.ss_kappa)
        order = rng.permutation(len(pool))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            batch_loss = 0.0
            for idx in batch:
                sample = pool[idx]
                mask = rng.random(cfg.window) < p_ss
                probs, caches = model.forward(sample.inputs, adjacency,
                                              teacher=sample.labels,
                                              teacher_mask=mask, collect=True)
                dsteps = []
                loss = 0.0
                for s in range(cfg.window):
                    step_loss, dlogits = cross_entropy(probs[s], sample.labels[s],
                                                       weights)
                    loss += step_loss
                    dsteps.append(dlogits / cfg.window / len(batch))
                model.backward(dsteps, caches)
                batch_loss += loss / cfg.window
            opt.step()
            losses.append(batch_loss / len(batch))
        history.append(float(np.mean(losses)))
        log.info("epoch %d: loss %.4f (p_ss %.3f)", epoch, history[-1], p_ss)
    return model, history


def evaluate(model: GACRNNModel, samples: list[WindowSample],
             adjacency: np.ndarray) -> dict[str, float]:
    """Accuracy plus emergency-class and macro-averaged precision/recall/F1."""
    if not samples:
        raise PredictorError("empty evaluation dataset")
    confusion = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for sample in samples:
        probs = model.forward(sample.inputs, adjacency)
        pred = probs.argmax(axis=2)
        for c_true in range(N_CLASSES):
            for c_pred in range(N_CLASSES):
                confusion[c_true, c_pred] += int(
                    ((sample.labels == c_true) & (pred == c_pred)).sum())
    return metrics_from_confusion(confusion)


def metrics_from_confusion(confusion: np.ndarray) -> dict[str, float]:
    total = confusion.sum()
    accuracy = float(np.trace(confusion) / total) if total else 0.0

    def prf(c):
        tp = confusion[c, c]
        fp = confusion[:, c].sum() - tp
        fn = confusion[c, :].sum() - tp
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        return float(p), float(r), float(f)

    present = [c for c in range(N_CLASSES) if confusion[c, :].sum() > 0]
    per_class = {c: prf(c) for c in range(N_CLASSES)}
    p1, r1, f1 = per_class[EMERGENCY]
    macro = np.mean([[per_class[c][i] for c in present] for i in range(3)], axis=1)
    return {
        "accuracy": accuracy,
        "precision": p1, "recall": r1, "f1": f1,
        "macro_precision": float(macro[0]),
        "macro_recall": float(macro[1]),
        "macro_f1": float(macro[2]),
        "confusion": confusion.tolist(),
    }


def predict_key_nodes(probs: np.ndarray, task_size: int, tick: int = 0) -> KeyNodePrediction:
    """Rank stations by first-step P(k=1) above 0.5; truncate to the window.

    Ties break toward the lower station id.
    """
    if task_size < 1:
        raise PredictorError("task_size must be >= 1")
    g_bar = probs[0, :, EMERGENCY]
    qualified = [(int(i), float(g_bar[i])) for i in range(probs.shape[1])
                 if g_bar[i] > 0.5]
    qualified.sort(key=lambda e: (-e[1], e[0]))
    return KeyNodePrediction(qualified[:task_size], tick, probs.shape[0])


# ---------------------------------------------------------------------------
# human correction loop

@dataclass
class Correction:
    op: str              # add | delete | reset
    station: Optional[int]
    tick: int
    actor: str = "human"


@dataclass
class FeedbackState:
    """Label corrections and retraining queue accumulated from the human."""

    label_overrides: dict[tuple[int, int], int] = field(default_factory=dict)
    retrain_buffer: list[WindowSample] = field(default_factory=list)
    audit: list[dict] = field(default_factory=list)
    reset_requested: bool = False


HUMAN_SAMPLE_WEIGHT = 3  # corrected windows enter the buffer this many times


def apply_human_feedback(state: FeedbackState, corrections: list[Correction],
                         listed: set[int], n_stations: int,
                         recent: Optional[CaptureResult] = None) -> FeedbackState:
    """Fold human add/delete/reset decisions into the label stream.

    Adds force the station's label to the emergency class at the correction
    tick; deletes of listed stations force it back to normal (and are
    audited); deletes of unlisted stations are no-ops with a warning. A
    reset discards nothing already learned, it only flags that the next
    prediction must be recomputed fresh.
    """
    for c in corrections:
        if c.op == "reset":
            state.reset_requested = True
            state.audit.append({"op": "reset", "tick": c.tick, "actor": c.actor})
            continue
        if c.station is None or not 0 <= c.station < n_stations:
            raise PredictorError(f"unknown station in correction: {c.station!r}")
        if c.op == "add":
            state.label_overrides[(c.tick, c.station)] = EMERGENCY
        elif c.op == "delete":
            if c.station not in listed:
                log.warning("delete of station %d ignored: not in the machine list",
                            c.station)
                continue
            state.label_overrides[(c.tick, c.station)] = 0
        else:
            raise PredictorError(f"unknown correction op {c.op!r}")
        state.audit.append({"op": c.op, "station": c.station, "tick": c.tick,
                            "actor": c.actor})
    if recent is not None and corrections:
        state.retrain_buffer.extend(corrected_windows(state, recent))
    return state


def corrected_windows(state: FeedbackState, recent: CaptureResult) -> list[WindowSample]:
    """Windows whose label span intersects an override, duplicated for weight."""
    by_run: dict[int, list] = {}
    for r in recent.records:
        by_run.setdefault(r.run, []).append(r)
    out: list[WindowSample] = []
    T = recent.window
    for run in sorted(by_run):
        recs = sorted(by_run[run], key=lambda r: r.tick)
        if len(recs) < 2 * T:
            continue
        tick_index = {r.tick: i for i, r in enumerate(recs)}
        sig = np.stack([r.signal for r in recs])
        lab = np.stack([r.labels for r in recs])
        # window anchored at t: inputs [t-T+1 .. t], labels [t+1 .. t+T]
        touched: set[int] = set()
        for (tick, _station), _value in state.label_overrides.items():
            i = tick_index.get(tick)
            if i is None:
                continue
            lo = max(T - 1, i - T)
            hi = min(i - 1, len(recs) - T - 1)
            touched.update(range(lo, hi + 1))
        for t in sorted(touched):
            labels = lab[t + 1:t + 1 + T].copy()
            for (tick, station), value in state.label_overrides.items():
                i = tick_index.get(tick)
                if i is not None and t + 1 <= i <= t + T:
                    labels[i - (t + 1), station] = value
            out.extend([WindowSample(sig[t - T + 1:t + 1], labels)] * HUMAN_SAMPLE_WEIGHT)
    return out
