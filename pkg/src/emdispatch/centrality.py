"""Station-importance features and the per-tick graph signal matrix.

Shortest paths are weighted by edge distance throughout. Conventions for
degenerate inputs: closeness sums skip unreachable targets and a fully
isolated node scores 0; disconnected pairs contribute nothing to
betweenness.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .graph import DAMAGED, DiffusionGraph, SituationGraph

SIGNAL_COLUMNS = ("m", "w", "c_b", "c_o", "c_i", "c_r", "F_w", "F_a")
N_FEATURES = len(SIGNAL_COLUMNS)


@dataclass
class CentralityScores:
    betweenness: dict[int, float]
    out_closeness: dict[int, float]
    in_closeness: dict[int, float]
    semi_local: dict[int, float]


@dataclass
class GraphSignal:
    """N x 8 feature matrix for one tick, rows aligned with station ids."""

    matrix: np.ndarray
    tick: int

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[1] != N_FEATURES:
            raise ValueError(f"graph signal must be N x {N_FEATURES}, "
                             f"got {self.matrix.shape}")


def _dijkstra(adj: np.ndarray, source: int):
    """Distances, path counts, settle order and predecessor lists from one source."""
    n = adj.shape[0]
    dist = np.full(n, np.inf)
    sigma = np.zeros(n)
    preds: list[list[int]] = [[] for _ in range(n)]
    dist[source] = 0.0
    sigma[source] = 1.0
    seen = np.zeros(n, dtype=bool)
    heap = [(0.0, source)]
    order = []
    while heap:
        d, u = heapq.heappop(heap)
        if seen[u]:
            continue
        seen[u] = True
        order.append(u)
        row = adj[u]
        for v in np.nonzero(row)[0]:
            v = int(v)
            nd = d + row[v]
            if nd < dist[v]:
                dist[v] = nd
                sigma[v] = sigma[u]
                preds[v] = [u]
                heapq.heappush(heap, (nd, v))
            elif nd == dist[v]:
                sigma[v] += sigma[u]
                preds[v].append(u)
    return dist, sigma, order, preds


def betweenness(g: DiffusionGraph) -> dict[int, float]:
    """Brandes accumulation over ordered (s, t) pairs with distance weights."""
    n = g.n
    score = np.zeros(n)
    for s in range(n):
        dist, sigma, order, preds = _dijkstra(g.adjacency, s)
        delta = np.zeros(n)
        for u in reversed(order):
            for p in preds[u]:
                delta[p] += sigma[p] / sigma[u] * (1.0 + delta[u])
            if u != s:
                score[u] += delta[u]
    # each direction of an ordered pair is visited from its own source
    return {i: float(score[i]) for i in range(n)}


def closeness(g: DiffusionGraph) -> tuple[dict[int, float], dict[int, float]]:
    """Out- and in-closeness: reciprocal of summed distances to/from reachable nodes."""
    n = g.n
    dist = np.full((n, n), np.inf)
    for s in range(n):
        dist[s], _, _, _ = _dijkstra(g.adjacency, s)
    out, inn = {}, {}
    for i in range(n):
        row = dist[i]
        reach = np.isfinite(row) & (np.arange(n) != i)
        total = float(row[reach].sum())
        out[i] = 1.0 / total if reach.any() and total > 0 else 0.0
        col = dist[:, i]
        reach = np.isfinite(col) & (np.arange(n) != i)
        total = float(col[reach].sum())
        inn[i] = 1.0 / total if reach.any() and total > 0 else 0.0
    return out, inn


def clustering_coefficient(g: DiffusionGraph, i: int) -> float:
    nbrs = g.neighbors(i)
    k = len(nbrs)
    if k < 2:
        return 0.0
    links = 0
    for a in range(k):
        for b in range(a + 1, k):
            if g.adjacency[nbrs[a], nbrs[b]] != 0.0:
                links += 1
    return 2.0 * links / (k * (k - 1))


def semi_local(g: DiffusionGraph,
               f: Callable[[float], float] = lambda c: math.exp(-c)) -> dict[int, float]:
    """f(c_i) * sum over neighbors of (out-degree + 1)."""
    n = g.n
    theta_out = (g.adjacency != 0.0).sum(axis=1)
    scores = {}
    for i in range(n):
        nbrs = g.neighbors(i)
        if not nbrs:
            scores[i] = 0.0
            continue
        scores[i] = f(clustering_coefficient(g, i)) * float(
            sum(theta_out[j] + 1 for j in nbrs))
    return scores


def compute_scores(g: DiffusionGraph,
                   f: Callable[[float], float] = lambda c: math.exp(-c)) -> CentralityScores:
    out, inn = closeness(g)
    return CentralityScores(betweenness(g), out, inn, semi_local(g, f))


def task_feature(g: SituationGraph, station: int, failure_rate: bool = False) -> float:
    """Work completion rate of the station (or 1-p behind the flag)."""
    p = g.completion_rate(station)
    return 1.0 - p if failure_rate and g.base.stations[station].k != DAMAGED else p


def mean_inverse_centrality(scores: CentralityScores) -> dict[int, float]:
    """Reciprocal of c_b + c_o + c_i; the comparison-baseline station ranking."""
    result = {}
    for i in scores.betweenness:
        denom = scores.betweenness[i] + scores.out_closeness[i] + scores.in_closeness[i]
        result[i] = 1.0 / denom if denom > 0 else 0.0
    return result


class NormStats:
    """Frozen per-column min/max used to scale signals into [0, 1].

    Fitted once on the training data and persisted with the model so the
    serving path normalizes identically. Zero-range columns map to 0.
    """

    def __init__(self, mins: np.ndarray, maxs: np.ndarray):
        self.mins = np.asarray(mins, dtype=np.float64)
        self.maxs = np.asarray(maxs, dtype=np.float64)

    @classmethod
    def fit(cls, matrices: list[np.ndarray]) -> "NormStats":
        stack = np.concatenate([m.reshape(-1, N_FEATURES) for m in matrices], axis=0)
        return cls(stack.min(axis=0), stack.max(axis=0))

    def apply(self, matrix: np.ndarray) -> np.ndarray:
        span = self.maxs - self.mins
        out = np.zeros_like(matrix, dtype=np.float64)
        nz = span != 0
        out[:, nz] = (matrix[:, nz] - self.mins[nz]) / span[nz]
        return out

    def to_dict(self) -> dict:
        return {"mins": self.mins.tolist(), "maxs": self.maxs.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "NormStats":
        return cls(np.array(data["mins"]), np.array(data["maxs"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "NormStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


def assemble_signal(g: SituationGraph, scores: CentralityScores, tick: int,
                    norm: Optional[NormStats] = None) -> GraphSignal:
    """Stack the four feature families into the N x 8 signal matrix.

    Column order: resource kind m, resources w, betweenness, out-closeness,
    in-closeness, semi-local, task feature, event type. Raw values unless
    ``norm`` is given.
    """
    n = g.base.n
    m = np.zeros((n, N_FEATURES))
    for i in range(n):
        s = g.base.stations[i]
        m[i] = (s.resource_kind, s.resources, scores.betweenness[i],
                scores.out_closeness[i], scores.in_closeness[i],
                scores.semi_local[i], task_feature(g, i), s.event_type)
    if norm is not None:
        m = norm.apply(m)
    return GraphSignal(m, tick)
