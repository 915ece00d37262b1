"""Minimal differentiable substrate for the graph-recurrent predictor and the
Q networks: named float64 parameters, attention/convolution/gated-recurrent
graph layers with hand-written backward passes, dense layers, losses,
optimizers and a versioned binary parameter container.

Everything is dense numpy; the graphs here are a few hundred nodes at most.
Layers return an explicit cache from ``forward`` which ``backward`` consumes,
so one layer instance can be unrolled over time (BPTT) without aliasing.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Optional

import numpy as np

LEAKY_SLOPE = 0.2


class KernelIOError(Exception):
    pass


class Param:
    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)


class ParamSet:
    """Ordered, named parameter tensors with paired gradient buffers."""

    MAGIC = b"EMDK"
    VERSION = 1

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, value: np.ndarray) -> Param:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name}")
        p = Param(value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    def copy_values_from(self, other: "ParamSet") -> None:
        for name, p in self._params.items():
            p.value[...] = other[name].value

    def clone(self) -> "ParamSet":
        out = ParamSet()
        for name, p in self._params.items():
            out.add(name, p.value.copy())
        return out

    def digest(self) -> bytes:
        import hashlib
        h = hashlib.blake2b(digest_size=16)
        for name, p in self._params.items():
            h.update(name.encode())
            h.update(p.value.tobytes())
        return h.digest()

    # binary container: magic, u32 version, u32 count, then per tensor
    # u16 name length, name utf-8, u8 ndim, ndim x u64 dims, float64 LE data
    def save(self, path) -> None:
        out = bytearray()
        out += self.MAGIC
        out += struct.pack("<II", self.VERSION, len(self._params))
        for name, p in self._params.items():
            raw = name.encode("utf-8")
            out += struct.pack("<H", len(raw)) + raw
            out += struct.pack("<B", p.value.ndim)
            out += struct.pack(f"<{p.value.ndim}Q", *p.value.shape)
            out += np.ascontiguousarray(p.value, dtype="<f8").tobytes()
        Path(path).write_bytes(bytes(out))

    def load(self, path) -> None:
        blob = Path(path).read_bytes()
        tensors = read_tensors(blob)
        for name, arr in tensors.items():
            if name not in self._params:
                raise KernelIOError(f"unexpected tensor {name!r} in {path}")
            if arr.shape != self._params[name].value.shape:
                raise KernelIOError(
                    f"shape mismatch for {name}: file {arr.shape}, "
                    f"model {self._params[name].value.shape}")
            self._params[name].value[...] = arr
        missing = set(self._params) - set(tensors)
        if missing:
            raise KernelIOError(f"missing tensors in {path}: {sorted(missing)}")


def read_tensors(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != ParamSet.MAGIC:
        raise KernelIOError("not a parameter container (bad magic)")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
    except struct.error as exc:
        raise KernelIOError("truncated header") from exc
    if version != ParamSet.VERSION:
        raise KernelIOError(f"unsupported container version {version} "
                            f"(expected {ParamSet.VERSION})")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos)
            if arr.size != size:
                raise KernelIOError("truncated tensor data")
            pos += 8 * size
            out[name] = arr.reshape(shape).astype(np.float64)
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise KernelIOError(f"corrupt parameter container: {exc}") from exc
    if pos != len(blob):
        raise KernelIOError("trailing bytes in parameter container")
    return out


def save_params(params: ParamSet, path) -> None:
    params.save(path)


def load_params(params: ParamSet, path) -> None:
    params.load(path)


# ---------------------------------------------------------------------------
# activations / losses

def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def leaky_relu(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, x, LEAKY_SLOPE * x)


def leaky_relu_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0, LEAKY_SLOPE)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, labels: np.ndarray,
                  class_weights: Optional[np.ndarray] = None) -> tuple[float, np.ndarray]:
    """Mean weighted cross-entropy over rows; returns (loss, dlogits).

    ``probs`` must come from :func:`softmax_rows`; the returned gradient is
    with respect to the pre-softmax logits (the usual fused form).
    """
    rows = probs.shape[0]
    idx = np.arange(rows)
    w = np.ones(rows) if class_weights is None else class_weights[labels]
    eps = 1e-12
    loss = float(-(w * np.log(probs[idx, labels] + eps)).sum() / w.sum())
    dlogits = probs * w[:, None]
    dlogits[idx, labels] -= w
    return loss, dlogits / w.sum()


def mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    diff = pred - target
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


# ---------------------------------------------------------------------------
# graph structure

class GraphStructure:
    """Fixed neighborhood mask for attention over one graph.

    ``mask[i, j]`` marks j as a member of i's attention neighborhood. Nodes
    without neighbors attend to themselves only. ``self_only(n)`` produces
    the degenerate structure used by the temporal-only ablation, for which
    the whole graph operator collapses to a plain dense layer.
    """

    def __init__(self, mask: np.ndarray):
        self.mask = mask.astype(np.float64)
        self.n = mask.shape[0]
        isolated = ~(self.mask.sum(axis=1) > 0)
        if isolated.any():
            idx = np.nonzero(isolated)[0]
            self.mask[idx, idx] = 1.0
        self.neg = np.where(self.mask > 0, 0.0, -np.inf)

    @classmethod
    def from_adjacency(cls, adjacency: np.ndarray) -> "GraphStructure":
        return cls((np.asarray(adjacency) != 0).astype(np.float64))

    @classmethod
    def self_only(cls, n: int) -> "GraphStructure":
        return cls(np.eye(n))


# ---------------------------------------------------------------------------
# layers

def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class GraphAttention:
    """Single-head attention producing a row-stochastic adjacency.

    Scores are leaky-rectified sums of source/target projections of the raw
    features; coefficients are softmax-normalized over each node's
    neighborhood, so every row of the returned matrix sums to 1.
    """

    def __init__(self, params: ParamSet, prefix: str, dim: int,
                 rng: np.random.Generator):
        self.a_src = params.add(f"{prefix}.a_src", rng.normal(0, 0.1, size=dim))
        self.a_dst = params.add(f"{prefix}.a_dst", rng.normal(0, 0.1, size=dim))

    def forward(self, X: np.ndarray, g: GraphStructure):
        s = X @ self.a_src.value
        t = X @ self.a_dst.value
        raw = s[:, None] + t[None, :]
        act = leaky_relu(raw) + g.neg
        mx = act.max(axis=1, keepdims=True)
        ex = np.exp(act - mx) * g.mask
        denom = ex.sum(axis=1, keepdims=True)
        W = ex / denom
        X1 = W @ X
        cache = (X, g, raw, W, X1)
        return X1, W, cache

    def backward(self, dX1: np.ndarray, dW: Optional[np.ndarray], cache):
        X, g, raw, W, _ = cache
        dW_total = dX1 @ X.T
        if dW is not None:
            dW_total = dW_total + dW
        dX = W.T @ dX1
        # softmax rows: de = W * (dW - sum_j W*dW per row)
        dot = (W * dW_total).sum(axis=1, keepdims=True)
        de = W * (dW_total - dot)
        draw = de * leaky_relu_grad(raw) * g.mask
        ds = draw.sum(axis=1)
        dt = draw.sum(axis=0)
        self.a_src.grad += X.T @ ds
        self.a_dst.grad += X.T @ dt
        dX += np.outer(ds, self.a_src.value) + np.outer(dt, self.a_dst.value)
        return dX


def gat_update(X: np.ndarray, adjacency: np.ndarray, params: ParamSet,
               prefix: str = "gat") -> tuple[np.ndarray, np.ndarray]:
    """One-shot attention update over an explicit adjacency matrix.

    Expects ``{prefix}.a_src`` / ``{prefix}.a_dst`` in ``params``; returns the
    aggregated features and the attention-weighted adjacency.
    """
    g = GraphStructure.from_adjacency(adjacency)
    layer = object.__new__(GraphAttention)
    layer.a_src = params[f"{prefix}.a_src"]
    layer.a_dst = params[f"{prefix}.a_dst"]
    X1, W, _ = layer.forward(np.asarray(X, dtype=np.float64), g)
    return X1, W


def gcn_propagate(X: np.ndarray, A_hat: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Symmetrically normalized propagation: D^-1/2 A_hat D^-1/2 X W.

    ``A_hat`` must already include self-loops; degrees are its row sums.
    """
    deg = np.asarray(A_hat).sum(axis=1)
    inv = np.zeros_like(deg)
    nz = deg > 0
    inv[nz] = 1.0 / np.sqrt(deg[nz])
    M = A_hat * inv[:, None] * inv[None, :]
    return M @ X @ W


class GraphOperator:
    """Attention followed by normalized convolution; one per GRU gate.

    The attention matrix rows sum to 1 and the convolution adds unit
    self-loops, so every degree is exactly 2 under any parameter or input
    perturbation; the normalization is therefore treated as constant in the
    backward pass without approximation.
    """

    def __init__(self, params: ParamSet, prefix: str, in_dim: int, out_dim: int,
                 rng: np.random.Generator):
        self.att = GraphAttention(params, f"{prefix}.att", in_dim, rng)
        self.W = params.add(f"{prefix}.W", _glorot(rng, in_dim, out_dim))

    def forward(self, X: np.ndarray, g: GraphStructure):
        X1, Wa, att_cache = self.att.forward(X, g)
        A_hat = Wa + np.eye(g.n)
        deg = A_hat.sum(axis=1)
        inv = 1.0 / np.sqrt(deg)
        M = A_hat * inv[:, None] * inv[None, :]
        Y = X1 @ self.W.value
        out = M @ Y
        cache = (att_cache, M, inv, X1, Y)
        return out, cache

    def backward(self, dout: np.ndarray, cache):
        att_cache, M, inv, X1, Y = cache
        dY = M.T @ dout
        self.W.grad += X1.T @ dY
        dX1 = dY @ self.W.value.T
        dM = dout @ Y.T
        dA_hat = dM * inv[:, None] * inv[None, :]
        # the identity part of A_hat carries no parameters
        return self.att.backward(dX1, dA_hat, att_cache)


class GraphGRUCell:
    """Gated recurrent cell whose matmuls are graph operators.

    reset r = sig(g_r([x, h]) + b_r); update z = sig(g_z([x, h]) + b_u);
    candidate hbar = tanh(g_c([x, r*h]) + b_c); H = z*h + (1-z)*hbar.
    """

    def __init__(self, params: ParamSet, prefix: str, in_dim: int, hid_dim: int,
                 rng: np.random.Generator):
        self.in_dim = in_dim
        self.hid_dim = hid_dim
        cat = in_dim + hid_dim
        self.r_op = GraphOperator(params, f"{prefix}.r", cat, hid_dim, rng)
        self.z_op = GraphOperator(params, f"{prefix}.z", cat, hid_dim, rng)
        self.c_op = GraphOperator(params, f"{prefix}.c", cat, hid_dim, rng)
        self.b_r = params.add(f"{prefix}.b_r", np.zeros(hid_dim))
        self.b_u = params.add(f"{prefix}.b_u", np.zeros(hid_dim))
        self.b_c = params.add(f"{prefix}.b_c", np.zeros(hid_dim))

    def forward(self, x: np.ndarray, h: np.ndarray, g: GraphStructure):
        xc = np.concatenate([x, h], axis=1)
        pre_r, cr = self.r_op.forward(xc, g)
        r = sigmoid(pre_r + self.b_r.value)
        pre_z, cz = self.z_op.forward(xc, g)
        z = sigmoid(pre_z + self.b_u.value)
        xc2 = np.concatenate([x, r * h], axis=1)
        pre_c, cc = self.c_op.forward(xc2, g)
        hbar = np.tanh(pre_c + self.b_c.value)
        H = z * h + (1.0 - z) * hbar
        cache = (x, h, r, z, hbar, cr, cz, cc)
        return H, cache

    def backward(self, dH: np.ndarray, cache):
        x, h, r, z, hbar, cr, cz, cc = cache
        nd = self.in_dim
        dz = dH * (h - hbar)
        dh = dH * z
        dhbar = dH * (1.0 - z)
        dpre_c = dhbar * (1.0 - hbar ** 2)
        self.b_c.grad += dpre_c.sum(axis=0)
        dxc2 = self.c_op.backward(dpre_c, cc)
        dx = dxc2[:, :nd].copy()
        drh = dxc2[:, nd:]
        dr = drh * h
        dh += drh * r
        dpre_r = dr * r * (1.0 - r)
        self.b_r.grad += dpre_r.sum(axis=0)
        dxc = self.r_op.backward(dpre_r, cr)
        dpre_z = dz * z * (1.0 - z)
        self.b_u.grad += dpre_z.sum(axis=0)
        dxc += self.z_op.backward(dpre_z, cz)
        dx += dxc[:, :nd]
        dh += dxc[:, nd:]
        return dx, dh


def graph_gru_step(cell: GraphGRUCell, x: np.ndarray, h: np.ndarray,
                   g: GraphStructure) -> np.ndarray:
    out, _ = cell.forward(x, h, g)
    return out


class Dense:
    def __init__(self, params: ParamSet, prefix: str, in_dim: int, out_dim: int,
                 rng: np.random.Generator):
        self.W = params.add(f"{prefix}.W", _glorot(rng, in_dim, out_dim))
        self.b = params.add(f"{prefix}.b", np.zeros(out_dim))

    def forward(self, X: np.ndarray):
        return X @ self.W.value + self.b.value, X

    def backward(self, dout: np.ndarray, cache):
        X = cache
        self.W.grad += X.T @ dout
        self.b.grad += dout.sum(axis=0)
        return dout @ self.W.value.T


def dense_softmax(X: np.ndarray, dense: Dense) -> tuple[np.ndarray, tuple]:
    logits, cache = dense.forward(X)
    return softmax_rows(logits), cache


# ---------------------------------------------------------------------------
# optimizers

class Sgd:
    """Plain gradient descent; two steps equal one step at the summed update."""

    def __init__(self, params: ParamSet, lr: float = 1e-3):
        self.params = params
        self.lr = lr

    def step(self) -> None:
        for _, p in self.params.items():
            p.value -= self.lr * p.grad
        self.params.zero_grads()


class Adam:
    """Adaptive-moment gradient descent; the default for model training."""

    def __init__(self, params: ParamSet, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.value) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.value) for name, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            m = self.m[name]
            v = self.v[name]
            m[...] = b1 * m + (1 - b1) * p.grad
            v[...] = b2 * v + (1 - b2) * p.grad ** 2
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.value -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        self.params.zero_grads()


def optimize_step(params: ParamSet, lr: float) -> None:
    """One plain gradient-descent update; zeroes the gradient buffers."""
    Sgd(params, lr).step()
