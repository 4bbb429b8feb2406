"""Dense numeric core with tape-based reverse-mode differentiation.

Values are plain numpy arrays wrapped in :class:`Tensor`.  Every op computes
its result eagerly and, when a :class:`Tape` is active, records a closure that
maps the output gradient to gradients for its inputs.  Ops accept batched
arrays: matrix ops act on the last two axes and broadcast over the rest.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NumericError",
    "GruParams",
    "Adam",
    "param",
    "constant",
    "add",
    "sub",
    "mul",
    "matmul",
    "transpose",
    "sigmoid",
    "tanh",
    "relu",
    "softmax_rows",
    "cross_entropy",
    "embedding_lookup",
    "concat",
    "reshape",
    "take",
    "index_last",
    "sum_all",
    "dense",
    "gru_step",
    "gru_sequence",
    "backward",
    "init_rng",
    "glorot_uniform",
]

CE_EPS = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


_state = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class Tensor:
    __slots__ = ("value", "name", "op", "parents", "backward_fn", "grad", "node_id")

    def __init__(self, value, name: str | None = None, op: str = "leaf"):
        self.value = value
        self.name = name
        self.op = op
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.grad = None
        self.node_id = -1

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.value.shape}, dtype={self.value.dtype})"


class Tape:
    """Ordered record of primitive ops.

    Use as a context manager; ops executed inside the block are recorded in
    execution order, which is a valid topological order.  Tapes are
    thread-local, so concurrent evaluations each need their own.
    """

    def __init__(self, check_finite: bool = False):
        self.nodes: list[Tensor] = []
        self.check_finite = check_finite
        self._outer = None

    def __enter__(self):
        self._outer = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._outer
        return False

    def record(self, node: Tensor) -> None:
        node.node_id = len(self.nodes)
        self.nodes.append(node)
        if self.check_finite and not np.all(np.isfinite(node.value)):
            raise NumericError(f"non-finite output from {node.op} (node {node.node_id})")

    def first_nonfinite(self) -> Tensor | None:
        for node in self.nodes:
            if not np.all(np.isfinite(node.value)):
                return node
        return None


def param(value: np.ndarray, name: str) -> Tensor:
    return Tensor(value, name=name, op="param")


def constant(value) -> Tensor:
    return Tensor(np.asarray(value), op="const")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _make(value, op: str, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(value, op=op)
    tape = _active_tape()
    if tape is not None:
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        tape.record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.value + b.value

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, "add", (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.value - b.value, "sub", (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.value, b.value

    def back(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _make(av * bv, "mul", (a, b), back)


def _sigmoid(x):
    # branch-free and overflow-safe
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.value)
    return _make(s, "sigmoid", (x,), lambda g: (g * s * (1 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.value)
    return _make(t, "tanh", (x,), lambda g: (g * (1 - t * t),))


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return _make(x.value * mask, "relu", (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra and shape

def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {av.shape} by {bv.shape}")
    out = np.matmul(av, bv)

    def back(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _make(out, "matmul", (a, b), back)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _make(np.swapaxes(x.value, -1, -2), "transpose", (x,),
                 lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    return _make(x.value.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    values = [x.value for x in xs]
    out = np.concatenate(values, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, "concat", tuple(xs), back)


def take(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows along axis 0; gradients scatter-add back."""
    index = np.asarray(index)
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.value[index], "take", (x,), back)


def index_last(x: Tensor, t: int) -> Tensor:
    """Select position ``t`` along axis -2 (the time axis of a (..., T, H) array)."""
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., t, :] = g
        return (full,)

    return _make(x.value[..., t, :], "index_last", (x,), back)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.value.sum()), "sum", (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


# ---------------------------------------------------------------------------
# neural-network primitives

def softmax_rows(m: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by per-row max subtraction."""
    v = m.value
    if v.size == 0:
        raise ShapeError("softmax_rows: empty input")
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, "softmax", (m,), back)


def cross_entropy(probs: Tensor, targets) -> Tensor:
    """Mean of ``-log(max(p[target], eps))`` over the leading rows.

    ``probs`` is a single distribution (V,) or a batch (B, V).
    """
    p = probs.value
    batched = p.ndim == 2
    p2 = p if batched else p[None, :]
    t = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if t.shape[0] != p2.shape[0]:
        raise ShapeError(f"cross_entropy: {t.shape[0]} targets for {p2.shape[0]} rows")
    if t.min() < 0 or t.max() >= p2.shape[1]:
        raise IndexError(f"cross_entropy: target out of range [0, {p2.shape[1]})")
    rows = np.arange(len(t))
    picked = p2[rows, t]
    clipped = np.maximum(picked, CE_EPS)
    loss = np.asarray(-np.log(clipped).mean(), dtype=p.dtype)

    def back(g):
        grad = np.zeros_like(p2)
        # no gradient through the clamp
        grad[rows, t] = np.where(picked > CE_EPS, -g / (clipped * len(t)), 0.0)
        return (grad if batched else grad[0],)

    return _make(loss, "cross_entropy", (probs,), back)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        bad = ids[(ids < 0) | (ids >= rows)].flat[0]
        raise IndexError(f"embedding_lookup: id {bad} out of range for table with {rows} rows")
    out = table.value[ids]

    def back(g):
        full = np.zeros_like(table.value)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (full,)

    return _make(out, "embedding", (table,), back)


def dense(x: Tensor, W: Tensor, b: Tensor, activation: str = "none") -> Tensor:
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"dense: input {x.shape} does not match weights {W.shape}")
    y = add(matmul(x, W), b)
    if activation == "none":
        return y
    if activation == "relu":
        return relu(y)
    if activation == "softmax":
        return softmax_rows(y)
    raise ValueError(f"unknown activation {activation!r}")


# ---------------------------------------------------------------------------
# GRU

GRU_NAMES = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")


class GruParams:
    """The nine tensors of one GRU unit, addressed by gate name."""

    def __init__(self, tensors: dict[str, Tensor]):
        missing = set(GRU_NAMES) - set(tensors)
        if missing:
            raise KeyError(f"GruParams missing {sorted(missing)}")
        self.t = tensors
        self.input_dim, self.hidden = tensors["W_z"].shape
        for k in ("W_z", "W_r", "W_h"):
            if tensors[k].shape != (self.input_dim, self.hidden):
                raise ShapeError(f"{k} has shape {tensors[k].shape}")
        for k in ("U_z", "U_r", "U_h"):
            if tensors[k].shape != (self.hidden, self.hidden):
                raise ShapeError(f"{k} has shape {tensors[k].shape}")
        for k in ("b_z", "b_r", "b_h"):
            if tensors[k].shape != (self.hidden,):
                raise ShapeError(f"{k} has shape {tensors[k].shape}")

    def __getitem__(self, key: str) -> Tensor:
        return self.t[key]

    def ordered(self) -> list[Tensor]:
        return [self.t[k] for k in GRU_NAMES]


def gru_step(x: Tensor, h_prev: Tensor, p: GruParams) -> Tensor:
    """One GRU update built from primitive ops (reset gate applied to h before U_h)."""
    if x.shape[-1] != p.input_dim or h_prev.shape[-1] != p.hidden:
        raise ShapeError(
            f"gru_step: x {x.shape}, h {h_prev.shape} vs params ({p.input_dim}, {p.hidden})")
    z = sigmoid(add(add(matmul(_row(x), p["W_z"]), matmul(_row(h_prev), p["U_z"])), p["b_z"]))
    r = sigmoid(add(add(matmul(_row(x), p["W_r"]), matmul(_row(h_prev), p["U_r"])), p["b_r"]))
    cand = tanh(add(add(matmul(_row(x), p["W_h"]),
                        matmul(mul(r, _row(h_prev)), p["U_h"])), p["b_h"]))
    h = add(_row(h_prev), mul(z, sub(cand, _row(h_prev))))
    return reshape(h, h_prev.shape) if h_prev.value.ndim == 1 else h


def _row(v: Tensor) -> Tensor:
    return reshape(v, (1, v.shape[0])) if v.value.ndim == 1 else v


def gru_sequence(xs: Tensor, h0: Tensor, p: GruParams, return_sequences: bool = True,
                 fused: bool = True):
    """Run a GRU over the time axis of ``xs``.

    ``xs`` is (T, D) or batched (B, T, D); ``h0`` is (H,) or (B, H).
    Returns ``(states, final)`` where ``states`` is (..., T, H) or ``None``
    when ``return_sequences`` is off.  An empty sequence yields ``final = h0``.
    ``fused=False`` composes :func:`gru_step` calls instead of the hand-written
    backward pass; both paths compute the same values.
    """
    if xs.shape[-1] != p.input_dim:
        raise ShapeError(f"gru_sequence: inputs {xs.shape} vs input_dim {p.input_dim}")
    if h0.shape[-1] != p.hidden:
        raise ShapeError(f"gru_sequence: h0 {h0.shape} vs hidden {p.hidden}")
    T = xs.shape[-2]
    if T == 0:
        empty = constant(np.zeros(xs.shape[:-1] + (p.hidden,), dtype=h0.value.dtype))
        return (empty if return_sequences else None), h0
    if not fused:
        h = h0
        states = []
        for t in range(T):
            h = gru_step(index_last(xs, t), h, p)
            states.append(reshape(h, h.shape[:-1] + (1, p.hidden)))
        seq = concat(states, axis=-2) if return_sequences else None
        return seq, h
    states = _gru_fused(xs, h0, p)
    return (states if return_sequences else None), index_last(states, T - 1)


def _gru_fused(xs: Tensor, h0: Tensor, p: GruParams) -> Tensor:
    X = xs.value
    single = X.ndim == 2
    if single:
        X = X[None]
    H0 = h0.value[None] if h0.value.ndim == 1 else h0.value
    Wz, Wr, Wh, Uz, Ur, Uh, bz, br, bh = (t.value for t in p.ordered())
    B, T, _ = X.shape
    xz = X @ Wz + bz
    xr = X @ Wr + br
    xh = X @ Wh + bh
    hs = np.empty((B, T + 1, p.hidden), dtype=np.result_type(X, H0, Wz))
    zs = np.empty((B, T, p.hidden), dtype=hs.dtype)
    rs = np.empty_like(zs)
    cs = np.empty_like(zs)
    hs[:, 0] = H0
    for t in range(T):
        h = hs[:, t]
        z = _sigmoid(xz[:, t] + h @ Uz)
        r = _sigmoid(xr[:, t] + h @ Ur)
        c = np.tanh(xh[:, t] + (r * h) @ Uh)
        zs[:, t], rs[:, t], cs[:, t] = z, r, c
        hs[:, t + 1] = h + z * (c - h)
    out = hs[:, 1:]

    def back(g):
        G = g[None] if single else g
        dxz = np.empty_like(zs)
        dxr = np.empty_like(zs)
        dxh = np.empty_like(zs)
        dUz = np.zeros_like(Uz)
        dUr = np.zeros_like(Ur)
        dUh = np.zeros_like(Uh)
        carry = np.zeros((B, p.hidden), dtype=hs.dtype)
        for t in range(T - 1, -1, -1):
            h = hs[:, t]
            z, r, c = zs[:, t], rs[:, t], cs[:, t]
            dh_new = G[:, t] + carry
            dz = dh_new * (c - h)
            dc = dh_new * z
            dh = dh_new * (1 - z)
            dac = dc * (1 - c * c)
            rh = r * h
            dUh += rh.T @ dac
            drh = dac @ Uh.T
            dh += drh * r
            dar = drh * h * r * (1 - r)
            dUr += h.T @ dar
            dh += dar @ Ur.T
            daz = dz * z * (1 - z)
            dUz += h.T @ daz
            dh += daz @ Uz.T
            dxz[:, t], dxr[:, t], dxh[:, t] = daz, dar, dac
            carry = dh
        flatX = X.reshape(B * T, -1)
        grads_W = [flatX.T @ d.reshape(B * T, -1) for d in (dxz, dxr, dxh)]
        grads_b = [d.sum(axis=(0, 1)) for d in (dxz, dxr, dxh)]
        dX = dxz @ Wz.T + dxr @ Wr.T + dxh @ Wh.T
        if single:
            dX = dX[0]
        dh0 = carry[0] if h0.value.ndim == 1 else carry
        return (dX, dh0, *grads_W, dUz, dUr, dUh, *grads_b)

    result = out[0] if single else out
    return _make(result, "gru_sequence", (xs, h0, *p.ordered()), back)


# ---------------------------------------------------------------------------
# backward pass

def backward(tape: Tape, loss: Tensor, params: dict[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Reverse accumulation from a scalar ``loss``.

    Returns gradients keyed by parameter name.  When ``params`` is given,
    every entry receives a gradient, zero when unreachable from ``loss``.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    for node in tape.nodes:
        node.grad = None
    touched: list[Tensor] = []
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None:
                continue
            if parent.grad is None:
                parent.grad = pg
                if parent.node_id < 0:
                    touched.append(parent)
            else:
                parent.grad = parent.grad + pg
    grads: dict[str, np.ndarray] = {}
    for leaf in touched:
        if leaf.name is not None:
            grads[leaf.name] = leaf.grad
        leaf.grad = None
    if loss.node_id < 0 and loss.name is not None:
        grads[loss.name] = np.ones_like(loss.value)
    if params is not None:
        for name, t in params.items():
            if name not in grads:
                grads[name] = np.zeros_like(t.value)
    return grads


# ---------------------------------------------------------------------------
# initialisation and optimisation

def init_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; identical seeds give bit-identical streams."""
    return np.random.Generator(np.random.PCG64(seed))


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


class Adam:
    """Adam with bias correction; state mirrors the parameter dict."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place."""
        if set(params) != set(grads):
            missing = sorted(set(params) - set(grads))
            extra = sorted(set(grads) - set(params))
            raise KeyError(f"gradient keys mismatch: missing {missing}, unexpected {extra}")
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1 ** t
        c2 = 1 - self.beta2 ** t
        for name, w in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(w)
                self.v[name] = np.zeros_like(w)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            if self.lr:
                w -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(w.dtype, copy=False)

