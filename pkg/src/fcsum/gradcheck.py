"""Finite-difference checks of every differentiable op and of the full model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tc
from .corpus import HyperParams, MethodRecord
from .model import attend, forward_batch, init_model
from .tensor import GRU_NAMES, GruParams, Tape

STEP = 1e-5
OP_TOL = 1e-4
MODEL_TOL = 1e-3
ENTRY_FLOOR = 1e-8


@dataclass
class CheckResult:
    name: str
    rel_err: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.rel_err < self.tol


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-relative difference; 0 when both are zero."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def check_op(name: str, build: Callable[[dict[str, tc.Tensor]], tc.Tensor],
             inputs: dict[str, np.ndarray], rng: np.random.Generator, tol: float = OP_TOL) -> CheckResult:
    """Compare analytic and numeric gradients of ``sum(build(inputs) * W)`` for random W."""
    probe = None

    def scalar(tensors):
        nonlocal probe
        out = build(tensors)
        if probe is None:
            probe = rng.normal(size=out.shape)
        return tc.sum_all(tc.mul(out, tc.constant(probe)))

    tensors = {k: tc.param(v, k) for k, v in inputs.items()}
    with Tape() as tape:
        loss = scalar(tensors)
    grads = tc.backward(tape, loss, tensors)

    def f():
        return float(scalar({k: tc.param(v, k) for k, v in inputs.items()}).value)

    worst = 0.0
    for k, v in inputs.items():
        worst = max(worst, rel_error(grads[k], numerical_grad(f, v)))
    return CheckResult(name, worst, tol)


def _gru_inputs(rng, d, h):
    out = {}
    for k in GRU_NAMES:
        shape = (d, h) if k[0] == "W" else (h, h) if k[0] == "U" else (h,)
        out[k] = rng.normal(scale=0.5, size=shape)
    return out


def op_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    def add(name, build, inputs):
        results.append(check_op(name, build, inputs, rng))

    add("matmul", lambda t: tc.matmul(t["a"], t["b"]),
        {"a": rng.normal(size=(4, 5)), "b": rng.normal(size=(5, 3))})
    add("matmul_batched", lambda t: tc.matmul(t["a"], t["b"]),
        {"a": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=(4, 2))})
    add("softmax_rows", lambda t: tc.softmax_rows(t["m"]), {"m": rng.normal(size=(3, 5))})
    add("sigmoid", lambda t: tc.sigmoid(t["x"]), {"x": rng.normal(size=(3, 4))})
    add("tanh", lambda t: tc.tanh(t["x"]), {"x": rng.normal(size=(3, 4))})
    add("relu", lambda t: tc.relu(t["x"]), {"x": rng.normal(size=(3, 4)) + 0.05})
    add("sub_mul", lambda t: tc.mul(tc.sub(t["a"], t["b"]), t["a"]),
        {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4,))})
    add("concat", lambda t: tc.concat([t["a"], t["b"]], axis=-1),
        {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(2, 4))})
    add("take", lambda t: tc.take(t["a"], np.array([0, 2, 0])), {"a": rng.normal(size=(3, 4))})
    add("embedding", lambda t: tc.embedding_lookup(t["table"], np.array([[1, 1], [4, 0]])),
        {"table": rng.normal(size=(5, 3))})
    for act in ("none", "relu", "softmax"):
        add(f"dense_{act}", lambda t, act=act: tc.dense(t["x"], t["W"], t["b"], act),
            {"x": rng.normal(size=(4, 5)), "W": rng.normal(size=(5, 3)), "b": rng.normal(size=(3,))})
    add("softmax_cross_entropy",
        lambda t: tc.cross_entropy(tc.softmax_rows(t["z"]), np.array([1, 3, 0])),
        {"z": rng.normal(size=(3, 6))})
    add("attend", lambda t: tc.concat(list(attend(t["dec"], t["enc"])), axis=-1),
        {"dec": rng.normal(size=(2, 4, 3)), "enc": rng.normal(size=(2, 5, 3))})

    d, h = 3, 4
    gru = _gru_inputs(rng, d, h)
    add("gru_step", lambda t: tc.gru_step(t["x"], t["h"], GruParams({k: t[k] for k in GRU_NAMES})),
        {"x": rng.normal(size=(d,)), "h": rng.normal(size=(h,)), **gru})
    for fused in (True, False):
        label = "fused" if fused else "composed"
        add(f"gru_sequence_{label}",
            lambda t, fused=fused: tc.gru_sequence(
                t["xs"], t["h0"], GruParams({k: t[k] for k in GRU_NAMES}), fused=fused)[0],
            {"xs": rng.normal(size=(2, 4, d)), "h0": rng.normal(size=(2, h)), **gru})
    add("gru_sequence_final_wrt_h0",
        lambda t: tc.gru_sequence(t["xs"], t["h0"], GruParams({k: t[k] for k in GRU_NAMES}),
                                  return_sequences=False)[1],
        {"xs": rng.normal(size=(4, d)), "h0": rng.normal(size=(h,)), **gru})
    return results


def random_record(hp: HyperParams, rng: np.random.Generator, rid: str = "r0") -> MethodRecord:
    words = rng.integers(4, hp.summary_vocab, size=hp.comlen - 2)
    return MethodRecord(
        id=rid, file_id="f0",
        code_ids=rng.integers(0, hp.code_vocab, size=hp.tdatlen),
        sbt_ids=rng.integers(0, hp.ast_vocab, size=hp.astlen),
        summary_ids=np.concatenate([[2], words, [3]]).astype(np.int64),
        fc=rng.integers(0, hp.code_vocab, size=(hp.n, hp.m)),
    )


def model_check(hp: HyperParams | None = None, samples: int = 20, seed: int = 0,
                use_ast: bool = True, use_fc: bool = True) -> list[CheckResult]:
    """Sampled end-to-end check: one training sample, double precision.

    Each sampled entry is scored as |a - n| / max(|a|, |n|, 1e-8).
    """
    hp = hp or HyperParams.desk()
    rng = np.random.default_rng(seed)
    params = init_model(hp, use_ast, use_fc, seed=seed, dtype=np.float64)
    # lift the weights away from their tiny initial scale so gradients are not vanishingly small
    for k, v in params.arrays.items():
        v += rng.normal(scale=0.05, size=v.shape)
    record = random_record(hp, rng)
    prefix = np.zeros((1, hp.comlen), dtype=np.int64)
    prefix[0, :3] = record.summary_ids[:3]
    target = np.array([record.summary_ids[3]])

    def loss_value():
        probs, _ = forward_batch(params, params.tensors(), [record], prefix)
        return float(-np.log(probs.value[0, target[0]]))

    P = params.tensors()
    with Tape() as tape:
        probs, _ = forward_batch(params, P, [record], prefix)
        loss = tc.cross_entropy(probs, target)
    grads = tc.backward(tape, loss, P)

    # pick a parameter uniformly, then an entry the loss depends on, so the large
    # output matrix does not swallow every sample
    live = {n: np.flatnonzero(grads[n]) for n in sorted(params.arrays)}
    names = [n for n, idx in live.items() if len(idx)]
    results = []
    for _ in range(samples):
        name = names[rng.integers(len(names))]
        flat = int(rng.choice(live[name]))
        arr = params.arrays[name].reshape(-1)
        old = arr[flat]
        arr[flat] = old + STEP
        up = loss_value()
        arr[flat] = old - STEP
        down = loss_value()
        arr[flat] = old
        numeric = (up - down) / (2 * STEP)
        analytic = grads[name].reshape(-1)[flat]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), ENTRY_FLOOR)
        results.append(CheckResult(f"model:{name}[{flat}]", err, MODEL_TOL))
    return results


def run_suite(seed: int = 0) -> list[CheckResult]:
    return op_checks(seed) + model_check(seed=seed)
