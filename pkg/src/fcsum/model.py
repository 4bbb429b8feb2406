"""attendgru / ast-attendgru with an optional file-context encoder.

Data path for a batch of B samples (shapes per sample)::

    code ids (T)     -> shared embedding -> GRU -> tencout (T, H), tstate (H)
    sbt ids (A)      -> ast embedding    -> GRU -> aeout (A, H)            [use_ast]
    context (n, m)   -> shared embedding -> one GRU per row -> senc (n, H)  [use_fc]
    prefix (C)       -> summary embedding -> GRU(h0 = tstate) -> decout (C, H)

    each encoder output E: attn = softmax(decout E^T), context = attn E
    [scontext, tcontext, acontext, decout] -> relu dense (S) -> flatten -> softmax (V)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tc
from .corpus import PAD_ID, HyperParams, MethodRecord
from .tensor import GRU_NAMES, GruParams, Tensor

CHECKPOINT_MAGIC = b"FCSM"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _gru_shapes(prefix: str, input_dim: int, hidden: int) -> dict[str, tuple]:
    shapes = {}
    for name in GRU_NAMES:
        if name[0] == "W":
            shapes[f"{prefix}.{name}"] = (input_dim, hidden)
        elif name[0] == "U":
            shapes[f"{prefix}.{name}"] = (hidden, hidden)
        else:
            shapes[f"{prefix}.{name}"] = (hidden,)
    return shapes


def concat_width(hp: HyperParams, use_ast: bool, use_fc: bool) -> int:
    return hp.rnn_units * (2 + int(use_ast) + int(use_fc))


def param_shapes(hp: HyperParams, use_ast: bool, use_fc: bool) -> dict[str, tuple]:
    """Every trainable array of a variant, in initialisation order."""
    H = hp.rnn_units
    shapes: dict[str, tuple] = {
        "code_embed": (hp.code_vocab, hp.embed_code),
        "summary_embed": (hp.summary_vocab, hp.embed_code),
    }
    if use_ast:
        shapes["ast_embed"] = (hp.ast_vocab, hp.embed_ast)
    shapes.update(_gru_shapes("code_gru", hp.embed_code, H))
    if use_ast:
        shapes.update(_gru_shapes("ast_gru", hp.embed_ast, H))
    if use_fc:
        shapes.update(_gru_shapes("ctx_gru", hp.embed_code, H))
    shapes.update(_gru_shapes("dec_gru", hp.embed_code, H))
    shapes["squash.W"] = (concat_width(hp, use_ast, use_fc), hp.squash_units)
    shapes["squash.b"] = (hp.squash_units,)
    shapes["out.W"] = (hp.comlen * hp.squash_units, hp.summary_vocab)
    shapes["out.b"] = (hp.summary_vocab,)
    return shapes


@dataclass
class ModelParams:
    hp: HyperParams
    use_ast: bool
    use_fc: bool
    arrays: dict[str, np.ndarray]

    @property
    def name(self) -> str:
        return ("ast-attendgru" if self.use_ast else "attendgru") + ("+FC" if self.use_fc else "")

    @property
    def dtype(self):
        return self.arrays["out.W"].dtype

    def tensors(self) -> dict[str, Tensor]:
        return {k: tc.param(v, k) for k, v in self.arrays.items()}

    def astype(self, dtype) -> "ModelParams":
        return replace(self, arrays={k: v.astype(dtype) for k, v in self.arrays.items()})

    def copy(self) -> "ModelParams":
        return replace(self, arrays={k: v.copy() for k, v in self.arrays.items()})


def init_model(hp: HyperParams, use_ast: bool = True, use_fc: bool = True, seed: int = 0,
               dtype=np.float32) -> ModelParams:
    """Glorot-uniform weights, zero biases, embeddings uniform in +-0.05."""
    rng = tc.init_rng(seed)
    arrays = {}
    for name, shape in param_shapes(hp, use_ast, use_fc).items():
        if name.endswith("_embed"):
            arrays[name] = rng.uniform(-0.05, 0.05, size=shape).astype(dtype)
        elif len(shape) == 1:
            arrays[name] = np.zeros(shape, dtype=dtype)
        else:
            arrays[name] = tc.glorot_uniform(rng, shape[0], shape[1], dtype)
    return ModelParams(hp, use_ast, use_fc, arrays)


def _gru(P: dict[str, Tensor], prefix: str) -> GruParams:
    return GruParams({k: P[f"{prefix}.{k}"] for k in GRU_NAMES})


def _zeros_state(batch: int, hidden: int, dtype) -> Tensor:
    return tc.constant(np.zeros((batch, hidden), dtype=dtype))


# ---------------------------------------------------------------------------
# encoders and attention

def encode_code_text(P: dict[str, Tensor], code_ids: np.ndarray):
    """(B, T) ids -> tencout (B, T, H) and final state (B, H). PAD is not masked."""
    emb = tc.embedding_lookup(P["code_embed"], code_ids)
    gru = _gru(P, "code_gru")
    h0 = _zeros_state(emb.shape[0], gru.hidden, emb.value.dtype)
    return tc.gru_sequence(emb, h0, gru, return_sequences=True)


def encode_ast(P: dict[str, Tensor], sbt_ids: np.ndarray) -> Tensor:
    emb = tc.embedding_lookup(P["ast_embed"], sbt_ids)
    gru = _gru(P, "ast_gru")
    states, _ = tc.gru_sequence(emb, _zeros_state(emb.shape[0], gru.hidden, emb.value.dtype), gru)
    return states


def encode_file_context(P: dict[str, Tensor], fc: np.ndarray) -> Tensor:
    """(B, n, m) ids -> senc (B, n, H): one shared GRU run over every row, final states kept."""
    B, n, m = fc.shape
    emb = tc.embedding_lookup(P["code_embed"], fc.reshape(B * n, m))
    gru = _gru(P, "ctx_gru")
    _, final = tc.gru_sequence(emb, _zeros_state(B * n, gru.hidden, emb.value.dtype), gru,
                               return_sequences=False)
    return tc.reshape(final, (B, n, gru.hidden))


def attend(decout: Tensor, enc: Tensor):
    """Dot-product attention; returns (weights (C, P), context (C, H)) per batch entry."""
    if decout.shape[-1] != enc.shape[-1]:
        raise tc.ShapeError(f"attend: decoder {decout.shape} vs encoder {enc.shape}")
    weights = tc.softmax_rows(tc.matmul(decout, tc.transpose(enc)))
    return weights, tc.matmul(weights, enc)


@dataclass
class Encoded:
    tencout: Tensor
    tstate: Tensor
    aeout: Tensor | None = None
    senc: Tensor | None = None

    def take(self, index: np.ndarray) -> "Encoded":
        return Encoded(
            tc.take(self.tencout, index), tc.take(self.tstate, index),
            None if self.aeout is None else tc.take(self.aeout, index),
            None if self.senc is None else tc.take(self.senc, index),
        )


def stack_inputs(records: Sequence[MethodRecord]):
    code = np.stack([r.code_ids for r in records])
    sbt = np.stack([r.sbt_ids for r in records])
    fc = np.stack([r.fc for r in records])
    return code, sbt, fc


def encode(params: ModelParams, P: dict[str, Tensor], records: Sequence[MethodRecord]) -> Encoded:
    hp = params.hp
    code, sbt, fc = stack_inputs(records)
    if code.shape[1] != hp.tdatlen or sbt.shape[1] != hp.astlen or fc.shape[1:] != (hp.n, hp.m):
        raise tc.ShapeError(
            f"record shapes code {code.shape[1:]}, sbt {sbt.shape[1:]}, fc {fc.shape[1:]} "
            f"do not match hyperparameters")
    tencout, tstate = encode_code_text(P, code)
    enc = Encoded(tencout, tstate)
    if params.use_ast:
        enc.aeout = encode_ast(P, sbt)
    if params.use_fc:
        enc.senc = encode_file_context(P, fc)
    return enc


# ---------------------------------------------------------------------------
# decoder and output head

def decode(params: ModelParams, P: dict[str, Tensor], enc: Encoded, prefixes: np.ndarray):
    """Next-word distribution (B, V) and attention weights for (B, C) prefixes."""
    hp = params.hp
    if prefixes.shape[1] != hp.comlen:
        raise tc.ShapeError(f"prefix length {prefixes.shape[1]} != comlen {hp.comlen}")
    de = tc.embedding_lookup(P["summary_embed"], prefixes)
    decout, _ = tc.gru_sequence(de, enc.tstate, _gru(P, "dec_gru"))
    attention = {}
    parts = []
    if params.use_fc:
        attention["sattn"], scontext = attend(decout, enc.senc)
        parts.append(scontext)
    attention["tattn"], tcontext = attend(decout, enc.tencout)
    parts.append(tcontext)
    if params.use_ast:
        attention["ast_attn"], acontext = attend(decout, enc.aeout)
        parts.append(acontext)
    parts.append(decout)
    context = tc.concat(parts, axis=-1)
    squash = tc.dense(context, P["squash.W"], P["squash.b"], "relu")
    flat = tc.reshape(squash, (squash.shape[0], hp.comlen * hp.squash_units))
    probs = tc.dense(flat, P["out.W"], P["out.b"], "softmax")
    return probs, attention


def forward_batch(params: ModelParams, P: dict[str, Tensor], records: Sequence[MethodRecord],
                  prefixes: np.ndarray):
    """Forward pass for samples drawn from ``records``.

    Records repeated within the batch (the usual case for teacher-forced
    samples) are encoded once and their outputs gathered.
    """
    keys = [id(r) for r in records]
    first: dict[int, int] = {}
    unique = []
    for k, r in zip(keys, records):
        if k not in first:
            first[k] = len(unique)
            unique.append(r)
    enc = encode(params, P, unique)
    if len(unique) != len(records):
        enc = enc.take(np.array([first[k] for k in keys]))
    return decode(params, P, enc, np.asarray(prefixes, dtype=np.int64))


@dataclass
class AttentionRecord:
    tattn: np.ndarray
    ast_attn: np.ndarray | None = None
    sattn: np.ndarray | None = None


@dataclass
class ForwardOutput:
    probs: np.ndarray
    attention: AttentionRecord = field(repr=False)


def _attention_record(attention: dict[str, Tensor], row: int) -> AttentionRecord:
    return AttentionRecord(
        tattn=attention["tattn"].value[row],
        ast_attn=attention["ast_attn"].value[row] if "ast_attn" in attention else None,
        sattn=attention["sattn"].value[row] if "sattn" in attention else None,
    )


def forward(params: ModelParams, record: MethodRecord, prefix: Sequence[int]) -> ForwardOutput:
    """Single-sample forward without recording gradients."""
    probs, attention = forward_batch(params, params.tensors(), [record],
                                     np.asarray([prefix], dtype=np.int64))
    return ForwardOutput(probs.value[0], _attention_record(attention, 0))


def ablate_code_text(record: MethodRecord) -> MethodRecord:
    """Copy of ``record`` whose code/text sequence is all PAD."""
    return replace(record, code_ids=np.full_like(record.code_ids, PAD_ID))


# ---------------------------------------------------------------------------
# checkpoints

def _pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def save_checkpoint(params: ModelParams, path) -> None:
    """Little-endian binary: magic, version, hyperparameters, named float32 arrays."""
    header = dict(params.hp.to_dict(), use_ast=int(params.use_ast), use_fc=int(params.use_fc))
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
              struct.pack("<I", len(header))]
    for key, value in header.items():
        chunks += [_pack_name(key), struct.pack("<q", value)]
    chunks.append(struct.pack("<I", len(params.arrays)))
    for name, arr in params.arrays.items():
        chunks += [_pack_name(name), struct.pack("<B", arr.ndim),
                   struct.pack(f"<{arr.ndim}I", *arr.shape),
                   np.ascontiguousarray(arr, dtype="<f4").tobytes()]
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def read(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def name(self) -> str:
        (length,) = self.read("<H")
        raw = self.data[self.pos:self.pos + length]
        self.pos += length
        return raw.decode("utf-8")


def load_checkpoint(path, expect_hp: HyperParams | None = None) -> ModelParams:
    r = _Reader(Path(path).read_bytes())
    if r.data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    r.pos = 4
    (version,) = r.read("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (count,) = r.read("<I")
    header = {}
    for _ in range(count):
        key = r.name()
        header[key] = r.read("<q")[0]
    use_ast, use_fc = bool(header.pop("use_ast")), bool(header.pop("use_fc"))
    try:
        hp = HyperParams(**header)
    except TypeError as exc:
        raise CheckpointError(f"{path}: bad hyperparameter block ({exc})") from None
    if expect_hp is not None and hp != expect_hp:
        raise CheckpointError(f"{path}: hyperparameters {hp} do not match {expect_hp}")
    expected = param_shapes(hp, use_ast, use_fc)
    (count,) = r.read("<I")
    arrays = {}
    for _ in range(count):
        name = r.name()
        (rank,) = r.read("<B")
        dims = r.read(f"<{rank}I")
        if expected.get(name) != tuple(dims):
            raise CheckpointError(f"{path}: {name} has dims {dims}, expected {expected.get(name)}")
        size = int(np.prod(dims)) * 4
        if r.pos + size > len(r.data):
            raise CheckpointError("truncated checkpoint")
        arrays[name] = np.frombuffer(r.data, dtype="<f4", count=size // 4,
                                     offset=r.pos).reshape(dims).astype(np.float32)
        r.pos += size
    if set(arrays) != set(expected):
        raise CheckpointError(f"{path}: missing parameters {sorted(set(expected) - set(arrays))}")
    return ModelParams(hp, use_ast, use_fc, {k: arrays[k] for k in expected})
