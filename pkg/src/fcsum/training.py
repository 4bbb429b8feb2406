"""Teacher-forcing training loop with validation-accuracy checkpoint selection."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as tc
from .corpus import END_ID, PAD_ID, START_ID, HyperParams, MethodRecord
from .model import ModelParams, forward_batch, save_checkpoint

log = logging.getLogger(__name__)


class MalformedRecordError(ValueError):
    pass


@dataclass
class TrainingSample:
    record: MethodRecord
    prefix: np.ndarray
    target: int


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    checkpoint_dir: str = "checkpoints"
    use_ast: bool = True
    use_fc: bool = True
    hp: HyperParams = field(default_factory=HyperParams.desk)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def _coerce(text: str, kind):
    if kind is bool:
        low = text.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return low in ("true", "1", "yes")
    return kind(text)


_CONFIG_TYPES = {"epochs": int, "batch_size": int, "lr": float, "seed": int,
                 "checkpoint_dir": str, "use_ast": bool, "use_fc": bool}
_HP_KEYS = {f.name for f in fields(HyperParams)} - {"epochs"}


def parse_config(text: str, overrides: dict | None = None) -> TrainConfig:
    """Flat ``key = value`` lines; '#' starts a comment.  Unknown keys are errors.

    Keys are TrainConfig fields or hyperparameter names; hyperparameters
    start from the desk preset.  ``overrides`` (already typed) win over the file.
    """
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in _CONFIG_TYPES:
            values[key] = _coerce(value, _CONFIG_TYPES[key])
        elif key in _HP_KEYS:
            values[key] = int(value)
        else:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    hp_values = {k: values.pop(k) for k in list(values) if k in _HP_KEYS}
    return TrainConfig(hp=HyperParams.desk(**hp_values), **values)


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), overrides)


# ---------------------------------------------------------------------------
# teacher forcing

def expand_teacher_forcing(record: MethodRecord) -> list[TrainingSample]:
    """One sample per summary word plus one predicting <et>."""
    ids = record.summary_ids
    if len(ids) == 0 or ids[0] != START_ID:
        raise MalformedRecordError(f"{record.id}: summary does not start with <st>")
    ends = np.flatnonzero(ids == END_ID)
    if len(ends) == 0:
        raise MalformedRecordError(f"{record.id}: summary has no <et>")
    end = int(ends[0])
    samples = []
    for k in range(end):
        prefix = np.full(len(ids), PAD_ID, dtype=np.int64)
        prefix[: k + 1] = ids[: k + 1]
        samples.append(TrainingSample(record, prefix, int(ids[k + 1])))
    return samples


def expand_all(records: Sequence[MethodRecord]) -> list[TrainingSample]:
    return [s for r in records for s in expand_teacher_forcing(r)]


# ---------------------------------------------------------------------------
# epochs

@dataclass
class EpochStats:
    loss: float
    accuracy: float


def _collate(samples: Sequence[TrainingSample]):
    prefixes = np.stack([s.prefix for s in samples])
    targets = np.array([s.target for s in samples], dtype=np.int64)
    return [s.record for s in samples], prefixes, targets


def _argmax(probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest id on ties
    return probs.argmax(axis=-1)


def loss_and_grads(params: ModelParams, samples: Sequence[TrainingSample]):
    """Mean cross-entropy over ``samples`` and its gradient for every parameter."""
    P = params.tensors()
    records, prefixes, targets = _collate(samples)
    with tc.Tape() as tape:
        probs, _ = forward_batch(params, P, records, prefixes)
        loss = tc.cross_entropy(probs, targets)
    if not np.isfinite(loss.value):
        bad = tape.first_nonfinite()
        where = f"{bad.op} (node {bad.node_id}, shape {bad.shape})" if bad is not None else "loss"
        raise tc.NumericError(f"non-finite loss; first non-finite node: {where}")
    grads = tc.backward(tape, loss, P)
    return float(loss.value), grads, probs.value, targets


def train_epoch(params: ModelParams, samples: Sequence[TrainingSample], optimizer: tc.Adam,
                batch_size: int, rng: np.random.Generator) -> EpochStats:
    """One seeded pass over ``samples``; ``params`` are updated in place."""
    if not samples:
        raise ValueError("train_epoch: no samples")
    order = rng.permutation(len(samples))
    total_loss = 0.0
    correct = 0
    for start in range(0, len(order), batch_size):
        batch = [samples[i] for i in order[start:start + batch_size]]
        loss, grads, probs, targets = loss_and_grads(params, batch)
        optimizer.step(params.arrays, grads)
        total_loss += loss * len(batch)
        correct += int((_argmax(probs) == targets).sum())
    return EpochStats(total_loss / len(samples), correct / len(samples))


def evaluate_samples(params: ModelParams, samples: Sequence[TrainingSample],
                     batch_size: int = 256) -> EpochStats:
    """Teacher-forced loss and top-1 accuracy without updating anything."""
    if not samples:
        raise ValueError("evaluate_samples: no samples")
    P = params.tensors()
    total_loss = 0.0
    correct = 0
    for start in range(0, len(samples), batch_size):
        records, prefixes, targets = _collate(samples[start:start + batch_size])
        probs, _ = forward_batch(params, P, records, prefixes)
        picked = probs.value[np.arange(len(targets)), targets]
        total_loss += float(-np.log(np.maximum(picked, tc.CE_EPS)).sum())
        correct += int((_argmax(probs.value) == targets).sum())
    return EpochStats(total_loss / len(samples), correct / len(samples))


def validate(params: ModelParams, samples: Sequence[TrainingSample]) -> float:
    return evaluate_samples(params, samples).accuracy


# ---------------------------------------------------------------------------
# fit

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    checkpoint: str


@dataclass
class FitResult:
    best_checkpoint: str
    best_epoch: int
    history: list[EpochRecord]


def write_history(history: Sequence[EpochRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "train_acc", "val_acc", "checkpoint"])
        for h in history:
            w.writerow([h.epoch, f"{h.train_loss:.6f}", f"{h.train_acc:.6f}",
                        f"{h.val_acc:.6f}", h.checkpoint])


def fit(params: ModelParams, train: Sequence[MethodRecord], val: Sequence[MethodRecord],
        config: TrainConfig,
        validate_fn: Callable[[ModelParams, Sequence[TrainingSample]], float] = validate) -> FitResult:
    """Train for ``config.epochs`` epochs, checkpointing each; keep the best by validation accuracy.

    Ties go to the earliest epoch.  Checkpoint paths in the history are
    relative to ``config.checkpoint_dir``.
    """
    if not train or not val:
        raise ValueError("fit: train and validation sets must be nonempty")
    out = Path(config.checkpoint_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create checkpoint directory {out}: {exc}") from None
    train_samples = expand_all(train)
    val_samples = expand_all(val)
    rng = tc.init_rng(config.seed)
    optimizer = tc.Adam(lr=config.lr)
    history: list[EpochRecord] = []
    best = (-1.0, 0)
    for epoch in range(1, config.epochs + 1):
        stats = train_epoch(params, train_samples, optimizer, config.batch_size, rng)
        val_acc = validate_fn(params, val_samples)
        name = f"epoch_{epoch:03d}.fcsm"
        save_checkpoint(params, out / name)
        history.append(EpochRecord(epoch, stats.loss, stats.accuracy, val_acc, name))
        log.info("epoch %d loss %.4f train_acc %.4f val_acc %.4f",
                 epoch, stats.loss, stats.accuracy, val_acc)
        if val_acc > best[0]:
            best = (val_acc, epoch)
    write_history(history, out / "history.csv")
    best_epoch = best[1]
    return FitResult(str(out / history[best_epoch - 1].checkpoint), best_epoch, history)
