"""Greedy summary generation and attention capture."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import END_ID, PAD_ID, START_ID, MethodRecord, Vocab
from .model import AttentionRecord, ModelParams, _attention_record, decode, encode


class VocabMismatchError(ValueError):
    pass


def _check(params: ModelParams, records: Sequence[MethodRecord], vocab: Vocab | None):
    hp = params.hp
    if vocab is not None and len(vocab) > hp.summary_vocab:
        raise VocabMismatchError(
            f"summary vocab has {len(vocab)} entries but the model outputs {hp.summary_vocab}")
    for r in records:
        if r.code_ids.max(initial=0) >= hp.code_vocab or r.fc.max(initial=0) >= hp.code_vocab:
            raise VocabMismatchError(f"{r.id}: code id outside the model's vocabulary")
        if r.sbt_ids.max(initial=0) >= hp.ast_vocab:
            raise VocabMismatchError(f"{r.id}: AST id outside the model's vocabulary")


def predict_ids(params: ModelParams, records: Sequence[MethodRecord], batch_size: int = 256,
                vocab: Vocab | None = None) -> list[list[int]]:
    """Greedy decoding for many records at once; returns content-word ids.

    Stops at <et> or after ``comlen - 2`` words, the longest summary a
    record can hold.
    """
    _check(params, records, vocab)
    comlen = params.hp.comlen
    results: list[list[int]] = []
    P = params.tensors()
    for start in range(0, len(records), batch_size):
        chunk = list(records[start:start + batch_size])
        enc = encode(params, P, chunk)
        prefixes = np.full((len(chunk), comlen), PAD_ID, dtype=np.int64)
        prefixes[:, 0] = START_ID
        done = np.zeros(len(chunk), dtype=bool)
        words: list[list[int]] = [[] for _ in chunk]
        for k in range(comlen - 2):
            probs, _ = decode(params, P, enc, prefixes)
            pred = probs.value.argmax(axis=-1)
            for i, w in enumerate(pred):
                if done[i]:
                    continue
                if w == END_ID:
                    done[i] = True
                    continue
                words[i].append(int(w))
                prefixes[i, k + 1] = w
            if done.all():
                break
        results.extend(words)
    return results


def _strip(ids: Sequence[int]) -> list[int]:
    return [i for i in ids if i not in (PAD_ID, START_ID, END_ID)]


def predict_summary(params: ModelParams, record: MethodRecord, vocab: Vocab) -> list[str]:
    (ids,) = predict_ids(params, [record], vocab=vocab)
    return vocab.decode(_strip(ids))


def predict_many(params: ModelParams, records: Sequence[MethodRecord], vocab: Vocab) -> list[list[str]]:
    return [vocab.decode(_strip(ids)) for ids in predict_ids(params, records, vocab=vocab)]


@dataclass
class StepAttention:
    step: int
    prefix: np.ndarray
    probs: np.ndarray
    attention: AttentionRecord

    @property
    def decisive_row(self) -> int:
        """Decoder position holding the last prefix token, i.e. the one predicting next."""
        return self.step


def capture_attention(params: ModelParams, record: MethodRecord,
                      target_ids: Sequence[int]) -> list[StepAttention]:
    """Teacher-force ``target_ids`` (content words) and record attention at every step.

    Step k feeds ``<st> w1 .. wk`` and predicts word k+1 (or <et>).  When the
    model has no file-context encoder, ``attention.sattn`` is ``None``.
    """
    comlen = params.hp.comlen
    words = list(target_ids)[: comlen - 2]
    steps = len(words) + 1
    prefixes = np.full((steps, comlen), PAD_ID, dtype=np.int64)
    for k in range(steps):
        prefixes[k, 0] = START_ID
        prefixes[k, 1:k + 1] = words[:k]
    P = params.tensors()
    enc = encode(params, P, [record]).take(np.zeros(steps, dtype=np.int64))
    probs, attention = decode(params, P, enc, prefixes)
    return [StepAttention(k, prefixes[k], probs.value[k], _attention_record(attention, k))
            for k in range(steps)]


def write_predictions(ids: Sequence[str], predictions: Sequence[Sequence[str]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for mid, words in zip(ids, predictions):
            w.writerow([mid, " ".join(words)])


def read_predictions(path) -> dict[str, list[str]]:
    """``method_id<TAB>summary`` lines into a dict of word lists."""
    out: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise ValueError(f"{path}:{lineno}: expected method_id<TAB>summary")
            mid, text = line.split("\t", 1)
            if mid in out:
                raise ValueError(f"{path}:{lineno}: duplicate method id {mid!r}")
            out[mid] = text.split()
    return out
