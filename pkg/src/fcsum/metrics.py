"""Sentence BLEU (order capped by reference length) and ROUGE-LCS."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

MAX_ORDER = 4


@dataclass
class BleuReport:
    precisions: dict[int, float]  # n -> clipped precision, only for n <= len(ref)
    brevity_penalty: float
    aggregate: float
    order: int

    def p(self, n: int) -> float | None:
        return self.precisions.get(n)


@dataclass
class RougeLcs:
    precision: float
    recall: float
    f1: float


def lcs_length(a: Sequence, b: Sequence) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def rouge_lcs(pred: Sequence, ref: Sequence, lcs: int | None = None) -> RougeLcs:
    """LCS precision/recall/F.  ``lcs`` overrides the computed subsequence length."""
    k = lcs_length(pred, ref) if lcs is None else lcs
    p = k / len(pred) if pred else 0.0
    r = k / len(ref) if ref else 0.0
    return RougeLcs(p, r, _f1(p, r))


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def clipped_precision(pred: Sequence, ref: Sequence, n: int) -> float:
    cand = _ngrams(pred, n)
    total = sum(cand.values())
    if total == 0:
        return 0.0
    ref_counts = _ngrams(ref, n)
    return sum(min(c, ref_counts[g]) for g, c in cand.items()) / total


def sentence_bleu(pred: Sequence, ref: Sequence) -> BleuReport:
    """BLEU on a 0-100 scale using orders 1..min(4, len(ref)), no smoothing."""
    order = min(MAX_ORDER, len(ref))
    precisions = {n: clipped_precision(pred, ref, n) for n in range(1, order + 1)}
    if not pred:
        return BleuReport(precisions, 0.0, 0.0, order)
    bp = 1.0 if len(pred) >= len(ref) else math.exp(1 - len(ref) / len(pred))
    if order == 0 or any(p == 0 for p in precisions.values()):
        return BleuReport(precisions, bp, 0.0, order)
    log_mean = sum(math.log(p) for p in precisions.values()) / order
    return BleuReport(precisions, bp, 100 * bp * math.exp(log_mean), order)


@dataclass
class CorpusReport:
    count: int
    bleu: float
    bleu_n: dict[int, float]
    rouge_p: float
    rouge_r: float
    rouge_f: float

    def rows(self) -> list[tuple[str, float]]:
        out = [("BLEU-A", self.bleu)]
        out += [(f"BLEU-{n}", self.bleu_n[n]) for n in range(1, MAX_ORDER + 1)]
        out += [("ROUGE-P", self.rouge_p), ("ROUGE-R", self.rouge_r), ("ROUGE-F", self.rouge_f)]
        return out

    def to_text(self) -> str:
        lines = [f"{'metric':<8} {'score':>7}"]
        lines += [f"{name:<8} {value:>7.2f}" for name, value in self.rows()]
        lines.append(f"{'methods':<8} {self.count:>7d}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "score"])
        for name, value in self.rows():
            w.writerow([name, f"{value:.4f}"])
        w.writerow(["methods", self.count])
        return buf.getvalue()


def corpus_scores(pairs: Sequence[tuple[Sequence, Sequence]]) -> CorpusReport:
    """Arithmetic means of per-sentence scores, all on a 0-100 scale.

    BLEU-n averages skip sentences whose reference is shorter than n.
    """
    if not pairs:
        raise ValueError("corpus_scores: no pairs")
    bleus = [sentence_bleu(p, r) for p, r in pairs]
    rouges = [rouge_lcs(p, r) for p, r in pairs]
    bleu_n = {}
    for n in range(1, MAX_ORDER + 1):
        vals = [b.precisions[n] for b in bleus if n in b.precisions]
        bleu_n[n] = 100 * sum(vals) / len(vals) if vals else 0.0
    k = len(pairs)
    return CorpusReport(
        count=k,
        bleu=sum(b.aggregate for b in bleus) / k,
        bleu_n=bleu_n,
        rouge_p=100 * sum(r.precision for r in rouges) / k,
        rouge_r=100 * sum(r.recall for r in rouges) / k,
        rouge_f=100 * sum(r.f1 for r in rouges) / k,
    )


def align(predictions: dict[str, list[str]], references: dict[str, list[str]]):
    """Pair predictions with references by method id; the id sets must match."""
    if set(predictions) != set(references):
        missing = len(set(references) - set(predictions))
        extra = len(set(predictions) - set(references))
        raise ValueError(f"prediction/reference mismatch: {missing} missing, {extra} unexpected ids")
    ids = sorted(references)
    return ids, [(predictions[i], references[i]) for i in ids]
