"""Per-method comparisons: score histograms, best-model tallies, word provenance, heatmaps."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import MethodRecord
from .metrics import sentence_bleu
from .model import AttentionRecord


def bleu1_histogram(scores: Sequence[float], bucket_width: float = 25) -> list[int]:
    """Counts per [0,w), [w,2w), ...; a score of exactly 100 lands in the last bucket."""
    buckets = math.ceil(100 / bucket_width)
    counts = [0] * buckets
    for s in scores:
        if not 0 <= s <= 100:
            raise ValueError(f"score {s} outside [0, 100]")
        counts[min(int(s // bucket_width), buckets - 1)] += 1
    return counts


@dataclass
class Breakdown:
    wins: dict[str, int]
    ties: dict[tuple[str, ...], int]
    uncredited: int
    total: int

    def share(self, model: str) -> float:
        return self.wins.get(model, 0) / self.total if self.total else 0.0


def best_model_breakdown(results: Mapping[str, Mapping[str, float]], threshold: float = 25) -> Breakdown:
    """Credit each method to its top-scoring model among scores above ``threshold``.

    Exact ties at the top go to a tie bucket keyed by the sorted model names.
    """
    models = sorted(results)
    ids = set(next(iter(results.values()))) if results else set()
    for m in models:
        if set(results[m]) != ids:
            raise ValueError(f"model {m!r} was scored on a different set of methods")
    wins = {m: 0 for m in models}
    ties: Counter[tuple[str, ...]] = Counter()
    uncredited = 0
    for mid in sorted(ids):
        eligible = {m: results[m][mid] for m in models if results[m][mid] > threshold}
        if not eligible:
            uncredited += 1
            continue
        top = max(eligible.values())
        leaders = tuple(m for m in models if eligible.get(m) == top)
        if len(leaders) == 1:
            wins[leaders[0]] += 1
        else:
            ties[leaders] += 1
    return Breakdown(wins, dict(ties), uncredited, len(ids))


@dataclass
class Provenance:
    compared: int
    improved: int
    context_word_available: int  # improved, reference has a context-only word
    used_context_word: int  # ... and the prediction contains one of those words
    worsened: int
    misled: int  # worsened, prediction has a context-only word absent from the reference
    improved_ids: list[str] = field(default_factory=list, repr=False)

    @property
    def available_rate(self) -> float:
        return self.context_word_available / self.improved if self.improved else 0.0

    @property
    def used_rate(self) -> float:
        return self.used_context_word / self.context_word_available if self.context_word_available else 0.0

    @property
    def misled_rate(self) -> float:
        return self.misled / self.worsened if self.worsened else 0.0


def context_only_words(record: MethodRecord) -> set[str]:
    return set(record.context_words) - set(record.code_words)


def word_provenance(records: Mapping[str, MethodRecord], baseline: Mapping[str, Sequence[str]],
                    candidate: Mapping[str, Sequence[str]],
                    references: Mapping[str, Sequence[str]]) -> Provenance:
    """Where ``candidate`` beats ``baseline`` on sentence BLEU, did context-only words explain it?"""
    improved = available = used = worsened = misled = 0
    improved_ids = []
    for mid in sorted(references):
        if mid not in records:
            raise KeyError(f"no record for method {mid!r}")
        ref = list(references[mid])
        a = sentence_bleu(baseline[mid], ref).aggregate
        b = sentence_bleu(candidate[mid], ref).aggregate
        ctx_only = context_only_words(records[mid])
        pred_words = set(candidate[mid])
        if b > a:
            improved += 1
            improved_ids.append(mid)
            in_ref = ctx_only & set(ref)
            if in_ref:
                available += 1
                if pred_words & in_ref:
                    used += 1
        elif b < a:
            worsened += 1
            if (pred_words & ctx_only) - set(ref):
                misled += 1
    return Provenance(len(references), improved, available, used, worsened, misled, improved_ids)


# ---------------------------------------------------------------------------
# heatmaps

def export_attention_heatmap(steps: Sequence[AttentionRecord], step: int, path,
                             pgm: bool = False) -> Path:
    """Write the file-context attention of one decode step as CSV (and optionally PGM).

    Columns are summary positions, rows are context functions, so each
    column sums to one.
    """
    if not 0 <= step < len(steps):
        raise IndexError(f"step {step} out of range for {len(steps)} decode steps")
    sattn = steps[step].sattn
    if sattn is None:
        raise ValueError("model has no file-context attention (use_fc is off)")
    path = Path(path)
    grid = np.asarray(sattn).T  # (n, comlen)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["function"] + [str(i + 1) for i in range(grid.shape[1])])
        for fn, row in enumerate(grid, 1):
            w.writerow([fn] + [f"{v:.9g}" for v in row])
    if pgm:
        top = grid.max()
        pixels = np.zeros_like(grid) if top <= 0 else grid / top
        img = np.round(pixels * 255).astype(np.uint8)
        header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
        path.with_suffix(".pgm").write_bytes(header + img.tobytes())
    return path


def read_attention_heatmap(path) -> np.ndarray:
    """Inverse of :func:`export_attention_heatmap`: returns (comlen, n)."""
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in row[1:]] for row in rows[1:]]).T
