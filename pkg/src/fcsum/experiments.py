"""Synthetic experiments with known answers, shared by the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from . import corpus, inference, metrics, synthetic, tensor as tc, training
from .analysis import Provenance, word_provenance
from .corpus import HyperParams, MethodRecord
from .model import ModelParams, ablate_code_text, init_model

EXPERIMENT_LR = 3e-3


def train_for(params: ModelParams, records: list[MethodRecord], epochs: int, lr: float = EXPERIMENT_LR,
              seed: int = 0, batch_size: int = 32) -> training.EpochStats:
    samples = training.expand_all(records)
    opt, rng = tc.Adam(lr=lr), tc.init_rng(seed)
    stats = None
    for _ in range(epochs):
        stats = training.train_epoch(params, samples, opt, batch_size, rng)
    return stats


# ---------------------------------------------------------------------------
# overfit

@dataclass
class OverfitResult:
    epochs: int
    loss: float
    accuracy: float
    bleu: float
    flight_prediction: list[str]
    flight_reference: list[str]
    seconds: float


def overfit(max_epochs: int = 300, seed: int = 0, lr: float = EXPERIMENT_LR, check_every: int = 10,
            hp: HyperParams | None = None) -> OverfitResult:
    """Memorise the 32-method corpus; stop at the first check meeting every target.

    The flight summary has seven words, so the default preset widens
    comlen to 9 to hold it with its markers.
    """
    start = time.perf_counter()
    hp = hp or HyperParams.desk(comlen=9)
    methods = synthetic.overfit_corpus(32, seed=seed)
    vocabs = corpus.build_vocabs(methods, hp)
    records = corpus.encode_methods(methods, vocabs, hp)
    target = next(r for r in records if r.id == synthetic.FLIGHT_TARGET.id)
    refs = [corpus.summary_words(r, vocabs.summary) for r in records]
    params = init_model(hp, True, True, seed=seed)
    samples = training.expand_all(records)
    opt, rng = tc.Adam(lr=lr), tc.init_rng(seed)
    epoch = 0
    while True:
        for _ in range(check_every):
            training.train_epoch(params, samples, opt, 32, rng)
        epoch += check_every
        ev = training.evaluate_samples(params, samples)
        bleu = metrics.corpus_scores(list(zip(inference.predict_many(params, records, vocabs.summary),
                                              refs))).bleu
        if (ev.accuracy >= 0.95 and bleu >= 90 and ev.loss < 0.1) or epoch >= max_epochs:
            break
    return OverfitResult(epoch, ev.loss, ev.accuracy, bleu,
                         inference.predict_summary(params, target, vocabs.summary),
                         corpus.summary_words(target, vocabs.summary), time.perf_counter() - start)


# ---------------------------------------------------------------------------
# file-context benefit

@dataclass
class VariantResult:
    name: str
    bleu: float
    bleu1: float
    predictions: dict[str, list[str]]
    attention_hits: int = 0
    attention_total: int = 0

    @property
    def attention_rate(self) -> float:
        return self.attention_hits / self.attention_total if self.attention_total else 0.0


@dataclass
class SeedResult:
    seed: int
    variants: dict[str, VariantResult]
    provenance: Provenance | None
    seconds: float
    params: dict[str, ModelParams] = field(default_factory=dict, repr=False)
    test_records: list[MethodRecord] = field(default_factory=list, repr=False)


def attention_hits(params: ModelParams, records: list[MethodRecord], vocab: corpus.Vocab,
                   planted: dict[str, synthetic.PlantedFile]) -> int:
    """Count records whose decisive sattn row peaks on the planted informative function.

    The decisive row is the decoder position that predicts the summary's
    last word, the one found only in file context.
    """
    hits = 0
    for r in records:
        words = [vocab.id(w) for w in corpus.summary_words(r, vocab)]
        steps = inference.capture_attention(params, r, words)
        step = steps[len(words) - 1]
        row = step.attention.sattn[step.decisive_row]
        hits += int(row.argmax() == synthetic.informative_row(planted[r.file_id], r.id))
    return hits


def fc_experiment(seed: int, epochs: int = 20, lr: float = EXPERIMENT_LR, num_files: int = 80,
                  train_files: int = 60, ablate: bool = False, keep_params: bool = False) -> SeedResult:
    """Train the AST model with and without file context on one planted corpus.

    With ``ablate`` the code/text sequence of every record is PAD, so the
    comparison is AST-only against AST plus file context.
    """
    start = time.perf_counter()
    files = synthetic.fc_corpus(num_files, seed=seed)
    train_methods = synthetic.flatten(files[:train_files])
    test_methods = synthetic.flatten(files[train_files:])
    hp = HyperParams.desk()
    vocabs = corpus.build_vocabs(train_methods, hp)
    train = corpus.encode_methods(train_methods, vocabs, hp)
    test = corpus.encode_methods(test_methods, vocabs, hp)
    if ablate:
        train = [ablate_code_text(r) for r in train]
        test = [ablate_code_text(r) for r in test]
    refs = {r.id: corpus.summary_words(r, vocabs.summary) for r in test}
    planted = {f.file_id: f for f in files}
    variants, kept = {}, {}
    for use_fc in (False, True):
        params = init_model(hp, True, use_fc, seed=seed)
        train_for(params, train, epochs, lr, seed)
        preds = dict(zip(refs, inference.predict_many(params, test, vocabs.summary)))
        _, pairs = metrics.align(preds, refs)
        rep = metrics.corpus_scores(pairs)
        v = VariantResult(params.name, rep.bleu, rep.bleu_n[1], preds)
        if use_fc:
            v.attention_hits = attention_hits(params, test, vocabs.summary, planted)
            v.attention_total = len(test)
        key = "fc" if use_fc else "base"
        variants[key] = v
        if keep_params:
            kept[key] = params
    prov = word_provenance({r.id: r for r in test}, variants["base"].predictions,
                           variants["fc"].predictions, refs)
    return SeedResult(seed, variants, prov, time.perf_counter() - start, kept,
                      test if keep_params else [])
