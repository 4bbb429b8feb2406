"""Command-line entry point: ``fcsum <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numeric failure.
Set ``FCSUM_LOG`` (e.g. ``INFO``) for log output on stderr.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from . import analysis, corpus, gradcheck, inference, metrics, model, training
from .tensor import NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SPLITS = ("train", "val", "test")

log = logging.getLogger("fcsum")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _data_dir(args) -> Path:
    d = Path(args.data)
    if not d.is_dir():
        raise FileNotFoundError(f"data directory {d} does not exist")
    return d


def _config(args) -> training.TrainConfig:
    overrides = {"seed": args.seed}
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    if getattr(args, "out", None) is not None and args.command == "train":
        overrides["checkpoint_dir"] = args.out
    if args.config:
        return training.load_config(args.config, overrides)
    return training.parse_config("", overrides)


def _write_refs(records, vocab, path) -> None:
    inference.write_predictions([r.id for r in records],
                                [corpus.summary_words(r, vocab) for r in records], path)


# ---------------------------------------------------------------------------
# subcommands

def cmd_preprocess(args) -> int:
    cfg = _config(args)
    raw = corpus.load_dataset(args.input)
    ratios = tuple(float(x) for x in args.split.split(","))
    parts = dict(zip(SPLITS, corpus.split_dataset(raw, ratios, seed=args.seed)))
    vocabs = corpus.build_vocabs(parts["train"], cfg.hp)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocabs.save(out)
    for name, methods in parts.items():
        records = corpus.encode_methods(methods, vocabs, cfg.hp)
        corpus.save_records(records, out / f"{name}.jsonl")
        _write_refs(records, vocabs.summary, out / f"{name}.ref.tsv")
        print(f"{name}: {len(records)} summarised methods")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    data = _data_dir(args)
    train = corpus.load_records(data / "train.jsonl")
    val = corpus.load_records(data / "val.jsonl")
    params = model.init_model(cfg.hp, cfg.use_ast, cfg.use_fc, seed=cfg.seed)
    result = training.fit(params, train, val, cfg)
    print(f"best epoch {result.best_epoch}: {result.best_checkpoint}")
    return EXIT_OK


def cmd_predict(args) -> int:
    data = _data_dir(args)
    vocabs = corpus.Vocabs.load(data)
    params = model.load_checkpoint(args.checkpoint)
    records = corpus.load_records(data / f"{args.split}.jsonl")
    preds = inference.predict_many(params, records, vocabs.summary)
    inference.write_predictions([r.id for r in records], preds, args.out)
    print(f"wrote {len(preds)} predictions to {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    preds = inference.read_predictions(args.pred)
    refs = inference.read_predictions(args.ref)
    _, pairs = metrics.align(preds, refs)
    report = metrics.corpus_scores(pairs)
    sys.stdout.write(report.to_text())
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8")
    return EXIT_OK


def cmd_analyze(args) -> int:
    refs = inference.read_predictions(args.ref)
    models: dict[str, dict[str, list[str]]] = {}
    for spec in args.model:
        if "=" not in spec:
            raise UsageError(f"--model expects name=path, got {spec!r}")
        name, path = spec.split("=", 1)
        models[name] = inference.read_predictions(path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    bleu1 = {}
    for name, preds in models.items():
        ids, pairs = metrics.align(preds, refs)
        bleu1[name] = {i: 100 * metrics.sentence_bleu(p, r).precisions.get(1, 0.0)
                       for i, (p, r) in zip(ids, pairs)}
    with open(out / "bleu1_histogram.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "0-25", "25-50", "50-75", "75-100"])
        for name in models:
            w.writerow([name] + analysis.bleu1_histogram(list(bleu1[name].values())))
    breakdown = analysis.best_model_breakdown(bleu1, threshold=args.threshold)
    with open(out / "best_model.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["credit", "methods", "percent"])
        for name, count in breakdown.wins.items():
            w.writerow([name, count, f"{100 * count / breakdown.total:.2f}"])
        for tied, count in sorted(breakdown.ties.items()):
            w.writerow(["tie:" + "+".join(tied), count, f"{100 * count / breakdown.total:.2f}"])
        w.writerow(["none", breakdown.uncredited,
                    f"{100 * breakdown.uncredited / breakdown.total:.2f}"])
    if args.baseline and args.candidate:
        data = _data_dir(args)
        records = {r.id: r for r in corpus.load_records(data / f"{args.split}.jsonl")}
        prov = analysis.word_provenance(records, models[args.baseline], models[args.candidate], refs)
        with open(out / "provenance.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["compared", "improved", "context_word_available", "used_context_word",
                        "worsened", "misled"])
            w.writerow([prov.compared, prov.improved, prov.context_word_available,
                        prov.used_context_word, prov.worsened, prov.misled])
    print(f"wrote analysis tables to {out}")
    return EXIT_OK


def cmd_attention(args) -> int:
    data = _data_dir(args)
    vocabs = corpus.Vocabs.load(data)
    params = model.load_checkpoint(args.checkpoint)
    if not params.use_fc:
        raise ValueError("checkpoint has no file-context encoder; there is no sattn to export")
    records = {r.id: r for r in corpus.load_records(data / f"{args.split}.jsonl")}
    if args.method_id not in records:
        raise KeyError(f"method {args.method_id!r} not in {args.split} split")
    record = records[args.method_id]
    words = [vocabs.summary.id(w) for w in corpus.summary_words(record, vocabs.summary)]
    steps = inference.capture_attention(params, record, words)
    step = len(steps) - 2 if args.step is None else args.step
    path = analysis.export_attention_heatmap([s.attention for s in steps], max(step, 0),
                                             args.out, pgm=args.pgm)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    records = corpus.load_records(args.input)
    corpus.save_records([model.ablate_code_text(r) for r in records], args.out)
    print(f"ablated {len(records)} records")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(seed=args.seed)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name:<40} rel_err={r.rel_err:.2e} tol={r.tol:.0e}")
    failed = [r for r in results if not r.ok]
    if failed:
        raise NumericError(f"{len(failed)} gradient checks failed")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fcsum", description="File-context code summarization pipeline.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--seed", type=int, default=0)
        sp.set_defaults(func=func)
        return sp

    sp = add("preprocess", cmd_preprocess, "raw JSONL -> vocabularies + encoded splits")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config")
    sp.add_argument("--split", default="0.8,0.1,0.1")

    sp = add("train", cmd_train, "train a model; writes per-epoch checkpoints and history.csv")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", help="checkpoint directory (overrides config)")
    sp.add_argument("--config")
    sp.add_argument("--epochs", type=int)

    sp = add("predict", cmd_predict, "greedy predictions for one split as TSV")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", choices=SPLITS, default="test")
    sp.add_argument("--out", required=True)

    sp = add("evaluate", cmd_evaluate, "BLEU and ROUGE-LCS of predictions against references")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--csv")

    sp = add("analyze", cmd_analyze, "per-method comparison tables across models")
    sp.add_argument("--model", action="append", required=True, help="name=predictions.tsv")
    sp.add_argument("--ref", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--threshold", type=float, default=25)
    sp.add_argument("--data", help="encoded data directory (for provenance)")
    sp.add_argument("--split", choices=SPLITS, default="test")
    sp.add_argument("--baseline")
    sp.add_argument("--candidate")

    sp = add("attention", cmd_attention, "export the file-context attention heatmap of one method")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", choices=SPLITS, default="test")
    sp.add_argument("--method-id", required=True)
    sp.add_argument("--step", type=int, help="decode step (default: the one predicting the last word)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--pgm", action="store_true")

    sp = add("ablate", cmd_ablate, "replace code/text sequences of an encoded dataset with PAD")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)

    add("gradcheck", cmd_gradcheck, "double-precision finite-difference gradient suite")
    return p


def main(argv=None) -> int:
    level = os.environ.get("FCSUM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (corpus.DatasetError, model.CheckpointError, training.MalformedRecordError,
            inference.VocabMismatchError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
