"""Corpus preparation: tokenization, SBT flattening, vocabularies and encoding."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, START, END = "<pad>", "<unk>", "<st>", "<et>"
PAD_ID, UNK_ID, START_ID, END_ID = 0, 1, 2, 3
CODE_RESERVED = (PAD, UNK)
SUMMARY_RESERVED = (PAD, UNK, START, END)


class DatasetError(ValueError):
    """A dataset or encoded-record file is malformed."""


class TreeParseError(ValueError):
    """A serialized AST could not be parsed."""


@dataclass(frozen=True)
class HyperParams:
    n: int = 20
    m: int = 25
    tdatlen: int = 50
    astlen: int = 100
    comlen: int = 13
    code_vocab: int = 75000
    summary_vocab: int = 10908
    ast_vocab: int = 100
    embed_code: int = 100
    embed_ast: int = 10
    rnn_units: int = 256
    squash_units: int = 256
    epochs: int = 10

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"hyperparameter {f.name} must be positive")
        if self.comlen < 4:
            raise ValueError("comlen must be at least 4")

    @classmethod
    def desk(cls, **overrides) -> "HyperParams":
        """Scaled-down preset that trains in seconds on one CPU core."""
        base = dict(n=6, m=10, tdatlen=20, astlen=30, comlen=8, code_vocab=512,
                    summary_vocab=512, ast_vocab=128, embed_code=16, embed_ast=16,
                    rnn_units=32, squash_units=32)
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> "HyperParams":
        return replace(self, **changes)

    def to_dict(self) -> dict[str, int]:
        return asdict(self)


# ---------------------------------------------------------------------------
# tokenization

# digits stay attached to the letters before them ("mp3"); a letter after a
# digit starts a new token
_SUBTOKEN = re.compile(r"[A-Z]+(?![a-z])\d*|[A-Z]?[a-z]+\d*|\d+")
_WORD = re.compile(r"[A-Za-z0-9]+")


def tokenize_code(source: str) -> list[str]:
    """Split identifiers on camelCase, snake_case and digit boundaries, lowercased.

    >>> tokenize_code("convertMp3ToWav")
    ['convert', 'mp3', 'to', 'wav']
    """
    out = []
    for word in _WORD.findall(source):
        out.extend(t.lower() for t in _SUBTOKEN.findall(word))
    return out


tokenize_summary = tokenize_code


# ---------------------------------------------------------------------------
# SBT

def _node_label(node: dict) -> str:
    label = str(node["label"]).lower()
    value = node.get("value")
    if value is not None and not node.get("children"):
        label = f"{label}_{str(value).lower()}"
    return label


def parse_tree(ast) -> dict:
    """Validate a serialized tree (JSON text or nested dicts).

    Errors carry a position: a character offset for bad JSON, a node path
    such as ``root.children[1]`` for structural problems.
    """
    if isinstance(ast, (str, bytes)):
        try:
            ast = json.loads(ast)
        except json.JSONDecodeError as exc:
            raise TreeParseError(f"invalid tree JSON at char {exc.pos}: {exc.msg}") from None
    stack = [(ast, "root")]
    while stack:
        node, path = stack.pop()
        if not isinstance(node, dict):
            raise TreeParseError(f"{path}: expected an object, got {type(node).__name__}")
        if not isinstance(node.get("label"), str) or not node["label"]:
            raise TreeParseError(f"{path}: missing or empty 'label'")
        children = node.get("children", [])
        if not isinstance(children, list):
            raise TreeParseError(f"{path}: 'children' must be a list")
        for i, child in enumerate(children):
            stack.append((child, f"{path}.children[{i}]"))
    return ast


def sbt_flatten(ast) -> list[str]:
    """Structure-based traversal: ``( label ... ) label`` around every subtree."""
    root = parse_tree(ast)
    out: list[str] = []
    # explicit stack so deep trees do not hit the recursion limit
    stack: list[tuple[dict, bool]] = [(root, False)]
    while stack:
        node, leaving = stack.pop()
        label = _node_label(node)
        if leaving:
            out += [")", label]
            continue
        out += ["(", label]
        stack.append((node, True))
        for child in reversed(node.get("children", [])):
            stack.append((child, False))
    return out


# ---------------------------------------------------------------------------
# vocabulary

class Vocab:
    """Bidirectional token/id map; reserved tokens occupy the lowest ids."""

    def __init__(self, itos: Sequence[str]):
        self.itos = list(itos)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").split("\n")[:-1])


def build_vocab(streams: Iterable[Iterable[str]], cap: int, reserved: Sequence[str]) -> Vocab:
    """Most frequent tokens after ``reserved``; ties go to the lexicographically smaller token."""
    if cap <= len(reserved):
        raise ValueError(f"cap {cap} leaves no room after {len(reserved)} reserved tokens")
    counts: Counter[str] = Counter()
    for stream in streams:
        counts.update(stream)
    reserved_set = set(reserved)
    ranked = sorted((t for t in counts if t not in reserved_set), key=lambda t: (-counts[t], t))
    return Vocab(list(reserved) + ranked[: cap - len(reserved)])


def encode_sequence(tokens: Sequence[str], vocab: Vocab, length: int) -> list[int]:
    ids = [vocab.id(t) for t in tokens[:length]]
    return ids + [PAD_ID] * (length - len(ids))


def encode_summary(words: Sequence[str], vocab: Vocab, comlen: int) -> list[int]:
    """``<st> w1 .. wk <et>`` PAD-completed; words beyond ``comlen - 2`` are dropped."""
    body = [vocab.id(w) for w in words[: comlen - 2]]
    ids = [START_ID] + body + [END_ID]
    return ids + [PAD_ID] * (comlen - len(ids))


# ---------------------------------------------------------------------------
# records

@dataclass
class RawMethod:
    id: str
    file_id: str
    source: str
    ast: dict | None = None
    summary: str | None = None


@dataclass
class MethodRecord:
    id: str
    file_id: str
    code_ids: np.ndarray
    sbt_ids: np.ndarray
    summary_ids: np.ndarray
    fc: np.ndarray
    # raw word sets, kept for provenance analysis
    code_words: list[str] = field(default_factory=list)
    context_words: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "id": self.id, "file_id": self.file_id,
            "code_ids": self.code_ids.tolist(), "sbt_ids": self.sbt_ids.tolist(),
            "summary_ids": self.summary_ids.tolist(), "fc": self.fc.tolist(),
            "code_words": self.code_words, "context_words": self.context_words,
        })

    @classmethod
    def from_json(cls, line: str) -> "MethodRecord":
        d = json.loads(line)
        return cls(
            id=d["id"], file_id=d["file_id"],
            code_ids=np.asarray(d["code_ids"], dtype=np.int64),
            sbt_ids=np.asarray(d["sbt_ids"], dtype=np.int64),
            summary_ids=np.asarray(d["summary_ids"], dtype=np.int64),
            fc=np.asarray(d["fc"], dtype=np.int64).reshape(len(d["fc"]), -1),
            code_words=d.get("code_words", []), context_words=d.get("context_words", []),
        )


def context_methods(file_methods: Sequence[RawMethod], target: str, n: int) -> list[RawMethod]:
    """The first ``n`` methods of the file other than ``target`` (matched by id)."""
    if not any(m.id == target for m in file_methods):
        raise KeyError(f"method {target!r} not found in its file")
    return [m for m in file_methods if m.id != target][:n]


def build_file_context(file_methods: Sequence[RawMethod], target: str, hp: HyperParams,
                       vocab: Vocab) -> np.ndarray:
    """n x m id matrix of the other methods' code tokens; unused rows stay PAD.

    Only ``source`` feeds the context, never a method's summary.
    """
    fc = np.zeros((hp.n, hp.m), dtype=np.int64)
    for row, other in enumerate(context_methods(file_methods, target, hp.n)):
        fc[row] = encode_sequence(tokenize_code(other.source), vocab, hp.m)
    return fc


def group_by_file(methods: Iterable[RawMethod]) -> dict[str, list[RawMethod]]:
    files: dict[str, list[RawMethod]] = {}
    for m in methods:
        files.setdefault(m.file_id, []).append(m)
    return files


@dataclass
class Vocabs:
    code: Vocab
    summary: Vocab
    ast: Vocab

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.code.save(d / "code.vocab")
        self.summary.save(d / "summary.vocab")
        self.ast.save(d / "ast.vocab")

    @classmethod
    def load(cls, directory) -> "Vocabs":
        d = Path(directory)
        return cls(Vocab.load(d / "code.vocab"), Vocab.load(d / "summary.vocab"),
                   Vocab.load(d / "ast.vocab"))


def _targets(methods: Iterable[RawMethod]) -> list[RawMethod]:
    return [m for m in methods if m.summary]


def build_vocabs(methods: Sequence[RawMethod], hp: HyperParams, with_context: bool = True) -> Vocabs:
    """Fit all three vocabularies on ``methods`` (normally the training split).

    The code vocabulary counts each summarised method's code tokens together
    with the tokens of its file-context rows, so context words compete for
    the same capped space.
    """
    files = group_by_file(methods)
    code_streams: list[list[str]] = []
    for m in _targets(methods):
        code_streams.append(tokenize_code(m.source))
        if with_context:
            for other in context_methods(files[m.file_id], m.id, hp.n):
                code_streams.append(tokenize_code(other.source)[: hp.m])
    summaries = [tokenize_summary(m.summary) for m in _targets(methods)]
    asts = [sbt_flatten(m.ast) for m in _targets(methods) if m.ast is not None]
    return Vocabs(
        code=build_vocab(code_streams, hp.code_vocab, CODE_RESERVED),
        summary=build_vocab(summaries, hp.summary_vocab, SUMMARY_RESERVED),
        ast=build_vocab(asts, hp.ast_vocab, CODE_RESERVED),
    )


def encode_methods(methods: Sequence[RawMethod], vocabs: Vocabs, hp: HyperParams) -> list[MethodRecord]:
    """Encode every summarised method; unsummarised ones only serve as context."""
    files = group_by_file(methods)
    records = []
    for m in _targets(methods):
        code_tokens = tokenize_code(m.source)
        ctx = context_methods(files[m.file_id], m.id, hp.n)
        ctx_words = sorted({t for o in ctx for t in tokenize_code(o.source)})
        sbt = sbt_flatten(m.ast) if m.ast is not None else []
        records.append(MethodRecord(
            id=m.id, file_id=m.file_id,
            code_ids=np.asarray(encode_sequence(code_tokens, vocabs.code, hp.tdatlen), dtype=np.int64),
            sbt_ids=np.asarray(encode_sequence(sbt, vocabs.ast, hp.astlen), dtype=np.int64),
            summary_ids=np.asarray(encode_summary(tokenize_summary(m.summary), vocabs.summary,
                                                  hp.comlen), dtype=np.int64),
            fc=build_file_context(files[m.file_id], m.id, hp, vocabs.code),
            code_words=sorted(set(code_tokens)), context_words=ctx_words,
        ))
    return records


def summary_words(record: MethodRecord, vocab: Vocab) -> list[str]:
    """Reference words of an encoded record, without markers or padding."""
    words = []
    for i in record.summary_ids[1:]:
        if i in (END_ID, PAD_ID):
            break
        words.append(vocab.token(int(i)))
    return words


# ---------------------------------------------------------------------------
# dataset files

def load_dataset(path) -> list[RawMethod]:
    methods = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(d, dict):
                raise DatasetError(f"{path}:{lineno}: expected a JSON object")
            for key in ("id", "file_id", "source"):
                if not isinstance(d.get(key), str):
                    raise DatasetError(f"{path}:{lineno}: missing or non-string field {key!r}")
            if d["id"] in seen:
                raise DatasetError(f"{path}:{lineno}: duplicate method id {d['id']!r}")
            seen.add(d["id"])
            ast = d.get("ast")
            if ast is not None:
                try:
                    parse_tree(ast)
                except TreeParseError as exc:
                    raise DatasetError(f"{path}:{lineno}: bad ast: {exc}") from None
            summary = d.get("summary")
            if summary is not None and len(tokenize_summary(summary)) < 3:
                raise DatasetError(f"{path}:{lineno}: summary shorter than three words")
            methods.append(RawMethod(d["id"], d["file_id"], d["source"], ast, summary))
    return methods


def save_dataset(methods: Iterable[RawMethod], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for m in methods:
            d = {"id": m.id, "file_id": m.file_id, "source": m.source}
            if m.ast is not None:
                d["ast"] = m.ast
            if m.summary is not None:
                d["summary"] = m.summary
            fh.write(json.dumps(d) + "\n")


def save_records(records: Iterable[MethodRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def load_records(path) -> list[MethodRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(MethodRecord.from_json(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: bad encoded record ({exc})") from None
    return out


def split_dataset(methods: Sequence[RawMethod], ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Seeded train/val/test split that keeps every file in one partition."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three nonnegative numbers summing to 1, got {ratios}")
    file_ids = sorted({m.file_id for m in methods})
    order = np.random.Generator(np.random.PCG64(seed)).permutation(len(file_ids))
    n_train = int(round(ratios[0] * len(file_ids)))
    n_val = int(round((ratios[0] + ratios[1]) * len(file_ids))) - n_train
    part = {}
    for rank, idx in enumerate(order):
        part[file_ids[idx]] = 0 if rank < n_train else 1 if rank < n_train + n_val else 2
    splits: tuple[list, list, list] = ([], [], [])
    for m in methods:
        splits[part[m.file_id]].append(m)
    return splits
