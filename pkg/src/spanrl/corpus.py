"""Synthetic annotated-document corpora: generation, persistence, subsampling.

A corpus directory holds one ``metadata.json`` (schema + provenance) and one
line-delimited JSON file per split (``train.jsonl``, ``dev.jsonl``,
``test.jsonl``). Each line is one self-contained document record:

    {"id": ..., "tokens": [{"text":..., "bbox":[x0,y0,x1,y1], "tag":...}, ...],
     "annotations": {"<field>": {"start":..., "end":..., "text":...}, ...}}

All files are UTF-8; JSON is written canonically (sorted keys, compact
separators) so identical corpora are byte-identical on disk.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

OTHER_TAG = "other"

SPLITS = ("train", "dev", "test")

# Receipt-flavored field names; schemas beyond the pool fall back to field_NN.
FIELD_NAME_POOL = [
    "company", "date", "address", "total", "tax", "phone", "email",
    "subtotal", "payment", "cashier", "receipt_id", "store_id",
    "item_name", "item_qty", "item_price", "discount", "service",
    "currency", "time", "table_no", "order_id", "customer", "website",
    "vat_id", "change_due", "card_no", "terminal", "clerk", "branch",
    "country",
]


class CorpusError(Exception):
    """Base class for corpus problems."""


class ParseError(CorpusError):
    """The on-disk data is not structurally readable."""


class InvariantViolation(CorpusError):
    """The data parsed but violates a documented invariant."""


@dataclass(frozen=True)
class Token:
    text: str
    bbox: tuple[int, int, int, int]
    tag: str


@dataclass(frozen=True)
class FieldSchema:
    fields: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.fields)) != len(self.fields):
            raise InvariantViolation("schema field names must be unique")
        if OTHER_TAG in self.fields:
            raise InvariantViolation(f"{OTHER_TAG!r} is reserved and cannot be a field")

    def __contains__(self, name: str) -> bool:
        return name in self.fields


@dataclass(frozen=True)
class AnswerAnnotation:
    field: str
    start: int
    end: int
    text: str


@dataclass(frozen=True)
class Document:
    id: str
    tokens: tuple[Token, ...]
    annotations: dict[str, AnswerAnnotation]

    def __len__(self) -> int:
        return len(self.tokens)

    def text_slice(self, start: int, end: int) -> str:
        """Space-joined texts of tokens[start..end] (inclusive)."""
        return " ".join(t.text for t in self.tokens[start : end + 1])

    @cached_property
    def fingerprint(self) -> int:
        """Content hash of id + token stream; used as a feature-cache key."""
        return hash((self.id, self.tokens))


@dataclass
class Corpus:
    schema: FieldSchema
    train: list[Document]
    dev: list[Document]
    test: list[Document]
    provenance: dict = field(default_factory=dict)

    def split(self, name: str) -> list[Document]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


@dataclass(frozen=True)
class GeneratorConfig:
    n_fields: int = 4
    n_train: int = 100
    n_dev: int = 0
    n_test: int = 50
    tokens_per_doc: tuple[int, int] = (30, 60)
    seed: int = 0

    def digest(self) -> str:
        payload = json.dumps(
            {
                "n_fields": self.n_fields,
                "n_train": self.n_train,
                "n_dev": self.n_dev,
                "n_test": self.n_test,
                "tokens_per_doc": list(self.tokens_per_doc),
                "seed": self.seed,
            },
            sort_keys=True,
            separators=(",", ":"),
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def validate_document(doc: Document, schema: FieldSchema) -> None:
    """Raise InvariantViolation naming the document on the first violation."""
    if not doc.tokens:
        raise InvariantViolation(f"document {doc.id}: no tokens")
    for i, tok in enumerate(doc.tokens):
        x0, y0, x1, y1 = tok.bbox
        if not (0 <= x0 <= x1 <= 1000 and 0 <= y0 <= y1 <= 1000):
            raise InvariantViolation(f"document {doc.id}: token {i} bbox {tok.bbox} out of range")
        if not tok.text:
            raise InvariantViolation(f"document {doc.id}: token {i} has empty text")
        if tok.tag != OTHER_TAG and tok.tag not in schema:
            raise InvariantViolation(f"document {doc.id}: token {i} tag {tok.tag!r} not in schema")
    covered: set[int] = set()
    for fname, ann in doc.annotations.items():
        if fname not in schema:
            raise InvariantViolation(f"document {doc.id}: annotation field {fname!r} not in schema")
        if ann.field != fname:
            raise InvariantViolation(f"document {doc.id}: annotation key {fname!r} != field {ann.field!r}")
        if not (0 <= ann.start <= ann.end < len(doc.tokens)):
            raise InvariantViolation(
                f"document {doc.id}: annotation {fname!r} span ({ann.start},{ann.end}) "
                f"out of bounds for {len(doc.tokens)} tokens"
            )
        span = range(ann.start, ann.end + 1)
        if covered.intersection(span):
            raise InvariantViolation(f"document {doc.id}: annotation {fname!r} overlaps another span")
        covered.update(span)
        expected = doc.text_slice(ann.start, ann.end)
        if ann.text != expected:
            raise InvariantViolation(
                f"document {doc.id}: annotation {fname!r} text {ann.text!r} != tokens {expected!r}"
            )
        for i in span:
            if doc.tokens[i].tag != fname:
                raise InvariantViolation(
                    f"document {doc.id}: token {i} inside {fname!r} span has tag {doc.tokens[i].tag!r}"
                )


def validate_corpus(corpus: Corpus) -> None:
    seen: set[str] = set()
    for split_name in SPLITS:
        for doc in corpus.split(split_name):
            if doc.id in seen:
                raise InvariantViolation(f"document id {doc.id!r} appears in more than one place")
            seen.add(doc.id)
            validate_document(doc, corpus.schema)


def default_field_names(n_fields: int) -> tuple[str, ...]:
    names = list(FIELD_NAME_POOL[:n_fields])
    for i in range(len(names), n_fields):
        names.append(f"field_{i:02d}")
    return tuple(names)


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

_SYLLABLES = [
    "ka", "to", "mi", "ren", "lo", "ba", "si", "du", "ve", "na",
    "pol", "gar", "tex", "mon", "ril", "fos", "han", "zu", "per", "cal",
]

# Value flavor per field, cycled by field index. Several fields share the
# "amount" flavor on wider schemas, which keeps them genuinely confusable.
_FIELD_KINDS = ["word", "date", "word", "amount", "amount", "code"]

_DISTRACTOR_KEYWORDS = ["ref", "note", "memo", "code", "desc", "info"]


def _word(rng: np.random.Generator, capital: bool = False) -> str:
    n = int(rng.integers(2, 5))
    w = "".join(_SYLLABLES[int(rng.integers(0, len(_SYLLABLES)))] for _ in range(n))
    return w.capitalize() if capital else w


def _value_tokens(kind: str, rng: np.random.Generator) -> list[str]:
    if kind == "amount":
        return [f"{int(rng.integers(0, 900))}.{int(rng.integers(0, 100)):02d}"]
    if kind == "date":
        y = 2015 + int(rng.integers(0, 10))
        m = 1 + int(rng.integers(0, 12))
        d = 1 + int(rng.integers(0, 28))
        return [f"{y:04d}-{m:02d}-{d:02d}"]
    if kind == "code":
        return [f"{_word(rng).upper()[:3]}-{int(rng.integers(1000, 10000))}"]
    # "word": one to three word tokens
    return [_word(rng, capital=True) for _ in range(int(rng.integers(1, 4)))]


@dataclass
class _Line:
    y: int
    x: int
    texts: list[str]
    tags: list[str]
    field: str | None  # field whose answer lives on this line, if any


def _token_width(text: str) -> int:
    return min(12 * len(text) + 8, 240)


def _line_tokens(line: _Line) -> list[Token]:
    toks = []
    x = line.x
    for text, tag in zip(line.texts, line.tags):
        w = _token_width(text)
        x1 = min(x + w, 1000)
        x0 = min(x, x1)
        toks.append(Token(text=text, bbox=(x0, line.y, x1, min(line.y + 22, 1000)), tag=tag))
        x = x1 + 8
    return toks


def _generate_document(
    doc_id: str,
    schema: FieldSchema,
    tokens_per_doc: tuple[int, int],
    rng: np.random.Generator,
) -> Document:
    lo, hi = tokens_per_doc
    target = int(rng.integers(lo, hi + 1))

    # Bands: header / body / footer; fields are spread round-robin with
    # per-document vertical jitter so absolute position alone is not enough.
    bands = [(20, 200), (220, 760), (800, 980)]
    lines: list[_Line] = []
    used = 0
    for idx, fname in enumerate(schema.fields):
        kind = _FIELD_KINDS[idx % len(_FIELD_KINDS)]
        values = _value_tokens(kind, rng)
        band_lo, band_hi = bands[idx % len(bands)]
        slot = idx // len(bands)
        y = band_lo + slot * 40 + int(rng.integers(0, 36))
        y = min(y, band_hi)
        x = int(rng.integers(20, 400))
        keyword = fname.upper() + ":"
        lines.append(
            _Line(
                y=y,
                x=x,
                texts=[keyword] + values,
                tags=[OTHER_TAG] + [fname] * len(values),
                field=fname,
            )
        )
        used += 1 + len(values)

    # Distractor lines: some mimic a keyword+value shape, some are plain noise.
    while used < target:
        room = target - used
        band_lo, band_hi = bands[int(rng.integers(0, len(bands)))]
        y = int(rng.integers(band_lo, band_hi + 1))
        x = int(rng.integers(20, 700))
        if room >= 2 and rng.random() < 0.4:
            kw = _DISTRACTOR_KEYWORDS[int(rng.integers(0, len(_DISTRACTOR_KEYWORDS)))]
            kind = _FIELD_KINDS[int(rng.integers(0, len(_FIELD_KINDS)))]
            values = _value_tokens(kind, rng)[: room - 1]
            texts = [kw.upper() + ":"] + values
        else:
            texts = [_word(rng) for _ in range(min(room, int(rng.integers(1, 4))))]
        lines.append(_Line(y=y, x=x, texts=texts, tags=[OTHER_TAG] * len(texts), field=None))
        used += len(texts)

    lines.sort(key=lambda ln: (ln.y, ln.x))
    tokens: list[Token] = []
    annotations: dict[str, AnswerAnnotation] = {}
    for line in lines:
        base = len(tokens)
        tokens.extend(_line_tokens(line))
        if line.field is not None:
            start = base + 1  # skip the keyword token
            end = len(tokens) - 1
            annotations[line.field] = AnswerAnnotation(
                field=line.field,
                start=start,
                end=end,
                text=" ".join(line.texts[1:]),
            )
    return Document(id=doc_id, tokens=tuple(tokens), annotations=annotations)


def generate_synthetic_corpus(config: GeneratorConfig) -> Corpus:
    """Deterministically generate a corpus with one answer span per field."""
    if config.n_fields < 1:
        raise ValueError(f"n_fields must be >= 1, got {config.n_fields}")
    if min(config.n_train, config.n_dev, config.n_test) < 0:
        raise ValueError("split sizes must be >= 0")
    lo, hi = config.tokens_per_doc
    if not (1 <= lo <= hi):
        raise ValueError(f"bad tokens_per_doc range {config.tokens_per_doc}")
    # Every field consumes at least a keyword token plus one value token.
    if 2 * config.n_fields > lo:
        raise ValueError(
            f"{config.n_fields} fields need at least {2 * config.n_fields} tokens per "
            f"document but tokens_per_doc minimum is {lo}"
        )

    schema = FieldSchema(fields=default_field_names(config.n_fields))
    root = np.random.SeedSequence(config.seed)
    counts = {"train": config.n_train, "dev": config.n_dev, "test": config.n_test}
    total = sum(counts.values())
    children = root.spawn(total) if total else []
    splits: dict[str, list[Document]] = {name: [] for name in SPLITS}
    cursor = 0
    for split_name in SPLITS:
        for i in range(counts[split_name]):
            rng = np.random.Generator(np.random.PCG64(children[cursor]))
            cursor += 1
            doc = _generate_document(f"{split_name}-{i:04d}", schema, config.tokens_per_doc, rng)
            splits[split_name].append(doc)

    corpus = Corpus(
        schema=schema,
        train=splits["train"],
        dev=splits["dev"],
        test=splits["test"],
        provenance={"seed": config.seed, "config_digest": config.digest()},
    )
    validate_corpus(corpus)
    return corpus


def subset_fraction(corpus: Corpus, fraction: float, seed: int) -> Corpus:
    """Replace the train split by ceil(fraction * n) docs sampled without replacement."""
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if not corpus.train:
        raise ValueError("corpus has an empty train split")
    if fraction == 1.0:
        picked = list(corpus.train)
    else:
        n = math.ceil(fraction * len(corpus.train))
        rng = np.random.Generator(np.random.PCG64(seed))
        idx = sorted(rng.choice(len(corpus.train), size=n, replace=False).tolist())
        picked = [corpus.train[i] for i in idx]
    return Corpus(
        schema=corpus.schema,
        train=picked,
        dev=list(corpus.dev),
        test=list(corpus.test),
        provenance={**corpus.provenance, "subset_fraction": fraction, "subset_seed": seed},
    )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _doc_record(doc: Document) -> dict:
    return {
        "id": doc.id,
        "tokens": [{"text": t.text, "bbox": list(t.bbox), "tag": t.tag} for t in doc.tokens],
        "annotations": {
            f: {"start": a.start, "end": a.end, "text": a.text}
            for f, a in sorted(doc.annotations.items())
        },
    }


def save_corpus(corpus: Corpus, path: str | Path) -> Path:
    """Write the corpus directory; canonical JSON makes output byte-stable."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": 1,
        "schema": {"fields": list(corpus.schema.fields)},
        "provenance": corpus.provenance,
        "counts": {name: len(corpus.split(name)) for name in SPLITS},
    }
    (out / "metadata.json").write_text(_canonical(meta) + "\n", encoding="utf-8")
    for split_name in SPLITS:
        with open(out / f"{split_name}.jsonl", "w", encoding="utf-8") as f:
            for doc in corpus.split(split_name):
                f.write(_canonical(_doc_record(doc)) + "\n")
    return out


def _parse_document(record: dict, where: str) -> Document:
    try:
        tokens = tuple(
            Token(text=t["text"], bbox=tuple(int(v) for v in t["bbox"]), tag=t["tag"])
            for t in record["tokens"]
        )
        annotations = {
            fname: AnswerAnnotation(
                field=fname, start=int(a["start"]), end=int(a["end"]), text=a["text"]
            )
            for fname, a in record["annotations"].items()
        }
        return Document(id=record["id"], tokens=tokens, annotations=annotations)
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"{where}: malformed document record ({e})") from e


def load_corpus(path: str | Path) -> Corpus:
    """Load and fully validate a corpus directory.

    Raises ParseError for unreadable data and InvariantViolation (naming the
    offending document) when the data is readable but inconsistent.
    """
    root = Path(path)
    meta_path = root / "metadata.json"
    if not meta_path.exists():
        raise ParseError(f"{meta_path}: missing metadata file")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        schema = FieldSchema(fields=tuple(meta["schema"]["fields"]))
        provenance = meta.get("provenance", {})
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise ParseError(f"{meta_path}: malformed metadata ({e})") from e

    splits: dict[str, list[Document]] = {}
    for split_name in SPLITS:
        docs: list[Document] = []
        split_path = root / f"{split_name}.jsonl"
        if split_path.exists():
            with open(split_path, encoding="utf-8") as f:
                for lineno, line in enumerate(f, start=1):
                    if not line.strip():
                        continue
                    try:
                        record = json.loads(line)
                    except json.JSONDecodeError as e:
                        raise ParseError(f"{split_path}:{lineno}: invalid JSON ({e})") from e
                    docs.append(_parse_document(record, f"{split_path}:{lineno}"))
        splits[split_name] = docs

    corpus = Corpus(
        schema=schema,
        train=splits["train"],
        dev=splits["dev"],
        test=splits["test"],
        provenance=provenance,
    )
    validate_corpus(corpus)
    return corpus


def retag_tokens(doc: Document, span_start: int, span_end: int, tag: str) -> Document:
    """Copy of doc where tokens in [span_start, span_end] get ``tag``, others "other"."""
    tokens = tuple(
        replace(t, tag=tag if span_start <= i <= span_end else OTHER_TAG)
        for i, t in enumerate(doc.tokens)
    )
    return Document(id=doc.id, tokens=tokens, annotations={})
