"""Relevance datasets: cleaning, category paths, JSONL I/O and synthetic corpora.

Records are stored one JSON object per line. Field names are configurable
through :class:`FieldMap`; on save every record is written in a fixed key
order with its cleaned query/target appended, so ``save(load(f))`` is the
canonical form of ``f`` and is byte-stable under repeated round trips.
"""

from __future__ import annotations

import enum
import json
import random
import string
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Iterator

from .errors import DuplicateId, EmptyPath, EmptySegment, InvalidSpec, ParseError

DEFAULT_DELIMITER = ">"
UNKNOWN_LANGUAGE = "und"


class TaskKind(str, enum.Enum):
    QC = "qc"
    QI = "qi"

    @classmethod
    def parse(cls, value: "str | TaskKind") -> "TaskKind":
        if isinstance(value, TaskKind):
            return value
        try:
            return cls(value.lower())
        except ValueError:
            raise ValueError(f"unknown task {value!r}; expected 'qc' or 'qi'") from None


# ---------------------------------------------------------------------------
# cleaning

def _simple_lower(s: str) -> str:
    if s.isascii():
        return s.lower()
    # per-character mapping: no final-sigma context and no multi-char expansions
    out = []
    for ch in s:
        low = ch.lower()
        out.append(low if len(low) == 1 else low[0])
    return "".join(out)


def clean_text(s: str) -> str | None:
    """Strip, collapse whitespace runs to one space, lowercase.

    Lowercasing is the locale-independent simple case mapping, so Turkish
    dotted capital I becomes a plain ``i``. Returns None when nothing is left.
    """
    collapsed = " ".join(s.split())
    if not collapsed:
        return None
    return _simple_lower(collapsed)


# ---------------------------------------------------------------------------
# category paths

@dataclass(frozen=True)
class CategoryPath:
    segments: tuple[str, ...]

    def __post_init__(self):
        if not self.segments:
            raise EmptyPath("category path has no segments")
        for seg in self.segments:
            if not seg or not seg.strip():
                raise EmptySegment(f"empty segment in {self.segments!r}")

    def __len__(self) -> int:
        return len(self.segments)

    def prefix(self, n: int) -> "CategoryPath":
        return CategoryPath(self.segments[:n])

    def render(self, delimiter: str = DEFAULT_DELIMITER) -> str:
        return f" {delimiter.strip()} ".join(self.segments)


def parse_category_path(s: str, delimiter: str = DEFAULT_DELIMITER) -> CategoryPath:
    delim = delimiter.strip()
    if not delim:
        raise ValueError("delimiter must contain a non-whitespace character")
    cleaned = clean_text(s)
    if cleaned is None:
        raise EmptyPath(f"category path {s!r} is empty")
    segments = []
    for part in cleaned.split(_simple_lower(delim)):
        part = part.strip()
        if not part:
            raise EmptySegment(f"category path {s!r} has an empty segment")
        segments.append(part)
    return CategoryPath(tuple(segments))


def render_category_path(path: CategoryPath, delimiter: str = DEFAULT_DELIMITER) -> str:
    return path.render(delimiter)


# ---------------------------------------------------------------------------
# records and datasets

@dataclass(frozen=True)
class Record:
    """A labeled (or unlabeled test) example after cleaning.

    The raw ``query`` and ``target`` are kept for audit; every downstream
    stage reads the cleaned fields.
    """

    id: str
    task: TaskKind
    query: str
    target: str
    language: str
    label: int | None
    cleaned_query: str
    cleaned_target: str


def make_record(
    id: str,
    task: TaskKind,
    query: str,
    target: str,
    language: str | None = None,
    label: int | None = None,
) -> Record | None:
    """Clean a raw example; returns None when the query or target is empty."""
    cq = clean_text(query)
    ct = clean_text(target)
    if cq is None or ct is None:
        return None
    if label is not None and label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    lang = (language or "").strip() or UNKNOWN_LANGUAGE
    return Record(id, TaskKind.parse(task), query, target, lang, label, cq, ct)


@dataclass(frozen=True)
class Dataset:
    task: TaskKind
    records: tuple[Record, ...]
    dropped: int = 0

    def __post_init__(self):
        for rec in self.records:
            if rec.task is not self.task:
                raise ValueError(f"record {rec.id!r} has task {rec.task.value}, dataset is {self.task.value}")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[Record]:
        return iter(self.records)

    @property
    def languages(self) -> frozenset[str]:
        return frozenset(r.language for r in self.records)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def by_id(self) -> dict[str, Record]:
        return {r.id: r for r in self.records}

    def subset(self, ids: Iterable[str]) -> "Dataset":
        """Records whose id is in ``ids``, in dataset order."""
        keep = set(ids)
        return Dataset(self.task, tuple(r for r in self.records if r.id in keep))


@dataclass(frozen=True)
class FieldMap:
    """Names of the JSON keys holding each record field."""

    id: str = "id"
    query: str = "query"
    target: str = "target"
    language: str = "language"
    label: str = "label"

    @classmethod
    def from_config(cls, config: dict[str, str]) -> "FieldMap":
        kwargs = {}
        for f in fields(cls):
            key = f"field.{f.name}"
            if key in config:
                kwargs[f.name] = config[key]
        return cls(**kwargs)


def _record_from_obj(obj: object, task: TaskKind, schema: FieldMap, line: int) -> Record | None:
    if not isinstance(obj, dict):
        raise ParseError("expected a JSON object", line)
    rid = obj.get(schema.id)
    if isinstance(rid, bool) or not isinstance(rid, (str, int)):
        raise ParseError(f"missing or invalid {schema.id!r}", line)
    rid = str(rid)
    query = obj.get(schema.query)
    target = obj.get(schema.target)
    if not isinstance(query, str):
        raise ParseError(f"record {rid!r}: missing or non-string {schema.query!r}", line)
    if not isinstance(target, str):
        raise ParseError(f"record {rid!r}: missing or non-string {schema.target!r}", line)
    language = obj.get(schema.language)
    if language is not None and not isinstance(language, str):
        raise ParseError(f"record {rid!r}: non-string {schema.language!r}", line)
    label = obj.get(schema.label)
    if label is not None and (isinstance(label, bool) or label not in (0, 1)):
        raise ParseError(f"record {rid!r}: label must be 0, 1 or absent, got {label!r}", line)
    return make_record(rid, task, query, target, language, label)


def iter_jsonl(path: str | Path) -> Iterator[tuple[int, object]]:
    """Yield ``(line_number, parsed_object)``; blank lines are skipped.

    Lines must be UTF-8; anything else raises ParseError rather than being
    transcoded.
    """
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, 1):
            try:
                text = raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise ParseError(f"invalid UTF-8 ({exc.reason})", lineno) from None
            if not text.strip():
                continue
            try:
                yield lineno, json.loads(text)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON: {exc.msg}", lineno) from None


def parse_records(
    lines: Iterable[tuple[int, object]], task: TaskKind | str, schema: FieldMap = FieldMap()
) -> Dataset:
    task = TaskKind.parse(task)
    records: list[Record] = []
    seen: set[str] = set()
    dropped = 0
    for lineno, obj in lines:
        rec = _record_from_obj(obj, task, schema, lineno)
        if rec is None:
            dropped += 1
            continue
        if rec.id in seen:
            raise DuplicateId(rec.id)
        seen.add(rec.id)
        records.append(rec)
    return Dataset(task, tuple(records), dropped)


def load_dataset(path: str | Path, task: TaskKind | str, schema: FieldMap = FieldMap()) -> Dataset:
    """Load and clean a JSONL relevance file.

    Records whose query (or target) cleans to nothing are dropped; the
    count is kept in ``Dataset.dropped``.
    """
    return parse_records(iter_jsonl(path), task, schema)


def record_to_obj(rec: Record, schema: FieldMap = FieldMap()) -> dict:
    return {
        schema.id: rec.id,
        schema.query: rec.query,
        schema.target: rec.target,
        schema.language: rec.language,
        schema.label: rec.label,
        "cleaned_query": rec.cleaned_query,
        "cleaned_target": rec.cleaned_target,
    }


def dumps_line(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":")) + "\n"


def dumps_dataset(ds: Dataset, schema: FieldMap = FieldMap()) -> str:
    return "".join(dumps_line(record_to_obj(r, schema)) for r in ds.records)


def save_dataset(ds: Dataset, path: str | Path, schema: FieldMap = FieldMap()) -> None:
    Path(path).write_text(dumps_dataset(ds, schema), encoding="utf-8", newline="")


# ---------------------------------------------------------------------------
# synthetic corpora

# irrelevant QI targets draw up to 9 distinct filler tokens from half the vocabulary
MIN_VOCAB = 24
LANGUAGE_CODES = ("en", "es", "tr", "vi", "fr", "de", "pt", "ja", "ko", "it", "ar", "th")


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a planted-signal corpus pair.

    Each task draws from its own vocabulary of ``vocab_size`` tokens, half
    "content" tokens and half "filler" tokens. Queries are made of content
    tokens. A relevant target repeats one or two of its query's tokens and
    is padded mostly with other content tokens; an irrelevant target is
    filler only (plus a category root for QC). So a record is relevant iff
    its target shares a token with its query, and the same decision is a
    sum of per-token effects a linear model can learn. ``overlap`` is the
    fraction of the target vocabulary (content and filler alike) taken
    verbatim from the auxiliary vocabulary.
    """

    vocab_size: int = 400
    n_languages: int = 3
    n_category_roots: int = 8
    records_per_task: int = 5000
    overlap: float = 1.0
    label_noise: float = 0.0
    positive_rate: float = 0.4
    records_per_query: float = 4.0

    def validate(self) -> None:
        if self.vocab_size < MIN_VOCAB:
            raise InvalidSpec(f"vocab_size must be >= {MIN_VOCAB}")
        if not 1 <= self.n_languages <= len(LANGUAGE_CODES):
            raise InvalidSpec(f"n_languages must be in [1, {len(LANGUAGE_CODES)}]")
        if self.n_category_roots < 1:
            raise InvalidSpec("n_category_roots must be >= 1")
        if self.records_per_task < 1:
            raise InvalidSpec("records_per_task must be >= 1")
        if not 0.0 <= self.overlap <= 1.0:
            raise InvalidSpec("overlap must be in [0, 1]")
        if not 0.0 <= self.label_noise <= 0.5:
            raise InvalidSpec("label_noise must be in [0, 0.5]")
        if not 0.0 < self.positive_rate < 1.0:
            raise InvalidSpec("positive_rate must be in (0, 1)")
        if self.records_per_query < 1.0:
            raise InvalidSpec("records_per_query must be >= 1")


@dataclass
class _Vocab:
    content: list[str]
    filler: list[str]


class _TokenSource:
    def __init__(self, rng: random.Random):
        self.rng = rng
        self.used: set[str] = set()

    def fresh(self, n: int) -> list[str]:
        out = []
        while len(out) < n:
            tok = "".join(self.rng.choices(string.ascii_lowercase, k=self.rng.randint(5, 8)))
            if tok not in self.used:
                self.used.add(tok)
                out.append(tok)
        return out


def _noisy_case(rng: random.Random, tokens: list[str], sep: str = " ") -> str:
    parts = []
    for tok in tokens:
        r = rng.random()
        if r < 0.15:
            tok = tok.upper()
        elif r < 0.35:
            tok = tok.capitalize()
        parts.append(tok)
    messy_sep = " \t " if sep == " " else f"  {sep.strip()}  "
    text = parts[0]
    for tok in parts[1:]:
        text += (sep if rng.random() < 0.8 else messy_sep) + tok
    if rng.random() < 0.2:
        text = " " + text + "  "
    return text


def _relevant_tokens(rng: random.Random, q_toks: list[str], others: list[str], vocab: _Vocab, length: int,
                     max_filler: int) -> list[str]:
    """``length`` target tokens: 1-2 query tokens, ``others`` (content tokens not in the query), at most
    ``max_filler`` filler."""
    k = min(rng.choice((1, 2)), length, len(q_toks))
    n_filler = min(rng.randint(0, max_filler), length - k)
    toks = rng.sample(q_toks, k) + rng.sample(others, length - k - n_filler) + rng.sample(vocab.filler, n_filler)
    rng.shuffle(toks)
    return toks


def _gen_task(
    task: TaskKind, vocab: _Vocab, roots: list[str], spec: SynthSpec, rng: random.Random
) -> Dataset:
    langs = LANGUAGE_CODES[: spec.n_languages]
    n_queries = max(1, round(spec.records_per_task / spec.records_per_query))
    queries = []
    for _ in range(n_queries):
        toks = rng.sample(vocab.content, rng.choice((2, 3)))
        others = [t for t in vocab.content if t not in toks]
        queries.append((toks, others, rng.choice(langs)))

    records = []
    for i in range(spec.records_per_task):
        q_toks, others, lang = queries[rng.randrange(n_queries)]
        relevant = rng.random() < spec.positive_rate
        if task is TaskKind.QC:
            depth = rng.choice((2, 3, 4))
            if relevant:
                tail = _relevant_tokens(rng, q_toks, others, vocab, depth - 1, max_filler=1 if depth > 2 else 0)
            else:
                tail = rng.sample(vocab.filler, depth - 1)
            segments = [rng.choice(roots)] + tail
            target = _noisy_case(rng, segments, sep=" > " if rng.random() < 0.7 else ">")
        else:
            length = rng.randint(5, 9)
            if relevant:
                body = _relevant_tokens(rng, q_toks, others, vocab, length, max_filler=2)
            else:
                body = rng.sample(vocab.filler, length)
            target = _noisy_case(rng, body)
        label = int(relevant)
        if spec.label_noise and rng.random() < spec.label_noise:
            label = 1 - label
        rec = make_record(f"{task.value}-{i:06d}", task, _noisy_case(rng, q_toks), target, lang, label)
        assert rec is not None
        records.append(rec)
    return Dataset(task, tuple(records))


def gen_synthetic(spec: SynthSpec = SynthSpec(), seed: int = 0) -> tuple[Dataset, Dataset]:
    """Generate ``(aux QC dataset, target QI dataset)`` deterministically from ``seed``."""
    spec.validate()
    rng = random.Random(seed)
    tokens = _TokenSource(rng)
    n_content = spec.vocab_size // 2
    n_filler = spec.vocab_size - n_content

    aux_vocab = _Vocab(tokens.fresh(n_content), tokens.fresh(n_filler))
    roots = tokens.fresh(spec.n_category_roots)
    shared_c = round(spec.overlap * n_content)
    shared_f = round(spec.overlap * n_filler)
    target_vocab = _Vocab(
        aux_vocab.content[:shared_c] + tokens.fresh(n_content - shared_c),
        aux_vocab.filler[:shared_f] + tokens.fresh(n_filler - shared_f),
    )
    aux = _gen_task(TaskKind.QC, aux_vocab, roots, spec, rng)
    target = _gen_task(TaskKind.QI, target_vocab, roots, spec, rng)
    return aux, target
