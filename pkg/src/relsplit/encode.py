"""Translation-augmented input sequences and hashed character n-gram features.

A record becomes ``[CLS] q_orig - q_en [SEP] t [SEP]`` where ``q_en`` is the
query's English translation and ``t`` the target text. The sequence is then
mapped to a fixed-width, L2-normalized signed feature-hashing vector, which
is what the classifier consumes.
"""

from __future__ import annotations

import base64
import csv
import functools
import hashlib
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np
import scipy.sparse as sp

from .corpus import DEFAULT_DELIMITER, Dataset, Record, TaskKind, clean_text, dumps_line, iter_jsonl, parse_category_path
from .errors import (
    DataError,
    EmptyField,
    MarkerInText,
    MissingEntry,
    ParseError,
    ProviderError,
)

CLS = "[CLS]"
SEP = "[SEP]"
QUERY_SEPARATOR = " - "

# markers become single private-use code points before n-gram extraction
_CLS_SYM = "\ue000"
_SEP_SYM = "\ue001"
_RESERVED = (CLS, SEP, _CLS_SYM, _SEP_SYM)


# ---------------------------------------------------------------------------
# translation providers

class TranslationProvider(Protocol):
    name: str

    def translate(self, q: str, source_language: str) -> str: ...


class IdentityStub:
    name = "identity"

    def translate(self, q: str, source_language: str) -> str:
        return q


class TableStub:
    """Exact-match lookup in a ``(source_language, source_text, english_text)`` TSV.

    Source texts are cleaned on load so that lookups match the cleaned
    queries the pipeline passes in. ``fallback_identity`` returns the input
    for missing entries instead of raising :class:`MissingEntry`.
    """

    name = "table"

    def __init__(self, table: Mapping[tuple[str, str], str], fallback_identity: bool = False):
        self.table = {}
        for (lang, src), en in table.items():
            key = clean_text(src)
            if key is not None:
                self.table[(lang, key)] = en
        self.fallback_identity = fallback_identity
        self.lookups = 0

    @classmethod
    def from_file(cls, path: str | Path, fallback_identity: bool = False) -> "TableStub":
        return cls(read_translation_table(path), fallback_identity)

    def translate(self, q: str, source_language: str) -> str:
        self.lookups += 1
        key = clean_text(q) or q
        try:
            return self.table[(source_language, key)]
        except KeyError:
            if self.fallback_identity:
                return q
            raise MissingEntry(source_language, q) from None


class CacheWrapper:
    """Memoizes another provider, persisting results to an append-only TSV.

    Cache rows are ``(provider, source_language, source_text, english_text)``.
    Rows for other providers in the same file are kept but ignored.
    """

    def __init__(self, provider: TranslationProvider, cache_path: str | Path):
        self.provider = provider
        self.name = provider.name
        self.cache_path = Path(cache_path)
        self._lock = threading.Lock()
        self._cache: dict[tuple[str, str], str] = {}
        if self.cache_path.exists():
            for row in _read_tsv(self.cache_path, 4):
                if row[0] == self.name:
                    self._cache[(row[1], row[2])] = row[3]

    def translate(self, q: str, source_language: str) -> str:
        key = (source_language, q)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        with self._lock:
            hit = self._cache.get(key)
            if hit is not None:
                return hit
            out = self.provider.translate(q, source_language)
            with open(self.cache_path, "a", encoding="utf-8", newline="") as fh:
                csv.writer(fh, delimiter="\t", lineterminator="\n").writerow(
                    [self.name, source_language, q, out]
                )
            self._cache[key] = out
            return out


def _read_tsv(path: str | Path, ncols: int) -> Iterable[list[str]]:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), 1):
                if not row:
                    continue
                if len(row) != ncols:
                    raise ParseError(f"{path}: expected {ncols} tab-separated columns, got {len(row)}", lineno)
                yield row
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: invalid UTF-8 ({exc.reason})") from None


def read_translation_table(path: str | Path) -> dict[tuple[str, str], str]:
    return {(lang, src): en for lang, src, en in _read_tsv(path, 3)}


def write_translation_table(table: Mapping[tuple[str, str], str], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for (lang, src), en in sorted(table.items()):
            w.writerow([lang, src, en])


def make_provider(kind: str, table: str | Path | None = None, cache: str | Path | None = None,
                  fallback_identity: bool = False) -> TranslationProvider:
    if kind == "identity":
        provider: TranslationProvider = IdentityStub()
    elif kind == "table":
        if table is None:
            raise DataError("provider 'table' needs a translation table file")
        provider = TableStub.from_file(table, fallback_identity)
    else:
        raise DataError(f"unknown translation provider {kind!r}")
    if cache is not None:
        provider = CacheWrapper(provider, cache)
    return provider


def translate_query(provider: TranslationProvider, record: Record) -> str:
    """English pivot for the record's cleaned query, itself cleaned."""
    try:
        out = provider.translate(record.cleaned_query, record.language)
    except MissingEntry as exc:
        raise MissingEntry(exc.source_language, exc.text, record.id) from None
    except DataError:
        raise
    except Exception as exc:
        raise ProviderError(record.id, exc) from exc
    cleaned = clean_text(out)
    if cleaned is None:
        raise ProviderError(record.id, ValueError("translation is empty"))
    return cleaned


# ---------------------------------------------------------------------------
# input sequences

@dataclass(frozen=True)
class InputSequence:
    q_orig: str
    q_en: str
    t: str

    @property
    def text(self) -> str:
        return f"{CLS} {self.q_orig}{QUERY_SEPARATOR}{self.q_en} {SEP} {self.t} {SEP}"

    def symbols(self) -> str:
        """``text`` with each marker collapsed to one reserved code point."""
        return f"{_CLS_SYM} {self.q_orig}{QUERY_SEPARATOR}{self.q_en} {_SEP_SYM} {self.t} {_SEP_SYM}"


def build_input(q_orig: str, q_en: str, t: str) -> InputSequence:
    for part, value in (("q_orig", q_orig), ("q_en", q_en), ("target", t)):
        if not value:
            raise EmptyField(part)
        if any(m in value for m in _RESERVED):
            raise MarkerInText(part)
    return InputSequence(q_orig, q_en, t)


def target_text(record: Record, delimiter: str = DEFAULT_DELIMITER) -> str:
    if record.task is TaskKind.QC:
        return parse_category_path(record.cleaned_target, delimiter).render(delimiter)
    return record.cleaned_target


def record_input(record: Record, provider: TranslationProvider, delimiter: str = DEFAULT_DELIMITER) -> InputSequence:
    return build_input(record.cleaned_query, translate_query(provider, record), target_text(record, delimiter))


# ---------------------------------------------------------------------------
# featurization

@dataclass(frozen=True)
class FeaturizerConfig:
    dims: int = 2**16
    n_min: int = 2
    n_max: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.dims & (self.dims - 1) or not 2**8 <= self.dims <= 2**20:
            raise ValueError(f"dims must be a power of two in [2^8, 2^20], got {self.dims}")
        if not 1 <= self.n_min <= self.n_max <= 5:
            raise ValueError(f"need 1 <= n_min <= n_max <= 5, got {self.n_min}..{self.n_max}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("hash seed must fit in 64 unsigned bits")

    def to_obj(self) -> dict:
        return asdict(self)


@functools.lru_cache(maxsize=2**20)
def _hash64(gram: str, seed: int) -> int:
    digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8, key=seed.to_bytes(8, "little")).digest()
    return int.from_bytes(digest, "little")


def ngram_bucket(gram: str, dims: int, seed: int) -> tuple[int, int]:
    """``(bucket, sign)``: low bits pick the bucket, the top bit the sign."""
    h = _hash64(gram, seed)
    return h & (dims - 1), (-1 if h >> 63 else 1)


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """Sparse storage of a dense, L2-normalized hashed feature vector."""

    dims: int
    indices: np.ndarray  # sorted unique bucket ids
    data: np.ndarray

    @property
    def values(self) -> np.ndarray:
        out = np.zeros(self.dims)
        out[self.indices] = self.data
        return out

    def norm(self) -> float:
        return float(np.linalg.norm(self.data))

    def dot(self, w: np.ndarray) -> float:
        return float(self.data @ w[self.indices])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureVector):
            return NotImplemented
        return (
            self.dims == other.dims
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.data, other.data)
        )


def _accumulate(symbols: str, cfg: FeaturizerConfig) -> dict[int, float]:
    acc: dict[int, float] = {}
    for n in range(cfg.n_min, cfg.n_max + 1):
        for i in range(len(symbols) - n + 1):
            bucket, sign = ngram_bucket(symbols[i : i + n], cfg.dims, cfg.seed)
            acc[bucket] = acc.get(bucket, 0.0) + sign
    return acc


def featurize(seq: InputSequence | str, cfg: FeaturizerConfig = FeaturizerConfig()) -> FeatureVector:
    """Signed hashed character n-grams of ``seq``, L2-normalized.

    A plain string is featurized as-is (no marker handling); the zero vector
    is returned when there are no n-grams or everything cancels.
    """
    symbols = seq.symbols() if isinstance(seq, InputSequence) else seq
    acc = _accumulate(symbols, cfg)
    idx = np.array(sorted(b for b, v in acc.items() if v != 0.0), dtype=np.int64)
    data = np.array([acc[b] for b in idx], dtype=np.float64)
    norm = np.linalg.norm(data)
    if norm > 0:
        data = data / norm
    return FeatureVector(cfg.dims, idx, data)


def stack(vectors: Sequence[FeatureVector], dims: int) -> sp.csr_matrix:
    indptr = np.zeros(len(vectors) + 1, dtype=np.int64)
    for i, v in enumerate(vectors):
        if v.dims != dims:
            raise DataError(f"vector {i} has dims {v.dims}, expected {dims}")
        indptr[i + 1] = indptr[i] + len(v.indices)
    indices = np.concatenate([v.indices for v in vectors]) if vectors else np.zeros(0, dtype=np.int64)
    data = np.concatenate([v.data for v in vectors]) if vectors else np.zeros(0)
    return sp.csr_matrix((data, indices, indptr), shape=(len(vectors), dims))


@dataclass(frozen=True, eq=False)
class EncodedDataset:
    """Feature matrix plus ids/labels, ready for training or inference."""

    ids: tuple[str, ...]
    labels: np.ndarray  # int8; -1 marks an unlabeled record
    X: sp.csr_matrix
    featurizer: FeaturizerConfig

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dims(self) -> int:
        return self.X.shape[1]

    def rows(self, ids: Iterable[str]) -> "EncodedDataset":
        pos = {rid: i for i, rid in enumerate(self.ids)}
        sel = [pos[rid] for rid in ids]
        return EncodedDataset(tuple(self.ids[i] for i in sel), self.labels[sel], self.X[sel], self.featurizer)

    def take(self, n: int) -> "EncodedDataset":
        return EncodedDataset(self.ids[:n], self.labels[:n], self.X[:n], self.featurizer)

    def vector(self, i: int) -> FeatureVector:
        row = self.X.getrow(i)
        return FeatureVector(self.dims, row.indices.astype(np.int64), row.data.astype(np.float64))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(repr(self.featurizer.to_obj()).encode())
        for rid in self.ids:
            h.update(rid.encode("utf-8") + b"\0")
        h.update(np.ascontiguousarray(self.labels, dtype="<i1").tobytes())
        X = self.X.tocsr()
        X.sort_indices()
        for arr, dt in ((X.indptr, "<i8"), (X.indices, "<i8"), (X.data, "<f8")):
            h.update(np.ascontiguousarray(arr, dtype=dt).tobytes())
        return h.hexdigest()[:16]


def encode_dataset(
    ds: Dataset,
    provider: TranslationProvider | None = None,
    cfg: FeaturizerConfig = FeaturizerConfig(),
    delimiter: str = DEFAULT_DELIMITER,
) -> EncodedDataset:
    provider = provider or IdentityStub()
    vectors = [featurize(record_input(r, provider, delimiter), cfg) for r in ds.records]
    labels = np.array([-1 if r.label is None else r.label for r in ds.records], dtype=np.int8)
    return EncodedDataset(tuple(ds.ids), labels, stack(vectors, cfg.dims), cfg)


# ---------------------------------------------------------------------------
# encoded file: header line, then {"id", "label", "vector"} per record where
# "vector" is base64 of the dense little-endian float32 values

def _vector_b64(dense: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(dense, dtype="<f4").tobytes()).decode("ascii")


def dumps_encoded(enc: EncodedDataset) -> Iterable[str]:
    yield dumps_line({"featurizer": enc.featurizer.to_obj(), "encoding": "base64-float32-le"})
    for i, rid in enumerate(enc.ids):
        label = int(enc.labels[i])
        dense = np.asarray(enc.X.getrow(i).todense()).ravel()
        yield dumps_line({"id": rid, "label": None if label < 0 else label, "vector": _vector_b64(dense)})


def save_encoded(enc: EncodedDataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.writelines(dumps_encoded(enc))


def load_encoded(path: str | Path) -> EncodedDataset:
    """Read an encoded file; stored float32 values become float64 features."""
    it = iter_jsonl(path)
    try:
        _, header = next(it)
    except StopIteration:
        raise ParseError("encoded file is empty") from None
    if not isinstance(header, dict) or "featurizer" not in header:
        raise ParseError("encoded file lacks a featurizer header", 1)
    cfg = FeaturizerConfig(**header["featurizer"])
    ids, labels, rows = [], [], []
    for lineno, obj in it:
        try:
            raw = base64.b64decode(obj["vector"], validate=True)
            dense = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad encoded record: {exc}", lineno) from None
        if dense.shape[0] != cfg.dims:
            raise ParseError(f"vector has {dense.shape[0]} values, header says {cfg.dims}", lineno)
        ids.append(str(obj.get("id")))
        labels.append(-1 if obj.get("label") is None else int(obj["label"]))
        rows.append(sp.csr_matrix(dense))
    X = sp.vstack(rows, format="csr") if rows else sp.csr_matrix((0, cfg.dims))
    return EncodedDataset(tuple(ids), np.array(labels, dtype=np.int8), X, cfg)


def is_encoded_file(path: str | Path) -> bool:
    for _, obj in iter_jsonl(path):
        return isinstance(obj, dict) and "featurizer" in obj
    return False
