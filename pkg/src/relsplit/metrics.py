"""Positive-class precision/recall/F1 and the two-task average.

Zero-denominator convention: precision, recall and F1 are 0 when their
denominators are 0 (e.g. a fold with no predicted and no true positives
scores 0, not 1).
"""

from __future__ import annotations

import json
import statistics
from dataclasses import asdict, dataclass
from decimal import Decimal
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import IdMismatch, OutOfRange


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


@dataclass(frozen=True)
class TaskMetrics:
    precision: float
    recall: float
    f1: float
    support_positive: int


def confusion(preds: Iterable[tuple[str, int]], truths: Iterable[tuple[str, int]]) -> ConfusionCounts:
    """Confusion counts with label 1 as the positive class; id sets must match."""
    p = dict(preds)
    t = dict(truths)
    if p.keys() != t.keys():
        raise IdMismatch(set(t) - set(p), set(p) - set(t))
    tp = fp = tn = fn = 0
    for rid, truth in t.items():
        pred = p[rid]
        if pred not in (0, 1) or truth not in (0, 1):
            raise ValueError(f"record {rid!r}: labels must be 0 or 1")
        if pred == 1:
            if truth == 1:
                tp += 1
            else:
                fp += 1
        elif truth == 1:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp, fp, tn, fn)


def f1_positive(c: ConfusionCounts) -> TaskMetrics:
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return TaskMetrics(precision, recall, f1, c.tp + c.fn)


def f1_average(f1_qc: float, f1_qi: float) -> float:
    """Equal-weight mean of the two task F1 scores.

    Computed in decimal on each input's shortest repr, so inputs written with
    a few decimals average exactly: ``f1_average(0.8936, 0.8881) == 0.89085``
    (binary floating point would give 0.8908499999999999).
    """
    for name, v in (("f1_qc", f1_qc), ("f1_qi", f1_qi)):
        if not 0.0 <= v <= 1.0:
            raise OutOfRange(f"{name} = {v!r} is outside [0, 1]")
    half = Decimal("0.5")
    return float(half * Decimal(repr(float(f1_qc))) + half * Decimal(repr(float(f1_qi))))


# ---------------------------------------------------------------------------
# fold reports

@dataclass
class FoldReport:
    """Per-fold metrics with mean, sample std, best fold and pooled (micro) scores."""

    per_fold: list[tuple[int, ConfusionCounts, TaskMetrics]]
    pooled: TaskMetrics
    pooled_counts: ConfusionCounts

    @property
    def f1_values(self) -> list[float]:
        return [m.f1 for _, _, m in self.per_fold]

    @property
    def mean_f1(self) -> float:
        return statistics.fmean(self.f1_values) if self.per_fold else self.pooled.f1

    @property
    def std_f1(self) -> float:
        return statistics.stdev(self.f1_values) if len(self.per_fold) > 1 else 0.0

    @property
    def best_f1(self) -> float:
        return max(self.f1_values) if self.per_fold else self.pooled.f1

    def to_obj(self) -> dict:
        return {
            "folds": [
                {"fold": f, **asdict(c), **asdict(m)} for f, c, m in self.per_fold
            ],
            "mean_f1": self.mean_f1,
            "std_f1": self.std_f1,
            "best_f1": self.best_f1,
            "pooled": {**asdict(self.pooled_counts), **asdict(self.pooled)},
        }


def fold_report(
    preds: Mapping[str, int], truths: Mapping[str, int], folds: Mapping[str, int] | None = None
) -> FoldReport:
    """Score predictions per fold (when ``folds`` is given) and pooled."""
    pooled = confusion(preds.items(), truths.items())
    per_fold = []
    if folds:
        by_fold: dict[int, list[str]] = {}
        for rid in truths:
            by_fold.setdefault(folds[rid], []).append(rid)
        for f in sorted(by_fold):
            ids = by_fold[f]
            c = confusion(((r, preds[r]) for r in ids), ((r, truths[r]) for r in ids))
            per_fold.append((f, c, f1_positive(c)))
    return FoldReport(per_fold, f1_positive(pooled), pooled)


def merge_reports(parts: Sequence[tuple[int, ConfusionCounts]]) -> FoldReport:
    """Build a report from already-computed per-fold counts, ordered by fold."""
    parts = sorted(parts, key=lambda p: p[0])
    pooled = ConfusionCounts()
    for _, c in parts:
        pooled = pooled + c
    return FoldReport([(f, c, f1_positive(c)) for f, c in parts], f1_positive(pooled), pooled)


def format_report(report: FoldReport, title: str = "positive-class F1", extra: Mapping[str, object] | None = None) -> str:
    lines = [f"# {title}"]
    for key, value in (extra or {}).items():
        if isinstance(value, (dict, list)):
            value = json.dumps(value, sort_keys=True)
        lines.append(f"{key}: {value}")
    lines.append("fold  tp  fp  tn  fn  precision  recall  f1")
    for f, c, m in report.per_fold:
        lines.append(f"{f:>4} {c.tp:>3} {c.fp:>3} {c.tn:>3} {c.fn:>3}  {m.precision:.4f}     {m.recall:.4f}  {m.f1:.4f}")
    lines.append(f"mean_f1: {report.mean_f1:.6f} +/- {report.std_f1:.6f} (sample std)")
    lines.append(f"best_fold_f1: {report.best_f1:.6f}")
    p = report.pooled
    lines.append(f"pooled: precision={p.precision:.6f} recall={p.recall:.6f} f1={p.f1:.6f}")
    return "\n".join(lines) + "\n"


def write_report(report: FoldReport, path: str | Path, title: str = "positive-class F1",
                 extra: Mapping[str, object] | None = None) -> Path:
    """Write the text report to ``path`` and the JSON-lines form next to it.

    Returns the JSON-lines path (``<path>.jsonl``).
    """
    path = Path(path)
    path.write_text(format_report(report, title, extra), encoding="utf-8")
    jpath = path.with_name(path.name + ".jsonl")
    obj = report.to_obj()
    rows = [{"type": "fold", **row} for row in obj["folds"]]
    rows.append({"type": "summary", "title": title, "mean_f1": obj["mean_f1"], "std_f1": obj["std_f1"],
                 "best_f1": obj["best_f1"], "pooled": obj["pooled"], **({"config": dict(extra)} if extra else {})})
    jpath.write_text("".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in rows),
                     encoding="utf-8")
    return jpath


def read_report_summary(path: str | Path) -> dict:
    """Summary row of a JSON-lines report; a text report's sibling ``.jsonl`` is used."""
    path = Path(path)
    candidates = [path] if path.suffix == ".jsonl" else [path.with_name(path.name + ".jsonl"), path]
    for cand in candidates:
        if not cand.exists():
            continue
        try:
            rows = [json.loads(line) for line in cand.read_text(encoding="utf-8").splitlines() if line.strip()]
        except json.JSONDecodeError:
            continue
        for row in rows:
            if row.get("type") == "summary":
                return row
    from .errors import ParseError

    raise ParseError(f"{path}: no machine-readable report summary found")


def headline_f1(summary: Mapping) -> float:
    """Mean fold F1 when folds were scored, else pooled F1."""
    return float(summary["mean_f1"])
