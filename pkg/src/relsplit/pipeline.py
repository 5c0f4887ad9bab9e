"""Stage glue shared by the CLI, and the end-to-end ``reproduce`` experiment.

``reproduce`` runs, for each vocabulary-overlap setting and each of several
seeds: synthesize a QC/QI corpus pair, clean it, split each task into
leakage-free folds, audit the split, encode, then per fold train a direct
model and a two-stage (auxiliary task first) model on a small sample of
the training folds and score both on the held-out fold. Each task serves as
the other's auxiliary task. Every artifact is written without timestamps,
so two runs with the same seed produce identical files.
"""

from __future__ import annotations

import json
import random
import statistics
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping

from .corpus import Dataset, FieldMap, SynthSpec, dumps_line, gen_synthetic, iter_jsonl, load_dataset, save_dataset
from .encode import EncodedDataset, FeaturizerConfig, encode_dataset
from .errors import DataError, InvariantViolation, LeakageDetected, ParseError
from .metrics import FoldReport, f1_average, fold_report, write_report
from .model import Checkpoint, TrainConfig, classify, loss_trend_ok, train
from .splitkit import (
    AuditReport,
    FoldAssignment,
    Groups,
    assign_folds,
    audit,
    make_groups,
    record_strata,
    save_assignment,
    save_record_folds,
)

# ---------------------------------------------------------------------------
# prediction and truth files

def dumps_predictions(rows: Iterable[tuple[str, int, float]]) -> str:
    return "".join(dumps_line({"id": rid, "label": label, "probability": p}) for rid, label, p in rows)


def save_predictions(rows: Iterable[tuple[str, int, float]], path: str | Path) -> None:
    Path(path).write_text(dumps_predictions(rows), encoding="utf-8")


def read_labels(path: str | Path, schema: FieldMap = FieldMap()) -> dict[str, int]:
    """``id -> label`` from any JSON-lines file with id and 0/1 label keys.

    Works for prediction files and for labeled dataset files alike.
    """
    out: dict[str, int] = {}
    for line, obj in iter_jsonl(path):
        if not isinstance(obj, dict):
            raise ParseError("expected a JSON object", line)
        rid, label = obj.get(schema.id), obj.get(schema.label)
        if rid is None or isinstance(label, bool) or label not in (0, 1):
            raise ParseError(f"need {schema.id!r} and a 0/1 {schema.label!r}", line)
        rid = str(rid)
        if rid in out:
            raise ParseError(f"duplicate id {rid!r}", line)
        out[rid] = label
    return out


# ---------------------------------------------------------------------------
# fault injection

def inject_leakage(record_folds: Mapping[str, int], groups: Groups, k: int) -> dict[str, int]:
    """Copy of ``record_folds`` with one record of a multi-record group moved to another fold."""
    out = dict(record_folds)
    for key in sorted(groups):
        ids = groups[key]
        if len(ids) >= 2:
            out[ids[0]] = (out[ids[0]] + 1) % k
            return out
    raise DataError("no group with two or more records to leak")


# ---------------------------------------------------------------------------
# reproduce

LOW_DATA_CONFIG = TrainConfig(learning_rate=1e-2)
"""Direct and stage-2 training on a 50-example budget.

At the default AdamW rate 50 examples give 40 small steps, too few to move
away from the stage-1 solution, so stage 2 would measure the starting point
rather than fine-tuning. Both arms use this config, so the comparison stays
like-for-like.
"""

STRATIFICATION_TOL = 0.05
TAPT_MIN_GAIN = 0.02
NO_TRANSFER_TOL = 0.05


@dataclass(frozen=True)
class ReproduceOptions:
    seed: int = 7
    n_seeds: int = 5
    overlaps: tuple[float, ...] = (1.0, 0.0)
    budget: int = 50
    k: int = 5
    prefix_n: int = 2
    spec: SynthSpec = SynthSpec()
    featurizer: FeaturizerConfig = FeaturizerConfig()
    stage1: TrainConfig = TrainConfig()
    stage2: TrainConfig = LOW_DATA_CONFIG
    inject_leakage: bool = False
    save_checkpoints: bool = True

    def to_obj(self) -> dict:
        obj = asdict(self)
        obj["overlaps"] = list(self.overlaps)
        return obj


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


@dataclass
class RunResult:
    """One (overlap, seed) run: per task, per arm, the fold report."""

    overlap: float
    seed: int
    reports: dict[str, dict[str, FoldReport]] = field(default_factory=dict)
    audits: dict[str, AuditReport] = field(default_factory=dict)

    def mean_f1(self, task: str, arm: str) -> float:
        return self.reports[task][arm].mean_f1


@dataclass
class ReproduceResult:
    runs: list[RunResult]
    checks: list[Check]
    report_path: Path

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def delta(self, overlap: float, task: str | None = None) -> float:
        """Mean over seeds of tapt minus direct F1; ``task=None`` uses the two-task average."""
        vals = []
        for run in self.runs:
            if run.overlap != overlap:
                continue
            if task is None:
                d = f1_average(run.mean_f1("qc", "tapt"), run.mean_f1("qi", "tapt"))
                t = f1_average(run.mean_f1("qc", "direct"), run.mean_f1("qi", "direct"))
                vals.append(d - t)
            else:
                vals.append(run.mean_f1(task, "tapt") - run.mean_f1(task, "direct"))
        return statistics.fmean(vals)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def _overlap_dir(overlap: float) -> str:
    return f"overlap-{overlap:.2f}"


def _budget_sample(pool: list[str], budget: int, seed: int) -> list[str]:
    if len(pool) <= budget:
        return list(pool)
    picked = set(random.Random(seed).sample(pool, budget))
    return [rid for rid in pool if rid in picked]


def _split_and_audit(ds: Dataset, opts: ReproduceOptions, seed: int, out: Path,
                     checks: list[Check], tag: str) -> tuple[dict[str, int], AuditReport]:
    task = ds.task.value
    groups = make_groups(ds, prefix_n=opts.prefix_n)
    assignment: FoldAssignment = assign_folds(groups, record_strata(ds), opts.k, seed=seed)
    if ds.task.value == "qc":
        assignment.prefix_n = opts.prefix_n
    save_assignment(assignment, out / f"{task}.folds.jsonl")
    record_folds = assignment.record_folds(groups)
    if opts.inject_leakage:
        record_folds = inject_leakage(record_folds, groups, opts.k)
        save_record_folds(record_folds, out / f"{task}.record-folds.jsonl", opts.k, assignment.kind, assignment.prefix_n)
    rep = audit(record_folds, ds, groups, opts.k)
    (out / f"{task}.audit.json").write_text(json.dumps(rep.to_obj(), sort_keys=True, indent=1) + "\n", encoding="utf-8")
    if rep.leakage_violations:
        raise LeakageDetected(f"{tag} {task}: {len(rep.leakage_violations)} group(s) span several folds")
    checks.append(Check(f"{tag} {task} no leakage", True, "0 violations"))

    global_rate = sum(r.label for r in ds) / len(ds)
    label_dev = max(abs(r - global_rate) for r in rep.per_fold_label_rate)
    lang_dev = 0.0
    n = len(ds)
    for lang in sorted(ds.languages):
        g = sum(1 for r in ds if r.language == lang) / n
        for share in rep.language_share():
            lang_dev = max(lang_dev, abs(share.get(lang, 0.0) - g))
    checks.append(Check(f"{tag} {task} stratification", label_dev <= STRATIFICATION_TOL and lang_dev <= STRATIFICATION_TOL,
                        f"max label-rate dev {_fmt(label_dev)}, max language-share dev {_fmt(lang_dev)}"))
    return record_folds, rep


def _run_one(overlap: float, seed: int, opts: ReproduceOptions, out: Path, checks: list[Check]) -> RunResult:
    tag = f"overlap={overlap:.2f} seed={seed}"
    out.mkdir(parents=True, exist_ok=True)
    result = RunResult(overlap, seed)

    # synth -> clean
    qc_raw, qi_raw = gen_synthetic(replace(opts.spec, overlap=overlap), seed)
    datasets: dict[str, Dataset] = {}
    for ds in (qc_raw, qi_raw):
        task = ds.task.value
        raw_path, clean_path = out / f"{task}.synth.jsonl", out / f"{task}.jsonl"
        save_dataset(ds, raw_path)
        datasets[task] = load_dataset(raw_path, ds.task)
        save_dataset(datasets[task], clean_path)
        if raw_path.read_bytes() != clean_path.read_bytes():
            raise InvariantViolation(f"{tag} {task}: cleaning a canonical file changed it")

    # split -> audit
    folds: dict[str, dict[str, int]] = {}
    for task, ds in datasets.items():
        folds[task], result.audits[task] = _split_and_audit(ds, opts, seed, out, checks, tag)

    # encode, then stage 1 once per auxiliary corpus
    enc: dict[str, EncodedDataset] = {t: encode_dataset(ds, cfg=opts.featurizer) for t, ds in datasets.items()}
    aux_of = {"qc": "qi", "qi": "qc"}
    stage1: dict[str, Checkpoint] = {}
    for task, aux in aux_of.items():
        ckpt = train(enc[aux], opts.stage1)
        stage1[task] = ckpt
        if opts.save_checkpoints:
            ckpt.save(out / f"{task}.stage1-from-{aux}.ckpt")
        if opts.stage1 == TrainConfig():
            ok = loss_trend_ok(ckpt.provenance[-1].loss_history)
            checks.append(Check(f"{tag} stage-1 on {aux} loss trend", ok, "3-epoch moving average non-increasing"))

    # per fold: direct vs two-stage on a small training sample
    for ti, task in enumerate(("qc", "qi")):
        ds, fmap = datasets[task], folds[task]
        truths = {r.id: r.label for r in ds}
        preds: dict[str, dict[str, int]] = {"direct": {}, "tapt": {}}
        rows: dict[str, list] = {"direct": [], "tapt": []}
        for f in range(opts.k):
            held = [rid for rid in ds.ids if fmap[rid] == f]
            pool = [rid for rid in ds.ids if fmap[rid] != f]
            sample = _budget_sample(pool, opts.budget, seed * 1000 + ti * 100 + f)
            train_set, held_set = enc[task].rows(sample), enc[task].rows(held)
            models = {"direct": train(train_set, opts.stage2), "tapt": train(train_set, opts.stage2, init=stage1[task])}
            for arm, ckpt in models.items():
                if opts.save_checkpoints:
                    ckpt.save(out / f"{task}.fold{f}.{arm}.ckpt")
                out_rows = classify(ckpt, held_set)
                rows[arm].extend(out_rows)
                preds[arm].update((rid, label) for rid, label, _ in out_rows)
        result.reports[task] = {}
        for arm in ("direct", "tapt"):
            order = {rid: i for i, rid in enumerate(ds.ids)}
            save_predictions(sorted(rows[arm], key=lambda r: order[r[0]]), out / f"{task}.{arm}.pred.jsonl")
            rep = fold_report(preds[arm], truths, fmap)
            write_report(rep, out / f"{task}.{arm}.report.txt", title=f"{task} {arm} ({tag})",
                         extra={"budget": opts.budget, "k": opts.k})
            result.reports[task][arm] = rep

    avg = {arm: f1_average(result.mean_f1("qc", arm), result.mean_f1("qi", arm)) for arm in ("direct", "tapt")}
    (out / "eval-avg.json").write_text(json.dumps(avg, sort_keys=True) + "\n", encoding="utf-8")
    return result


def reproduce(out_dir: str | Path, opts: ReproduceOptions = ReproduceOptions(),
              log: Callable[[str], None] = _log) -> ReproduceResult:
    """Run the whole experiment under ``out_dir`` and write ``report.txt``/``report.json``.

    Raises LeakageDetected (a DataError) when the audit finds a group
    spanning folds; artifacts written before the failure are kept.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs: list[RunResult] = []
    checks: list[Check] = []
    for overlap in opts.overlaps:
        for i in range(opts.n_seeds):
            seed = opts.seed + i
            t0 = time.perf_counter()
            run = _run_one(overlap, seed, opts, out / _overlap_dir(overlap) / f"seed-{seed}", checks)
            runs.append(run)
            log(f"overlap={overlap:.2f} seed={seed}: "
                + " ".join(f"{t}:{run.mean_f1(t, 'direct'):.3f}->{run.mean_f1(t, 'tapt'):.3f}" for t in ("qc", "qi"))
                + f" ({time.perf_counter() - t0:.1f}s)")

    result = ReproduceResult(runs, checks, out / "report.txt")
    for overlap in opts.overlaps:
        for task in ("qc", "qi", None):
            name = task or "average"
            d = result.delta(overlap, task)
            if overlap == 1.0:
                checks.append(Check(f"overlap=1.00 tapt gain {name}", d >= TAPT_MIN_GAIN, f"delta {d:+.4f} (need >= +{TAPT_MIN_GAIN})"))
            elif overlap == 0.0:
                checks.append(Check(f"overlap=0.00 no transfer {name}", abs(d) <= NO_TRANSFER_TOL,
                                    f"delta {d:+.4f} (need |delta| <= {NO_TRANSFER_TOL})"))
    _write_summary(result, opts)
    return result


def _write_summary(result: ReproduceResult, opts: ReproduceOptions) -> None:
    lines = ["# two-stage vs direct training on synthetic corpora", ""]
    lines.append("config: " + json.dumps(opts.to_obj(), sort_keys=True))
    lines.append("")
    lines.append("overlap  seed  task  direct_mean  direct_std  direct_best  tapt_mean  tapt_std  tapt_best  delta")
    runs_obj = []
    for run in result.runs:
        for task in ("qc", "qi"):
            d, t = run.reports[task]["direct"], run.reports[task]["tapt"]
            lines.append(f"{run.overlap:>7.2f} {run.seed:>5}  {task}   {_fmt(d.mean_f1):>11} {_fmt(d.std_f1):>11} "
                         f"{_fmt(d.best_f1):>12} {_fmt(t.mean_f1):>10} {_fmt(t.std_f1):>9} {_fmt(t.best_f1):>10}  "
                         f"{t.mean_f1 - d.mean_f1:+.4f}")
        runs_obj.append({
            "overlap": run.overlap, "seed": run.seed,
            "reports": {task: {arm: rep.to_obj() for arm, rep in arms.items()} for task, arms in run.reports.items()},
            "audits": {task: rep.to_obj() for task, rep in run.audits.items()},
            "f1_average": {arm: f1_average(run.mean_f1("qc", arm), run.mean_f1("qi", arm)) for arm in ("direct", "tapt")},
        })
    lines.append("")
    deltas = {}
    for overlap in opts.overlaps:
        for task in ("qc", "qi", None):
            name = task or "average"
            d = result.delta(overlap, task)
            deltas[f"{overlap:.2f}/{name}"] = d
            lines.append(f"mean tapt delta, overlap={overlap:.2f}, {name}: {d:+.4f}")
    lines.append("")
    lines.append("checks:")
    for c in result.checks:
        lines.append(f"  [{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.detail}")
    lines.append("")
    lines.append(f"overall: {'PASS' if result.ok else 'FAIL'}")
    result.report_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    obj = {"config": opts.to_obj(), "runs": runs_obj, "tapt_delta": deltas,
           "checks": [asdict(c) for c in result.checks], "ok": result.ok}
    result.report_path.with_suffix(".json").write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")
