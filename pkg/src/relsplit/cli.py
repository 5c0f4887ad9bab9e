"""``relsplit`` command line: one subcommand per pipeline stage plus ``reproduce``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant
violation (or a failed check in ``reproduce``). Diagnostics go to stderr;
results go to the files named on the command line.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import __version__
from .config import PipelineConfig, known_key, read_config
from .corpus import Dataset, TaskKind, gen_synthetic, load_dataset, save_dataset
from .encode import EncodedDataset, encode_dataset, is_encoded_file, load_encoded, make_provider, save_encoded
from .errors import ConfigMismatch, DataError, InvariantViolation, LeakageDetected
from .metrics import f1_average, fold_report, headline_f1, read_report_summary, write_report
from .model import Checkpoint, classify, predict_dataset, train, tune_threshold
from .pipeline import ReproduceOptions, read_labels, reproduce, save_predictions
from .splitkit import (
    GroupKind,
    assign_folds,
    audit,
    load_folds_file,
    make_groups,
    record_strata,
    resolve_record_folds,
    save_assignment,
    save_record_folds,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument errors print the subcommand's contract and exit with code 1."""

    def error(self, message: str):
        self.print_help(sys.stderr)
        print(f"\n{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# shared option groups; dests that are config keys take part in precedence

def _config_opt(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="flat key = value config file (default: $RELSPLIT_CONFIG)")


def _task_opt(p: argparse.ArgumentParser, required: bool = False) -> None:
    p.add_argument("--task", dest="task", choices=["qc", "qi"], required=required, default=None)


def _featurizer_opts(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("featurizer (used when an input is a raw dataset)")
    g.add_argument("--provider", dest="provider", choices=["identity", "table"], default=None)
    g.add_argument("--table", dest="table", metavar="FILE", default=None, help="TSV: language, source, english")
    g.add_argument("--cache", dest="cache", metavar="FILE", default=None, help="append-only translation cache")
    g.add_argument("--fallback-identity", dest="fallback_identity", action="store_const", const=True, default=None,
                   help="untranslatable queries fall back to themselves")
    g.add_argument("--dims", dest="featurizer.dims", type=int, default=None)
    g.add_argument("--n-min", dest="featurizer.n_min", type=int, default=None)
    g.add_argument("--n-max", dest="featurizer.n_max", type=int, default=None)
    g.add_argument("--hash-seed", dest="featurizer.seed", type=int, default=None)
    g.add_argument("--delimiter", dest="delimiter", default=None, help="category path delimiter (default '>')")


def _train_opts(p: argparse.ArgumentParser, section: str, label: str = "") -> None:
    g = p.add_argument_group(f"{section} training")
    pre = f"--{label}" if label else "--"
    g.add_argument(f"{pre}optimizer", dest=f"{section}.optimizer", choices=["sgd", "adamw"], default=None)
    g.add_argument(f"{pre}lr", dest=f"{section}.learning_rate", type=float, default=None)
    g.add_argument(f"{pre}epochs", dest=f"{section}.epochs", type=int, default=None)
    g.add_argument(f"{pre}batch-size", dest=f"{section}.batch_size", type=int, default=None)
    g.add_argument(f"{pre}train-seed", dest=f"{section}.seed", type=int, default=None)
    g.add_argument(f"{pre}l2", dest=f"{section}.l2", type=float, default=None)
    g.add_argument(f"{pre}weight-decay", dest=f"{section}.weight_decay", type=float, default=None)


def _fold_opts(p: argparse.ArgumentParser, what: str) -> None:
    p.add_argument("--folds", metavar="FILE", help="fold assignment or per-record fold file")
    p.add_argument("--fold", type=int, help=what)


PATH_ROLES = {
    "clean": {"in_": "in", "out": "out", "report": "report"},
    "split": {"in_": "in", "out_folds": "out", "out_record_folds": "out_records"},
    "audit": {"in_": "in", "folds": "in_folds", "report": "report"},
    "encode": {"in_": "in", "out": "out"},
    "train": {"in_": "in", "folds": "in_folds", "init": "in_init", "out": "out"},
    "tapt": {"aux": "in_aux", "target": "in_target", "folds": "in_folds", "out": "out", "stage1_out": "out_stage1"},
    "predict": {"ckpt": "in_ckpt", "in_": "in", "folds": "in_folds", "tune_on": "in_tune", "out": "out"},
    "eval": {"pred": "in_pred", "truth": "in_truth", "folds": "in_folds", "out": "out"},
    "eval-avg": {"qc": "in_qc", "qi": "in_qi", "out": "out"},
    "synth": {"out_aux": "out_aux", "out_target": "out_target"},
    "reproduce": {"out": "out"},
}


def effective_config(args: argparse.Namespace) -> PipelineConfig:
    overrides = {k: v for k, v in vars(args).items() if known_key(k)}
    paths = {role: getattr(args, attr, None) for attr, role in PATH_ROLES.get(args.command, {}).items()}
    return PipelineConfig.build(read_config(args.config), overrides, paths)


# ---------------------------------------------------------------------------
# input helpers

def _need_task(cfg: PipelineConfig, what: str) -> TaskKind:
    if cfg.task is None:
        raise UsageError(f"{what} needs --task qc|qi (or 'task' in the config file)")
    return cfg.task


def _load(path: str, cfg: PipelineConfig) -> Dataset:
    return load_dataset(path, _need_task(cfg, f"reading {path}"), cfg.fields)


def _encoded_input(path: str, cfg: PipelineConfig) -> tuple[EncodedDataset, Dataset | None]:
    """An encoded file as is, or a raw dataset featurized with the configured featurizer."""
    if is_encoded_file(path):
        enc = load_encoded(path)
        return enc, None
    ds = _load(path, cfg)
    provider = make_provider(cfg.provider, cfg.table, cfg.cache, cfg.fallback_identity)
    return encode_dataset(ds, provider, cfg.featurizer, cfg.delimiter), ds


def _record_folds(folds_path: str, enc: EncodedDataset, ds: Dataset | None, cfg: PipelineConfig) -> dict[str, int]:
    if ds is not None:
        record_folds, _, _ = resolve_record_folds(folds_path, ds, cfg.delimiter, None)
        return record_folds
    record_folds, _, _ = load_folds_file(folds_path)
    if record_folds is None:
        raise DataError("a group fold assignment needs the raw dataset to resolve groups; "
                        "pass the dataset instead of an encoded file, or a per-record fold file")
    return record_folds


def _select(enc: EncodedDataset, folds: dict[str, int] | None, fold: int | None, held_out: bool) -> EncodedDataset:
    """Rows outside ``fold`` (training) or inside it (held out); all rows without folds."""
    if folds is None or fold is None:
        return enc
    missing = [rid for rid in enc.ids if rid not in folds]
    if missing:
        raise DataError(f"{len(missing)} record(s) missing from the fold file, e.g. {missing[:3]}")
    return enc.rows([rid for rid in enc.ids if (folds[rid] == fold) == held_out])


def _check_fold_args(args: argparse.Namespace) -> None:
    if (args.folds is None) != (args.fold is None):
        raise UsageError("--folds and --fold go together")


def _write_json(obj: object, path: str) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands

def cmd_clean(args, cfg: PipelineConfig) -> int:
    ds = _load(args.in_, cfg)
    save_dataset(ds, args.out, cfg.fields)
    if args.report:
        _write_json({"config": cfg.to_obj(), "records": len(ds), "dropped": ds.dropped,
                     "languages": sorted(ds.languages)}, args.report)
    _say(f"clean: kept {len(ds)} record(s), dropped {ds.dropped} with an empty query or target")
    return EXIT_OK


def cmd_split(args, cfg: PipelineConfig) -> int:
    ds = _load(args.in_, cfg)
    groups = make_groups(ds, cfg.prefix_n, cfg.delimiter, cfg.raw_query)
    a = assign_folds(groups, record_strata(ds), cfg.k, seed=cfg.seed, joint=cfg.stratify == "joint",
                     restarts=cfg.restarts)
    if ds.task is TaskKind.QC:
        a.prefix_n = cfg.prefix_n
    save_assignment(a, args.out_folds)
    if args.out_record_folds:
        save_record_folds(a.record_folds(groups), args.out_record_folds, a.k, a.kind, a.prefix_n)
    _say(f"split: {len(groups)} group(s) into {a.k} folds, sizes {a.fold_sizes(groups)}, "
         f"objective {a.objective_value:.6g}")
    return EXIT_OK


def cmd_audit(args, cfg: PipelineConfig) -> int:
    _, assignment, footer = load_folds_file(args.folds)
    if cfg.task is None and footer.get("kind"):
        cfg = replace(cfg, task=TaskKind.QI if footer["kind"] == GroupKind.QUERY.value else TaskKind.QC)
    ds = _load(args.in_, cfg)
    prefix_n = args.prefix_n or None
    record_folds, k, groups = resolve_record_folds(args.folds, ds, cfg.delimiter, prefix_n)
    if cfg.raw_query and ds.task is TaskKind.QI:
        groups = make_groups(ds, raw_query=True)
    rep = audit(record_folds, ds, groups, k, joint=cfg.stratify == "joint")
    _write_json({"config": cfg.to_obj(), **rep.to_obj()}, args.report)
    if rep.leakage_violations:
        raise LeakageDetected(f"{len(rep.leakage_violations)} group(s) span several folds; see {args.report}")
    _say(f"audit: 0 leakage violations, fold sizes {rep.fold_sizes}")
    return EXIT_OK


def cmd_encode(args, cfg: PipelineConfig) -> int:
    ds = _load(args.in_, cfg)
    provider = make_provider(cfg.provider, cfg.table, cfg.cache, cfg.fallback_identity)
    enc = encode_dataset(ds, provider, cfg.featurizer, cfg.delimiter)
    save_encoded(enc, args.out)
    _say(f"encode: {len(enc)} record(s) at {enc.dims} dims")
    return EXIT_OK


def cmd_train(args, cfg: PipelineConfig) -> int:
    _check_fold_args(args)
    enc, ds = _encoded_input(args.in_, cfg)
    folds = _record_folds(args.folds, enc, ds, cfg) if args.folds else None
    train_set = _select(enc, folds, args.fold, held_out=False)
    init = Checkpoint.load(args.init) if args.init else None
    ckpt = train(train_set, cfg.train, init)
    ckpt.save(args.out)
    _say(f"train: {ckpt.provenance[-1].n_examples} example(s), final loss {ckpt.provenance[-1].final_loss:.6f}")
    return EXIT_OK


def cmd_tapt(args, cfg: PipelineConfig) -> int:
    _check_fold_args(args)
    aux_cfg = replace(cfg, task=TaskKind.parse(args.aux_task)) if args.aux_task else cfg
    aux, _ = _encoded_input(args.aux, aux_cfg)
    target, ds = _encoded_input(args.target, cfg)
    if aux.featurizer != target.featurizer:
        raise ConfigMismatch("auxiliary and target inputs use different featurizers")
    folds = _record_folds(args.folds, target, ds, cfg) if args.folds else None
    stage1 = train(aux, cfg.stage1)
    if args.stage1_out:
        stage1.save(args.stage1_out)
    ckpt = train(_select(target, folds, args.fold, held_out=False), cfg.stage2, stage1)
    ckpt.save(args.out)
    _say(f"tapt: stage 1 on {len(aux)} example(s), stage 2 on {ckpt.provenance[-1].n_examples}")
    return EXIT_OK


def cmd_predict(args, cfg: PipelineConfig) -> int:
    _check_fold_args(args)
    ckpt = Checkpoint.load(args.ckpt)
    enc, ds = _encoded_input(args.in_, cfg)
    folds = _record_folds(args.folds, enc, ds, cfg) if args.folds else None
    threshold = cfg.threshold
    if args.tune_on:
        if not cfg.tune_threshold:
            raise UsageError("--tune-on needs tune_threshold = true (flag --tune-threshold)")
        val, _ = _encoded_input(args.tune_on, cfg)
        labeled = val.rows([rid for rid, y in zip(val.ids, val.labels) if y >= 0])
        threshold = tune_threshold(predict_dataset(ckpt, labeled), labeled.labels.tolist())
        _say(f"predict: tuned threshold {threshold:.6g} on {len(labeled)} validation example(s)")
    rows = classify(ckpt, _select(enc, folds, args.fold, held_out=True), threshold)
    save_predictions(rows, args.out)
    _say(f"predict: {len(rows)} prediction(s), {sum(r[1] for r in rows)} positive")
    return EXIT_OK


def cmd_eval(args, cfg: PipelineConfig) -> int:
    preds = read_labels(args.pred)
    truths = read_labels(args.truth, cfg.fields)
    folds = None
    if args.folds:
        record_folds, _, _ = load_folds_file(args.folds)
        if record_folds is None:
            record_folds, _, _ = resolve_record_folds(args.folds, _load(args.truth, cfg), cfg.delimiter)
        folds = record_folds
        missing = [rid for rid in truths if rid not in folds]
        if missing:
            raise DataError(f"{len(missing)} truth record(s) missing from the fold file, e.g. {missing[:3]}")
    if folds is not None and not args.all_folds:
        # score only folds that have predictions, i.e. the held-out ones
        scored = {folds[rid] for rid in preds if rid in folds}
        truths = {rid: y for rid, y in truths.items() if folds[rid] in scored}
    rep = fold_report(preds, truths, folds)
    write_report(rep, args.out, title=args.title, extra={"config": cfg.to_obj()})
    _say(f"eval: mean F1 {rep.mean_f1:.6f}, pooled F1 {rep.pooled.f1:.6f}")
    return EXIT_OK


def cmd_eval_avg(args, cfg: PipelineConfig) -> int:
    qc, qi = headline_f1(read_report_summary(args.qc)), headline_f1(read_report_summary(args.qi))
    avg = f1_average(qc, qi)
    if args.out:
        _write_json({"f1_qc": qc, "f1_qi": qi, "f1_average": avg}, args.out)
    _say(f"eval-avg: qc {qc!r} qi {qi!r} average {avg!r}")
    return EXIT_OK


def cmd_synth(args, cfg: PipelineConfig) -> int:
    aux, target = gen_synthetic(cfg.synth, cfg.seed)
    save_dataset(aux, args.out_aux)
    save_dataset(target, args.out_target)
    _say(f"synth: {len(aux)} qc and {len(target)} qi record(s), overlap {cfg.synth.overlap}")
    return EXIT_OK


def cmd_reproduce(args, cfg: PipelineConfig) -> int:
    opts = ReproduceOptions(seed=args.seed if args.seed is not None else 7, n_seeds=args.n_seeds, k=cfg.k,
                            prefix_n=cfg.prefix_n, spec=cfg.synth, featurizer=cfg.featurizer,
                            inject_leakage=args.inject_leakage, save_checkpoints=not args.no_checkpoints)
    result = reproduce(args.out, opts, log=_say)
    _say(f"reproduce: report at {result.report_path}")
    for c in result.checks:
        if not c.passed:
            _say(f"reproduce: FAILED {c.name}: {c.detail}")
    if not result.ok:
        raise InvariantViolation("one or more reproduce checks failed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="relsplit", description="Leakage-safe relevance classification pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name: str, help: str, description: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help, description=description)
        _config_opt(p)
        return p

    p = add("clean", "clean a raw dataset", "Strip, collapse whitespace and lowercase; drop records whose query "
            "or target is empty. Writes the canonical dataset file.")
    _task_opt(p)
    p.add_argument("--in", dest="in_", required=True, metavar="FILE")
    p.add_argument("--out", required=True, metavar="FILE")
    p.add_argument("--report", metavar="FILE", help="JSON summary (records kept/dropped)")
    p.set_defaults(func=cmd_clean)

    p = add("split", "assign groups to folds", "Group records (query for qi, category prefix for qc) and "
            "assign whole groups to k folds, stratified by language x label.")
    _task_opt(p)
    p.add_argument("--in", dest="in_", required=True, metavar="FILE")
    p.add_argument("--out-folds", required=True, metavar="FILE", help="group assignment file")
    p.add_argument("--out-record-folds", metavar="FILE", help="also write per-record folds")
    p.add_argument("--k", dest="k", type=int, default=None)
    p.add_argument("--prefix-n", dest="prefix_n", type=int, default=None)
    p.add_argument("--seed", dest="seed", type=int, default=None)
    p.add_argument("--raw-query", dest="raw_query", action="store_const", const=True, default=None,
                   help="group qi records by uncleaned query text")
    p.add_argument("--stratify", dest="stratify", choices=["joint", "marginal"], default=None)
    p.add_argument("--restarts", dest="restarts", type=int, default=None, help="extra seeded random restarts")
    p.add_argument("--delimiter", dest="delimiter", default=None)
    p.set_defaults(func=cmd_split)

    p = add("audit", "check a split for leakage", "Recompute group spans from the records and report leakage "
            "violations, per-fold label rates and language mix. Exits 2 when any group spans folds.")
    _task_opt(p)
    p.add_argument("--folds", required=True, metavar="FILE")
    p.add_argument("--in", dest="in_", required=True, metavar="FILE")
    p.add_argument("--report", required=True, metavar="FILE")
    p.add_argument("--prefix-n", type=int, default=None, help="override the prefix length stored in the fold file")
    p.add_argument("--raw-query", dest="raw_query", action="store_const", const=True, default=None)
    p.add_argument("--stratify", dest="stratify", choices=["joint", "marginal"], default=None)
    p.add_argument("--delimiter", dest="delimiter", default=None)
    p.set_defaults(func=cmd_audit)

    p = add("encode", "featurize a dataset", "Build '[CLS] query - english [SEP] target [SEP]' inputs and write "
            "hashed feature vectors (base64 of little-endian float32, one record per line).")
    _task_opt(p)
    p.add_argument("--in", dest="in_", required=True, metavar="FILE")
    p.add_argument("--out", required=True, metavar="FILE")
    _featurizer_opts(p)
    p.set_defaults(func=cmd_encode)

    p = add("train", "train a classifier", "Train on every record outside --fold (or all records). --in may be "
            "an encoded file or a raw dataset (featurized in process).")
    _task_opt(p)
    p.add_argument("--in", dest="in_", required=True, metavar="FILE")
    _fold_opts(p, "held-out fold; training uses the others")
    p.add_argument("--init", metavar="CKPT", help="continue from this checkpoint")
    p.add_argument("--out", required=True, metavar="CKPT")
    _featurizer_opts(p)
    _train_opts(p, "train")
    p.set_defaults(func=cmd_train)

    p = add("tapt", "two-stage training", "Train on the auxiliary dataset, then continue on the target "
            "dataset (records outside --fold).")
    _task_opt(p)
    p.add_argument("--aux-task", choices=["qc", "qi"], help="task of a raw auxiliary dataset (default: --task)")
    p.add_argument("--aux", required=True, metavar="FILE")
    p.add_argument("--target", required=True, metavar="FILE")
    _fold_opts(p, "held-out target fold")
    p.add_argument("--out", required=True, metavar="CKPT")
    p.add_argument("--stage1-out", metavar="CKPT", help="also save the stage-1 checkpoint")
    _featurizer_opts(p)
    _train_opts(p, "stage1", "stage1-")
    _train_opts(p, "stage2", "stage2-")
    p.set_defaults(func=cmd_tapt)

    p = add("predict", "label records with a checkpoint", "Write (id, label, probability) lines; label is 1 "
            "iff probability >= threshold. With --folds/--fold only the held-out fold is predicted.")
    _task_opt(p)
    p.add_argument("--ckpt", required=True, metavar="CKPT")
    p.add_argument("--in", dest="in_", required=True, metavar="FILE")
    p.add_argument("--out", required=True, metavar="FILE")
    _fold_opts(p, "fold to predict")
    p.add_argument("--threshold", dest="threshold", type=float, default=None)
    p.add_argument("--tune-threshold", dest="tune_threshold", action="store_const", const=True, default=None,
                   help="pick the F1-maximizing threshold on --tune-on validation data")
    p.add_argument("--tune-on", metavar="FILE", help="labeled validation data for threshold tuning")
    _featurizer_opts(p)
    p.set_defaults(func=cmd_predict)

    p = add("eval", "score predictions", "Positive-class precision, recall and F1, per fold (with --folds) and "
            "pooled. Writes a text report and REPORT.jsonl.")
    _task_opt(p)
    p.add_argument("--pred", required=True, metavar="FILE")
    p.add_argument("--truth", required=True, metavar="FILE", help="labeled dataset or any id/label JSON lines")
    p.add_argument("--out", required=True, metavar="REPORT")
    p.add_argument("--folds", metavar="FILE")
    p.add_argument("--all-folds", action="store_true", help="require predictions for every truth record")
    p.add_argument("--title", default="positive-class F1")
    p.set_defaults(func=cmd_eval)

    p = add("eval-avg", "average the two task scores", "Equal-weight mean of the qc and qi headline F1 "
            "(mean fold F1) read from two eval reports.")
    p.add_argument("--qc", required=True, metavar="REPORT")
    p.add_argument("--qi", required=True, metavar="REPORT")
    p.add_argument("--out", metavar="FILE", help="JSON result")
    p.set_defaults(func=cmd_eval_avg)

    p = add("synth", "generate a synthetic corpus pair", "Planted-signal qc (auxiliary) and qi (target) "
            "datasets; the same seed gives identical files.")
    p.add_argument("--seed", dest="seed", type=int, default=None)
    p.add_argument("--out-aux", required=True, metavar="FILE")
    p.add_argument("--out-target", required=True, metavar="FILE")
    p.add_argument("--overlap", dest="synth.overlap", type=float, default=None, help="shared vocabulary fraction")
    p.add_argument("--records", dest="synth.records_per_task", type=int, default=None)
    p.add_argument("--vocab-size", dest="synth.vocab_size", type=int, default=None)
    p.add_argument("--languages", dest="synth.n_languages", type=int, default=None)
    p.add_argument("--label-noise", dest="synth.label_noise", type=float, default=None)
    p.set_defaults(func=cmd_synth)

    p = add("reproduce", "run the whole experiment", "synth, clean, split, audit, encode, direct vs two-stage "
            "training per fold, eval and eval-avg over several seeds and two vocabulary overlaps; writes "
            "OUT/report.txt and OUT/report.json. Exits 3 when a check fails.")
    p.add_argument("--seed", type=int, default=None, help="first seed (default 7)")
    p.add_argument("--n-seeds", type=int, default=5)
    p.add_argument("--out", default="reproduce-out", metavar="DIR")
    p.add_argument("--no-checkpoints", action="store_true", help="skip writing per-fold checkpoints")
    p.add_argument("--inject-leakage", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = effective_config(args)
        return args.func(args, cfg)
    except UsageError as exc:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.print_usage(sys.stderr)
        _say(f"relsplit {args.command}: error: {exc}")
        return EXIT_USAGE
    except DataError as exc:
        _say(f"relsplit {args.command}: data error: {exc}")
        return EXIT_DATA
    except InvariantViolation as exc:
        _say(f"relsplit {args.command}: invariant violation: {exc}")
        return EXIT_INVARIANT
    except OSError as exc:
        _say(f"relsplit {args.command}: {exc}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
