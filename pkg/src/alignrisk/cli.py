"""Command-line entry point: ``alignrisk <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import cohort as C
from . import io
from . import labels as L
from . import metrics as M
from . import pipelines as P
from .experiment import ExperimentConfig, run_experiment
from .phantom import CohortConfig, generate_cohort
from .preprocess import preprocess_image
from .records import T_MAX
from .registration import RegistrationConfig, register
from .survival import EvalRecord, stratified_report

log = logging.getLogger("alignrisk")


# ---------------------------------------------------------------- config helpers

def _add_dataclass_flags(parser, cls, prefix=""):
    """One ``--name`` flag per dataclass field; unset flags stay ``None``."""
    for f in dataclasses.fields(cls):
        if f.name == "extra":
            continue
        flag = "--" + (prefix + f.name).replace("_", "-")
        default = f.default if f.default is not dataclasses.MISSING else None
        if isinstance(default, tuple):
            parser.add_argument(flag, dest=prefix + f.name, type=type(default[0]), nargs=len(default), default=None)
        else:
            ann = str(f.type)
            kind = float if "float" in ann else int if "int" in ann else str
            parser.add_argument(flag, dest=prefix + f.name, type=kind, default=None)


def _overrides(args, cls, prefix="") -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        v = getattr(args, prefix + f.name, None)
        if v is not None:
            out[f.name] = tuple(v) if isinstance(v, list) else v
    return out


def _load_json(path) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _reg_config(args, prefix="") -> RegistrationConfig:
    d = _load_json(getattr(args, "config", None))
    d = d.get("registration", {} if prefix else d)
    return RegistrationConfig.from_dict({**d, **_overrides(args, RegistrationConfig, prefix)})


def _train_config(args) -> P.TrainConfig:
    d = _load_json(getattr(args, "config", None))
    d = d.get("train", {})
    return P.TrainConfig(**{**d, **_overrides(args, P.TrainConfig)})


def _exam_filter(args):
    if not getattr(args, "split", None):
        return None
    with open(args.split, newline="") as fh:
        patients = {r["patient_id"] for r in csv.DictReader(fh) if r["split"] == args.split_name}
    ids = set()
    with open(args.pairs, newline="") as fh:
        for r in csv.DictReader(fh):
            if r["patient_id"] in patients:
                ids.add(r["exam_id"])
    return ids


def _fields_for(pairs, strategy: P.StrategyKind, args):
    """Registration fields for Img* strategies, read from ``--fields-dir`` or computed."""
    if not strategy.uses_registration:
        return None
    out = []
    cfg = _reg_config(args, "reg_")
    for p in pairs:
        path = Path(args.fields_dir) / f"{p.exam_id}.df2d" if args.fields_dir else None
        if path is not None and path.exists():
            out.append(io.read_df2d(path))
        else:
            out.append(register(p.current, p.prior, cfg).final_field)
    return out


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _num(v):
    return "nan" if isinstance(v, float) and np.isnan(v) else (repr(v) if isinstance(v, float) else v)


# ---------------------------------------------------------------- subcommands

def cmd_phantom(args):
    cfg = CohortConfig(**_overrides(args, CohortConfig))
    out = C.write_cohort(args.out, generate_cohort(cfg))
    print(f"wrote {cfg.n_exams} pairs to {out}")


def cmd_labels(args):
    rows = L.read_exam_rows(args.rows)
    if args.scheme == "embed":
        labels, excluded = L.embed_labels(rows, args.reclass_window)
    else:
        labels, excluded = L.csaw_labels(rows, args.final_year)
    L.write_labels(args.out, labels)
    if args.excluded:
        _write_rows(args.excluded, ["exam_id"], [[e] for e in excluded])
    print(f"{len(labels)} labelled exams, {len(excluded)} excluded")


def cmd_split(args):
    with open(args.rows, newline="") as fh:
        patients = [r["patient_id"] for r in csv.DictReader(fh)]
    parts = L.split_cohort(patients, tuple(args.ratios), args.seed)
    rows = [[pid, name] for name, ids in zip(("train", "val", "test"), parts) for pid in ids]
    _write_rows(args.out, ["patient_id", "split"], rows)
    print("train/val/test patients: " + "/".join(str(len(p)) for p in parts))


def cmd_preprocess(args):
    img = preprocess_image(io.load_image(args.input), (args.width, args.height), args.threshold)
    io.save_image(args.out, img)


def cmd_register(args):
    cfg = _reg_config(args)
    fixed, moving = io.load_image(args.fixed), io.load_image(args.moving)
    res = register(fixed, moving, cfg)
    io.write_df2d(args.out_field, res.final_field)
    if args.out_warped:
        io.save_image(args.out_warped, np.clip(res.warped_final, 0.0, 1.0))
    if args.report:
        q = res.quality.as_dict()
        q.update({"affine_" + k: float(v) for k, v in zip(("a00", "a01", "a10", "a11", "tx", "ty"), res.affine.params)})
        _write_rows(args.report, list(q), [[_num(float(v)) for v in q.values()]])
    print(" ".join(f"{k}={v:.4f}" for k, v in res.quality.as_dict().items()))


def cmd_train(args):
    strategy = P.StrategyKind(args.strategy)
    pairs = C.read_pairs(args.pairs, _exam_filter(args))
    cfg = _train_config(args)
    model = P.train(strategy, pairs, cfg, fields=_fields_for(pairs, strategy, args))
    io.write_checkpoint(args.out, P.model_tensors(model))
    if args.loss_curve:
        _write_rows(args.loss_curve, ["epoch", "loss"], [[i, repr(v)] for i, v in enumerate(model.loss_curve)])
    print(f"trained {strategy.value} on {len(pairs)} pairs; final loss {model.loss_curve[-1]:.5f}")


def cmd_predict(args):
    strategy = P.StrategyKind(args.strategy)
    pairs = C.read_pairs(args.pairs, _exam_filter(args))
    model = P.model_from_tensors(strategy, io.read_checkpoint(args.model))
    preds = P.predict_batch(model, pairs, fields=_fields_for(pairs, strategy, args))
    rows = []
    for pair, pr in zip(pairs, preds):
        for head in ("fused", "current", "prior"):
            rows.append([pair.patient_id, pair.exam_id, strategy.value]
                        + [repr(float(v)) for v in getattr(pr, head).prob] + [head])
    header = ["patient_id", "exam_id", "strategy"] + [f"p{t}" for t in range(1, T_MAX + 1)] + ["head"]
    _write_rows(args.out, header, rows)


def cmd_evaluate(args):
    outcomes = C.read_outcomes(args.labels)
    records = []
    with open(args.predictions, newline="") as fh:
        for r in csv.DictReader(fh):
            if r["head"] != args.head or r["exam_id"] not in outcomes:
                continue
            label, density = outcomes[r["exam_id"]]
            prob = np.array([float(r[f"p{t}"]) for t in range(1, T_MAX + 1)])
            records.append(EvalRecord(prob, label, density, r["strategy"], r["exam_id"]))
    if not records:
        raise SystemExit("no prediction rows matched the label table")
    metrics = ["c_index"] + [f"auc_{t}" for t in range(1, T_MAX + 1)]
    rows = stratified_report(records, args.group_by, metrics, args.resamples, args.seed, args.min_group_size)
    header = ["metric", "group", "point", "ci_low", "ci_high", "n", "flag"]
    _write_rows(args.out, header, [[_num(r[h]) for h in header] for r in rows])


def cmd_deform_metrics(args):
    header = ["field", "njd_percent", "jacobian_std", "smoothness", "jd_penalty", "ncc"]
    rows = []
    fixed = io.load_image(args.fixed) if args.fixed else None
    moving = io.load_image(args.moving) if args.moving else None
    for path in args.fields:
        rep = M.field_report(io.read_df2d(path), fixed, moving)
        rows.append([path] + [_num(rep[k]) if rep.get(k) is not None else "" for k in header[1:]])
    _write_rows(args.out, header, rows)


def cmd_run(args):
    d = _load_json(args.config)
    cohort = {**d.get("cohort", {}), **_overrides(args, CohortConfig, "cohort_")}
    train = {**d.get("train", {}), **_overrides(args, P.TrainConfig, "train_")}
    reg = {**d.get("registration", {}), **_overrides(args, RegistrationConfig, "reg_")}
    top = {k: v for k, v in d.items() if k not in ("cohort", "train", "registration")}
    if args.strategies:
        top["strategies"] = args.strategies
    for k in ("split_seed", "eval_seed", "bootstrap_resamples", "registration_cache", "min_group_size"):
        if getattr(args, k) is not None:
            top[k] = getattr(args, k)
    cfg = ExperimentConfig.from_dict({**top, "cohort": cohort, "train": train, "registration": reg})
    report = run_experiment(cfg, args.out)
    for r in report.results:
        print(f"{r['strategy']:13s} C-index {r['c_index']:.3f} [{r['c_index_ci_low']:.3f}, {r['c_index_ci_high']:.3f}]")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="alignrisk", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a phantom cohort directory")
    p.add_argument("--out", required=True)
    _add_dataclass_flags(p, CohortConfig)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("labels", help="derive time-to-cancer labels from a screening table")
    p.add_argument("--scheme", choices=("embed", "csaw"), required=True)
    p.add_argument("--rows", required=True, help="CSV with the exam-row columns")
    p.add_argument("--out", required=True)
    p.add_argument("--excluded")
    p.add_argument("--final-year", type=int, default=2016)
    p.add_argument("--reclass-window", type=int, default=1, help="years to look ahead for a BI-RADS 0 follow-up")
    p.set_defaults(func=cmd_labels)

    p = sub.add_parser("split", help="patient-level train/val/test split")
    p.add_argument("--rows", required=True, help="any CSV with a patient_id column")
    p.add_argument("--out", required=True)
    p.add_argument("--ratios", type=int, nargs=3, default=(5, 2, 3))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("preprocess", help="largest-region crop and canvas fit")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=1664)
    p.add_argument("--height", type=int, default=2048)
    p.add_argument("--threshold", type=float, default=0.1)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("register", help="register a moving (prior) image to a fixed (current) image")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--out-field", required=True)
    p.add_argument("--out-warped")
    p.add_argument("--report")
    p.add_argument("--config", help="JSON registration config; flags override it")
    _add_dataclass_flags(p, RegistrationConfig)
    p.set_defaults(func=cmd_register)

    strategies = [s.value for s in P.StrategyKind]
    for name, func in (("train", cmd_train), ("predict", cmd_predict)):
        p = sub.add_parser(name, help=f"{name} one strategy on a pairs.csv cohort")
        p.add_argument("--strategy", choices=strategies, required=True)
        p.add_argument("--pairs", required=True)
        p.add_argument("--split", help="split.csv; restricts to --split-name patients")
        p.add_argument("--split-name", default="train" if name == "train" else "test")
        p.add_argument("--fields-dir", help="precomputed DF2D registration fields named <exam_id>.df2d")
        p.add_argument("--config", help="JSON config (train and registration sections)")
        p.add_argument("--out", required=True)
        if name == "train":
            p.add_argument("--loss-curve")
            _add_dataclass_flags(p, P.TrainConfig)
        else:
            p.add_argument("--model", required=True)
        _add_dataclass_flags(p, RegistrationConfig, "reg_")
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", help="C-index and per-horizon AUC with bootstrap CIs")
    p.add_argument("--predictions", required=True)
    p.add_argument("--labels", required=True, help="CSV with exam_id, followup_years, years_to_cancer[, density]")
    p.add_argument("--out", required=True)
    p.add_argument("--group-by", choices=("strategy", "density", "horizon"), default="strategy")
    p.add_argument("--head", choices=("fused", "current", "prior"), default="fused")
    p.add_argument("--resamples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-group-size", type=int, default=10)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("deform-metrics", help="NJD, Jacobian std and smoothness of DF2D fields")
    p.add_argument("fields", nargs="+")
    p.add_argument("--fixed")
    p.add_argument("--moving")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_deform_metrics)

    p = sub.add_parser("run", help="full strategy comparison on a phantom cohort")
    p.add_argument("--config", help="JSON experiment config; flags override it")
    p.add_argument("--out", required=True)
    p.add_argument("--strategies", nargs="+", choices=strategies)
    p.add_argument("--split-seed", type=int)
    p.add_argument("--eval-seed", type=int)
    p.add_argument("--bootstrap-resamples", type=int)
    p.add_argument("--min-group-size", type=int)
    p.add_argument("--registration-cache")
    _add_dataclass_flags(p, CohortConfig, "cohort_")
    _add_dataclass_flags(p, P.TrainConfig, "train_")
    _add_dataclass_flags(p, RegistrationConfig, "reg_")
    p.set_defaults(func=cmd_run)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
