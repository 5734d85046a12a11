"""End-to-end strategy comparison on a phantom cohort.

Generate cohort, split by patient, register pairs for the image-alignment
strategies, train every strategy, predict the test split and report C-index
and per-horizon AUC with bootstrap intervals plus deformation quality.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field as dc_field, fields
from pathlib import Path

import numpy as np

from . import metrics as M
from . import pipelines as P
from .grid import resize_field
from .labels import split_cohort
from .phantom import CohortConfig, generate_cohort
from .records import T_MAX
from .registration import RegistrationConfig, register
from .survival import EvalRecord, stratified_report, threshold_sweep

log = logging.getLogger(__name__)

ALL_STRATEGIES = [s.value for s in P.StrategyKind]
HEADS = ("fused", "current", "prior")


class ExperimentStageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class ExperimentConfig:
    cohort: dict = dc_field(default_factory=dict)
    strategies: list = dc_field(default_factory=lambda: list(ALL_STRATEGIES))
    split_ratios: tuple = (5, 2, 3)
    split_seed: int = 0
    train: dict = dc_field(default_factory=dict)
    registration: dict = dc_field(default_factory=dict)
    bootstrap_resamples: int = 1000
    eval_seed: int = 0
    min_group_size: int = 10
    registration_cache: str | None = None

    def __post_init__(self):
        unknown = [s for s in self.strategies if s not in ALL_STRATEGIES]
        if unknown:
            raise ValueError(f"unknown strategies {unknown}")
        # resolve nested defaults so the emitted config records every value
        self.cohort = _resolved(CohortConfig, self.cohort)
        self.train = _resolved(P.TrainConfig, self.train)
        self.registration = _resolved(RegistrationConfig, self.registration)
        self.split_ratios = tuple(self.split_ratios)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        return d


def _resolved(cls, overrides: dict) -> dict:
    obj = cls(**overrides)
    d = asdict(obj)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def _cohort_config(d: dict) -> CohortConfig:
    d = dict(d)
    for k in ("radius_range", "growth_range", "followup_range", "gap_months_range"):
        d[k] = tuple(d[k])
    return CohortConfig(**d)


@dataclass
class ExperimentReport:
    config: dict
    results: list  # one row per strategy: C-index and per-horizon AUC with CIs
    deform_quality: list  # NJD and Jacobian std, one row per aligning strategy
    metrics: list  # long format: metric, group, point, ci_low, ci_high, n
    predictions: list
    pr_sweep: list
    splits: dict
    loss_curves: dict

    def result(self, strategy: str) -> dict:
        return next(r for r in self.results if r["strategy"] == strategy)

    def deform(self, strategy: str) -> dict:
        return next(r for r in self.deform_quality if r["strategy"] == strategy)


def _stage(name):
    def wrap(fn):
        def inner(*a, **kw):
            try:
                return fn(*a, **kw)
            except ExperimentStageError:
                raise
            except Exception as exc:  # noqa: BLE001  tag and re-raise
                raise ExperimentStageError(name, exc) from exc
        return inner
    return wrap


def _cache_key(cfg: ExperimentConfig) -> str:
    blob = json.dumps({"cohort": cfg.cohort, "registration": cfg.registration}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def registration_fields(pairs, reg_cfg: RegistrationConfig, cache_dir=None) -> dict:
    """``exam_id -> final field`` for every pair, reusing exact float64 copies from ``cache_dir``."""
    out = {}
    cache = Path(cache_dir) if cache_dir else None
    if cache:
        cache.mkdir(parents=True, exist_ok=True)
    for i, pair in enumerate(pairs):
        path = cache / f"{pair.exam_id}.npy" if cache else None
        if path is not None and path.exists():
            out[pair.exam_id] = np.load(path)
            continue
        res = register(pair.current, pair.prior, reg_cfg)
        out[pair.exam_id] = res.final_field
        if path is not None:
            np.save(path, res.final_field)
        if (i + 1) % 50 == 0:
            log.info("registered %d/%d pairs", i + 1, len(pairs))
    return out


def run_experiment(config, out_dir=None) -> ExperimentReport:
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_dict(config or {})
    tcfg = P.TrainConfig(**cfg.train)
    rcfg = RegistrationConfig(**cfg.registration)

    pairs = _stage("cohort")(lambda: sorted((p for p, _ in generate_cohort(_cohort_config(cfg.cohort))),
                                            key=lambda p: (p.patient_id, p.exam_id)))()
    train_ids, val_ids, test_ids = _stage("split")(split_cohort)(
        [p.patient_id for p in pairs], cfg.split_ratios, cfg.split_seed)
    test_set = set(test_ids)
    train_set, val_set = set(train_ids), set(val_ids)
    idx_train = np.array([i for i, p in enumerate(pairs) if p.patient_id in train_set])
    idx_val = np.array([i for i, p in enumerate(pairs) if p.patient_id in val_set])
    idx_test = np.array([i for i, p in enumerate(pairs) if p.patient_id in test_set])

    fields_by_id = {}
    if any(P.StrategyKind(s).uses_registration for s in cfg.strategies):
        cache = Path(cfg.registration_cache) / _cache_key(cfg) if cfg.registration_cache else None
        fields_by_id = _stage("register")(registration_fields)(pairs, rcfg, cache)
    fields_all = [fields_by_id.get(p.exam_id) for p in pairs]

    results, deform, metric_rows, pred_rows, sweep_rows, curves = [], [], [], [], [], {}
    records_by_strategy = {}
    for s in cfg.strategies:
        kind = P.StrategyKind(s)
        raw = _stage(f"encode:{s}")(P.encode_pairs)(kind, pairs, fields_all if kind.uses_registration else None)
        sub = lambda idx: {k: (None if v is None else v[idx]) for k, v in raw.items()}  # noqa: E731
        model = _stage(f"train:{s}")(P.train)(kind, [pairs[i] for i in idx_train], tcfg, raw=sub(idx_train),
                                              val=[pairs[i] for i in idx_val], val_raw=sub(idx_val))
        curves[s] = (list(model.loss_curve), list(model.val_curve), model.best_epoch)
        test_pairs = [pairs[i] for i in idx_test]
        preds = _stage(f"predict:{s}")(P.predict_batch)(model, test_pairs, raw=sub(idx_test))
        recs = []
        for pair, pr in zip(test_pairs, preds):
            for head in HEADS:
                prob = getattr(pr, head).prob
                pred_rows.append([pair.patient_id, pair.exam_id, s] + [_fmt(v) for v in prob] + [head])
            recs.append(EvalRecord(pr.fused, pair.label, pair.density_category, s, pair.exam_id))
        records_by_strategy[s] = recs
        results.append(_stage(f"evaluate:{s}")(_result_row)(s, recs, cfg))
        metric_rows.extend(_stage(f"evaluate:{s}")(_metric_rows)(s, recs, cfg))
        for t in range(1, T_MAX + 1):
            for r in threshold_sweep(recs, t):
                sweep_rows.append({"strategy": s, **r})
        row = _deform_row(kind, preds, [fields_all[i] for i in idx_test], raw["fc"].shape[2:])
        if row is not None:
            deform.append(row)

    report = ExperimentReport(cfg.to_dict(), results, deform, metric_rows, pred_rows, sweep_rows,
                              {"train": train_ids, "val": val_ids, "test": test_ids}, curves)
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def _fmt(v) -> str:
    v = float(v)
    return "nan" if np.isnan(v) else repr(v)


RESULT_METRICS = ["c_index"] + [f"auc_{t}" for t in range(1, T_MAX + 1)]


def _result_row(strategy, recs, cfg) -> dict:
    row = {"strategy": strategy, "n": len(recs)}
    for r in stratified_report(recs, "strategy", RESULT_METRICS, cfg.bootstrap_resamples, cfg.eval_seed,
                               cfg.min_group_size):
        m = r["metric"]
        row[m] = r["point"]
        row[f"{m}_ci_low"] = r["ci_low"]
        row[f"{m}_ci_high"] = r["ci_high"]
    return row


def _metric_rows(strategy, recs, cfg) -> list:
    rows = []
    for r in stratified_report(recs, "density", ["c_index"], cfg.bootstrap_resamples, cfg.eval_seed,
                               cfg.min_group_size, groups=["A", "B", "C", "D"]):
        rows.append({**r, "group": f"{strategy}/density={r['group']}"})
    for r in stratified_report(recs, "strategy", RESULT_METRICS, cfg.bootstrap_resamples, cfg.eval_seed,
                               cfg.min_group_size):
        rows.append(r)
    return rows


def _deform_row(kind: P.StrategyKind, preds, reg_fields, feat_shape):
    """Mean NJD and Jacobian std of the fields a strategy applies, on the grid it applies them."""
    if kind.uses_alignment_block:
        flds, grid = [p.field for p in preds], "feature"
    elif kind is P.StrategyKind.IMGALIGN:
        flds, grid = reg_fields, "image"
    elif kind is P.StrategyKind.IMGFEATALIGN:
        flds, grid = [resize_field(f, *feat_shape) for f in reg_fields], "feature"
    else:
        return None
    jms = [M.jacobian_map(f) for f in flds]
    return {
        "strategy": kind.value,
        "njd_percent": float(np.mean([M.njd_percent(j) for j in jms])),
        "jacobian_std": float(np.mean([M.jacobian_std(j) for j in jms])),
        "grid": grid,
        "n": len(flds),
    }


def write_report(report: ExperimentReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res_cols = ["strategy"] + [c for m in RESULT_METRICS for c in (m, f"{m}_ci_low", f"{m}_ci_high")] + ["n"]
    _write_csv(out / "results.csv", res_cols, report.results)
    _write_csv(out / "deform_quality.csv", ["strategy", "njd_percent", "jacobian_std", "grid", "n"],
               report.deform_quality)
    _write_csv(out / "metrics.csv", ["metric", "group", "point", "ci_low", "ci_high", "n", "flag"], report.metrics)
    _write_csv(out / "pr_sweep.csv", ["strategy", "horizon", "threshold", "precision", "recall"], report.pr_sweep)
    header = ["patient_id", "exam_id", "strategy"] + [f"p{t}" for t in range(1, T_MAX + 1)] + ["head"]
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(report.predictions)
    rows = [{"patient_id": pid, "split": name} for name, ids in report.splits.items() for pid in ids]
    _write_csv(out / "split.csv", ["patient_id", "split"], rows)
    curve_rows = []
    for s, (loss, val, best) in report.loss_curves.items():
        for i, v in enumerate(loss):
            curve_rows.append({"strategy": s, "epoch": i, "loss": v,
                               "val_c_index": val[i] if i < len(val) else float("nan"),
                               "selected": int(i == best)})
    _write_csv(out / "loss_curves.csv", ["strategy", "epoch", "loss", "val_c_index", "selected"], curve_rows)
    with open(out / "config.json", "w") as fh:
        json.dump(report.config, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[h]) if isinstance(r[h], float) else r[h] for h in header])
