"""Discrete-horizon survival evaluation: C-index, per-horizon AUC, precision/recall, bootstrap CIs."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import partial

import numpy as np

from .records import SurvivalLabel

log = logging.getLogger(__name__)

UNDEFINED = float("nan")


class UndefinedMetricError(ValueError):
    """The metric has no defined value on this sample (e.g. one class only)."""


class BootstrapInstabilityError(RuntimeError):
    pass


@dataclass
class EvalRecord:
    risk: object  # fused-head RiskOutput, or its (T,) probabilities directly
    label: SurvivalLabel
    density_category: str | None = None
    strategy: str | None = None
    exam_id: str | None = None

    @property
    def prob(self) -> np.ndarray:
        return np.asarray(getattr(self.risk, "prob", self.risk), dtype=np.float64)


@dataclass
class MetricWithCI:
    point: float
    ci_low: float
    ci_high: float
    resamples: int = 1000
    skipped: int = 0
    n: int = 0


def _stack(records):
    prob = np.stack([r.prob for r in records])
    y = np.stack([r.label.y for r in records])
    delta = np.stack([r.label.delta for r in records])
    return prob, y, delta


def _pair_wins(cases: np.ndarray, controls: np.ndarray) -> float:
    """Sum over case/control pairs of 1 (case higher), 0.5 (tie), 0 (lower)."""
    b = np.sort(controls)
    lo = np.searchsorted(b, cases, side="left")
    hi = np.searchsorted(b, cases, side="right")
    return float(lo.sum()) + 0.5 * float((hi - lo).sum())


def _first_event(y: np.ndarray) -> np.ndarray:
    """0-based first horizon with y=1, or -1."""
    has = y.max(axis=1) > 0
    return np.where(has, y.argmax(axis=1), -1)


def c_index(records) -> float:
    """Concordance over comparable pairs on the discrete horizon grid.

    A pair (i, j) is comparable when i has its event at horizon t and j is
    observed event-free at t; the pair is scored on both records' ``prob(t)``.
    """
    records = list(records)
    if len(records) < 2:
        raise UndefinedMetricError("c_index needs at least two records")
    prob, y, delta = _stack(records)
    ev = _first_event(y)
    wins = 0.0
    pairs = 0
    for t in range(y.shape[1]):
        cases = prob[ev == t, t]
        ctrl = prob[(delta[:, t] > 0) & (y[:, t] == 0), t]
        if cases.size and ctrl.size:
            wins += _pair_wins(cases, ctrl)
            pairs += cases.size * ctrl.size
    if pairs == 0:
        raise UndefinedMetricError("no comparable pairs")
    return wins / pairs


def auc_at_horizon(records, t: int) -> float:
    """Mann-Whitney AUC of ``prob(t)`` (``t`` 1-based) among records observed at ``t``."""
    prob, y, delta = _stack(list(records))
    k = t - 1
    obs = delta[:, k] > 0
    pos = prob[obs & (y[:, k] > 0), k]
    neg = prob[obs & (y[:, k] == 0), k]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError(f"horizon {t} has a single class")
    return _pair_wins(pos, neg) / (pos.size * neg.size)


def precision_recall_at_horizon(records, t: int, threshold: float = 0.5):
    """``(precision, recall)`` at ``prob(t) >= threshold``; undefined values are NaN."""
    prob, y, delta = _stack(list(records))
    k = t - 1
    obs = delta[:, k] > 0
    if not obs.any():
        raise UndefinedMetricError(f"no records observed at horizon {t}")
    pred = prob[obs, k] >= threshold
    truth = y[obs, k] > 0
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    precision = tp / (tp + fp) if tp + fp else UNDEFINED
    recall = tp / (tp + fn) if tp + fn else UNDEFINED
    return precision, recall


def threshold_sweep(records, t: int, thresholds=None) -> list:
    thresholds = np.linspace(0.0, 1.0, 21) if thresholds is None else thresholds
    rows = []
    for th in thresholds:
        p, r = precision_recall_at_horizon(records, t, float(th))
        rows.append({"horizon": t, "threshold": float(th), "precision": p, "recall": r})
    return rows


def bootstrap_ci(records, metric, resamples: int = 1000, seed: int = 0, level: float = 0.95) -> MetricWithCI:
    """Percentile bootstrap over records; resample ``i`` draws from ``rng([seed, i])``.

    Resamples on which the metric is undefined are skipped and counted.
    """
    records = list(records)
    point = metric(records)
    n = len(records)
    vals = []
    skipped = 0
    for i in range(resamples):
        idx = np.random.default_rng([seed, i]).integers(0, n, size=n)
        try:
            v = metric([records[j] for j in idx])
        except UndefinedMetricError:
            skipped += 1
            continue
        if isinstance(v, float) and math.isnan(v):
            skipped += 1
            continue
        vals.append(v)
    if skipped > resamples / 2:
        raise BootstrapInstabilityError(f"{skipped}/{resamples} resamples undefined")
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(np.asarray(vals), [tail, 100.0 - tail])
    return MetricWithCI(float(point), float(lo), float(hi), resamples, skipped, n)


def metric_by_name(name: str):
    """``c_index``, ``auc_<t>``, ``precision_<t>`` or ``recall_<t>``."""
    if name == "c_index":
        return c_index
    kind, _, t = name.rpartition("_")
    t = int(t)
    if kind == "auc":
        return partial(auc_at_horizon, t=t)
    if kind in ("precision", "recall"):
        pos = 0 if kind == "precision" else 1

        def pr(records, t=t, pos=pos):
            return precision_recall_at_horizon(records, t)[pos]
        return pr
    raise ValueError(f"unknown metric {name!r}")


def _group_value(rec: EvalRecord, key: str):
    if key == "density":
        return rec.density_category
    if key == "strategy":
        return rec.strategy
    raise ValueError(f"unknown group key {key!r}")


def stratified_report(records, group_key: str, metrics=("c_index",), resamples: int = 1000,
                      seed: int = 0, min_group_size: int = 10, groups=None) -> list:
    """Rows ``metric, group, point, ci_low, ci_high, n, flag`` per group and metric.

    ``group_key='horizon'`` reports per-horizon AUC over all records. Groups
    listed in ``groups`` but empty get a warning row; small groups are flagged.
    """
    records = list(records)
    rows = []
    if group_key == "horizon":
        t_max = records[0].label.t_max if records else 5
        parts = {str(t): (records, f"auc_{t}") for t in range(1, t_max + 1)}
        for g, (recs, m) in parts.items():
            rows.append(_report_row(recs, m, g, resamples, seed, min_group_size))
        return rows
    buckets = {}
    for r in records:
        buckets.setdefault(_group_value(r, group_key), []).append(r)
    names = list(groups) if groups is not None else sorted(buckets, key=lambda v: (v is None, str(v)))
    for g in names:
        recs = buckets.get(g, [])
        for m in metrics:
            if not recs:
                log.warning("group %r is empty", g)
                rows.append({"metric": m, "group": str(g), "point": UNDEFINED, "ci_low": UNDEFINED,
                             "ci_high": UNDEFINED, "n": 0, "flag": "empty"})
                continue
            rows.append(_report_row(recs, m, str(g), resamples, seed, min_group_size))
    return rows


def _report_row(recs, metric_name, group, resamples, seed, min_group_size) -> dict:
    row = {"metric": metric_name, "group": group, "n": len(recs), "flag": ""}
    try:
        ci = bootstrap_ci(recs, metric_by_name(metric_name), resamples, seed)
        row.update(point=ci.point, ci_low=ci.ci_low, ci_high=ci.ci_high)
    except (UndefinedMetricError, BootstrapInstabilityError) as exc:
        row.update(point=UNDEFINED, ci_low=UNDEFINED, ci_high=UNDEFINED, flag=f"undefined: {exc}")
    if len(recs) < min_group_size and not row["flag"]:
        row["flag"] = "small"
    return row
