"""Exam-level time-to-cancer labels from screening metadata, patient splits and CSV I/O."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from fractions import Fraction

import numpy as np


class LabelDataError(ValueError):
    pass


@dataclass
class ExamRow:
    patient_id: str
    exam_id: str
    exam_year: int
    view: str = "CC"
    laterality: str = "L"
    image_path: str = ""
    birads: int | None = None
    severity: int | None = None
    rad_timing: int | None = None
    density: str | None = None

    def __post_init__(self):
        if self.view not in ("CC", "MLO"):
            raise LabelDataError(f"exam {self.exam_id}: view must be CC or MLO, got {self.view!r}")
        if self.laterality not in ("L", "R"):
            raise LabelDataError(f"exam {self.exam_id}: laterality must be L or R, got {self.laterality!r}")
        if self.birads is not None and not 0 <= self.birads <= 6:
            raise LabelDataError(f"exam {self.exam_id}: BI-RADS {self.birads} out of range")


@dataclass(frozen=True)
class ExamLabel:
    patient_id: str
    exam_id: str
    exam_year: int
    years_to_cancer: int | None
    is_negative: bool
    followup_years: int


EXAM_ROW_FIELDS = [f.name for f in fields(ExamRow)]
LABEL_FIELDS = [f.name for f in fields(ExamLabel)]
_INT_FIELDS = ("exam_year", "birads", "severity", "rad_timing")


def _by_patient(rows):
    groups = {}
    for r in rows:
        groups.setdefault(r.patient_id, []).append(r)
    return groups


def _emit(patient_rows, cancer_year, negative_exams, excluded):
    """Exam labels for one patient; multiple rows (views) of an exam collapse to one label."""
    last_year = max(r.exam_year for r in patient_rows)
    out = {}
    for r in sorted(patient_rows, key=lambda r: (r.exam_year, r.exam_id)):
        if r.exam_id in out:
            continue
        if cancer_year is not None and r.exam_year <= cancer_year:
            ttc = cancer_year - r.exam_year
            out[r.exam_id] = ExamLabel(r.patient_id, r.exam_id, r.exam_year, ttc, False,
                                       max(last_year - r.exam_year, ttc))
        elif cancer_year is None and r.exam_id in negative_exams:
            out[r.exam_id] = ExamLabel(r.patient_id, r.exam_id, r.exam_year, None, True,
                                       last_year - r.exam_year)
    for r in patient_rows:
        if r.exam_id not in out and r.exam_id not in excluded:
            excluded.append(r.exam_id)
    return out


def _embed_positive(r: ExamRow) -> bool:
    return r.birads == 6 or r.severity in (0, 1)


def _reclassified_negative(r: ExamRow, patient_rows, window_years: int) -> bool:
    later = [o for o in patient_rows
             if o.laterality == r.laterality and o.birads is not None and o.exam_id != r.exam_id
             and r.exam_year < o.exam_year <= r.exam_year + window_years]
    if not later:
        return False
    nearest = min(later, key=lambda o: (o.exam_year, o.exam_id))
    return nearest.birads in (1, 2)


def embed_labels(rows, reclass_window_years: int = 1):
    """Labels from BI-RADS and pathology severity; returns ``(labels by exam_id, excluded exam_ids)``.

    Positives are BI-RADS 6 or severity 0/1, and the patient's cancer year is
    the latest positive exam year; every exam up to it gets ``cancer_year -
    exam_year``. In patients without a positive, BI-RADS 1/2 exams are negative
    and so are BI-RADS 0 exams whose nearest later same-breast exam within the
    window is BI-RADS 1/2. Anything else is excluded.
    """
    labels, excluded = {}, []
    for pid, prow in sorted(_by_patient(rows).items()):
        per_breast = {}
        for r in prow:
            pos = _embed_positive(r)
            neg = r.birads in (1, 2) or (r.birads == 0 and _reclassified_negative(r, prow, reclass_window_years))
            if pos and r.birads in (1, 2):
                raise LabelDataError(f"exam {r.exam_id} is both positive and negative")
            key = (r.exam_id, r.laterality)
            prev = per_breast.get(key)
            if prev is not None and ((prev[0] and neg) or (prev[1] and pos)):
                raise LabelDataError(f"exam {r.exam_id} ({r.laterality}) has contradictory rows")
            per_breast[key] = (pos or (prev[0] if prev else False), neg or (prev[1] if prev else False))
        positives = [r.exam_year for r in prow if _embed_positive(r)]
        cancer_year = max(positives) if positives else None
        negative_exams = {k[0] for k, (p, n) in per_breast.items() if n and not p}
        labels.update(_emit(prow, cancer_year, negative_exams, excluded))
    return labels, excluded


def csaw_labels(rows, final_study_year: int = 2016):
    """Labels from the cancer timing code; returns ``(labels by exam_id, excluded exam_ids)``.

    The latest exam carrying a timing code sets the cancer year: screen-detected
    (1) is that exam's year, interval (2) is the following year capped at
    ``final_study_year``. Patients without a code are negative.
    """
    labels, excluded = {}, []
    for pid, prow in sorted(_by_patient(rows).items()):
        coded = [r for r in prow if r.rad_timing is not None]
        for r in coded:
            if r.rad_timing not in (1, 2):
                raise LabelDataError(f"exam {r.exam_id}: unknown rad_timing {r.rad_timing!r}")
        cancer_year = None
        if coded:
            last = max(coded, key=lambda r: (r.exam_year, r.exam_id))
            cancer_year = last.exam_year if last.rad_timing == 1 else min(last.exam_year + 1, final_study_year)
        negative_exams = set() if coded else {r.exam_id for r in prow}
        labels.update(_emit(prow, cancer_year, negative_exams, excluded))
    return labels, excluded


def largest_remainder(n: int, ratios) -> list:
    """Integer sizes summing to ``n`` in proportion to ``ratios`` (Hamilton's method)."""
    # exact rationals so that equal remainders tie and fall to the lower index
    parts = [Fraction(str(r)) for r in ratios]
    if any(r < 0 for r in parts) or sum(parts) == 0:
        raise ValueError(f"ratios must be nonnegative with a positive sum, got {list(ratios)}")
    quotas = [n * r / sum(parts) for r in parts]
    sizes = [math.floor(q) for q in quotas]
    for k in sorted(range(len(parts)), key=lambda k: (-(quotas[k] - sizes[k]), k))[: n - sum(sizes)]:
        sizes[k] += 1
    return sizes


def split_cohort(patients, ratios=(5, 2, 3), seed: int = 0):
    """Disjoint ``(train, val, test)`` patient lists; input order does not matter."""
    ids = sorted(set(patients))
    if len(ids) < 10:
        raise ValueError(f"need at least 10 patients to split, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    sizes = largest_remainder(len(ids), ratios)
    out, start = [], 0
    for s in sizes:
        out.append(sorted(ids[i] for i in order[start:start + s]))
        start += s
    return tuple(out)


# ---------------------------------------------------------------- CSV

def _parse(value: str, name: str):
    if value == "":
        return None
    return int(value) if name in _INT_FIELDS else value


def read_exam_rows(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(EXAM_ROW_FIELDS[:3]) - set(reader.fieldnames or [])
        if missing:
            raise LabelDataError(f"{path}: missing columns {sorted(missing)}")
        rows = []
        for rec in reader:
            kw = {k: _parse(v, k) for k, v in rec.items() if k in EXAM_ROW_FIELDS}
            kw["patient_id"] = str(rec["patient_id"])
            kw["exam_id"] = str(rec["exam_id"])
            for k in ("view", "laterality", "image_path"):
                if kw.get(k) is None:
                    kw.pop(k, None)
            rows.append(ExamRow(**kw))
    return rows


def write_exam_rows(path, rows) -> None:
    _write_dicts(path, EXAM_ROW_FIELDS, [asdict(r) for r in rows])


def write_labels(path, labels) -> None:
    items = sorted(labels.values(), key=lambda l: (l.patient_id, l.exam_year, l.exam_id))
    _write_dicts(path, LABEL_FIELDS, [asdict(l) for l in items])


def _write_dicts(path, header, dicts) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        for d in dicts:
            w.writerow({k: ("" if d[k] is None else d[k]) for k in header})
