"""On-disk phantom cohorts: image pairs, ground-truth fields and the tables describing them."""

from __future__ import annotations

import csv
from pathlib import Path

from . import io
from .labels import ExamRow, write_exam_rows
from .records import ExamPair, SurvivalLabel

PAIR_FIELDS = ["patient_id", "exam_id", "current_path", "prior_path", "gap_months",
               "followup_years", "years_to_cancer", "density"]
BASE_YEAR = 2010


def exam_rows_for(pair: ExamPair, current_path: str, prior_path: str) -> list:
    """Screening rows for one phantom patient: prior, current and (for cancers) the diagnosis.

    Screens are BI-RADS 2; a cancer adds an image-less BI-RADS 6 exam in the
    diagnosis year so that the screening-table label rules recover the outcome.
    """
    gap_years = max(1, int(round(pair.gap_months / 12.0)))
    cur_year = BASE_YEAR + gap_years
    rows = [
        ExamRow(pair.patient_id, f"{pair.exam_id}-prior", BASE_YEAR, "CC", "L", prior_path, 2, None, None,
                pair.density_category),
        ExamRow(pair.patient_id, pair.exam_id, cur_year, "CC", "L", current_path, 2, None, None,
                pair.density_category),
    ]
    ttc = pair.label.years_to_cancer
    if ttc is not None:
        rows.append(ExamRow(pair.patient_id, f"{pair.exam_id}-dx", cur_year + ttc, "CC", "L", "", 6, None,
                            None, pair.density_category))
    return rows


def write_cohort(out_dir, cohort) -> Path:
    """Write ``[(ExamPair, true_field)]`` as PNGs, DF2D fields, ``pairs.csv`` and ``cohort.csv``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "fields").mkdir(exist_ok=True)
    pair_rows, exam_rows = [], []
    for pair, tfield in cohort:
        cur = f"images/{pair.exam_id}_current.png"
        pri = f"images/{pair.exam_id}_prior.png"
        io.save_image(out / cur, pair.current)
        io.save_image(out / pri, pair.prior)
        io.write_df2d(out / "fields" / f"{pair.exam_id}.df2d", tfield)
        ttc = pair.label.years_to_cancer
        pair_rows.append({
            "patient_id": pair.patient_id, "exam_id": pair.exam_id, "current_path": cur, "prior_path": pri,
            "gap_months": repr(float(pair.gap_months)), "followup_years": repr(float(pair.label.followup_years)),
            "years_to_cancer": "" if ttc is None else ttc, "density": pair.density_category or "",
        })
        exam_rows.extend(exam_rows_for(pair, cur, pri))
    with open(out / "pairs.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=PAIR_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(pair_rows)
    write_exam_rows(out / "cohort.csv", exam_rows)
    return out


def read_outcomes(path) -> dict:
    """``exam_id -> (SurvivalLabel, density)`` from any CSV with exam_id, followup_years, years_to_cancer."""
    out = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            ttc = rec.get("years_to_cancer", "")
            label = SurvivalLabel.from_times(float(rec["followup_years"]), int(ttc) if ttc not in ("", None) else None)
            out[rec["exam_id"]] = (label, rec.get("density") or None)
    return out


def read_pairs(path, exam_ids=None) -> list:
    """Load ``pairs.csv`` into ExamPairs (image paths relative to the CSV), sorted by exam_id."""
    path = Path(path)
    root = path.parent
    pairs = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            if exam_ids is not None and rec["exam_id"] not in exam_ids:
                continue
            ttc = rec["years_to_cancer"]
            label = SurvivalLabel.from_times(float(rec["followup_years"]), int(ttc) if ttc else None)
            pairs.append(ExamPair(
                io.load_image(root / rec["current_path"]), io.load_image(root / rec["prior_path"]),
                float(rec["gap_months"]), label, rec["patient_id"], rec["exam_id"], rec["density"] or None,
            ))
    return sorted(pairs, key=lambda p: (p.patient_id, p.exam_id))
