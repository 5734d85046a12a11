import csv

import numpy as np
import pytest

from alignrisk import io
from alignrisk import metrics as M
from alignrisk.cohort import read_outcomes, read_pairs, write_cohort
from alignrisk.labels import embed_labels, read_exam_rows
from alignrisk.phantom import (
    CohortConfig,
    Lesion,
    PhantomSpec,
    PhantomSpecError,
    cohort_specs,
    generate_cohort,
    generate_phantom_pair,
    random_smooth_field,
    registration_phantom,
)


def test_zero_field_zero_growth_is_bit_exact():
    spec = PhantomSpec(64, 80, texture_seed=3, lesion=Lesion((25.0, 32.0), 5.0, 0.0))
    pair, tf = generate_phantom_pair(spec)
    assert np.array_equal(pair.current, pair.prior)
    assert not np.any(tf)


def test_same_spec_same_pair():
    spec = cohort_specs(CohortConfig(n_exams=3, height=64, width=80))[2]
    a, _ = generate_phantom_pair(spec)
    b, _ = generate_phantom_pair(spec)
    assert np.array_equal(a.current, b.current) and np.array_equal(a.prior, b.prior)


def test_emitted_fields_never_fold():
    for spec in cohort_specs(CohortConfig(n_exams=60)):
        assert M.njd_percent(M.jacobian_map(spec.true_field)) == 0.0
        assert np.max(np.hypot(*spec.true_field)) == pytest.approx(6.0)
    for seed in range(20):
        assert M.njd_percent(M.jacobian_map(registration_phantom(seed)[2])) == 0.0


def test_spec_errors():
    with pytest.raises(PhantomSpecError):
        generate_phantom_pair(PhantomSpec(64, 80, lesion=Lesion((78.0, 2.0), 5.0)))
    with pytest.raises(PhantomSpecError):
        generate_phantom_pair(PhantomSpec(64, 80, lesion=Lesion((25.0, 32.0), 0.0)))
    folded = np.zeros((2, 64, 80))
    folded[0, :, 40:] = -3.0
    with pytest.raises(PhantomSpecError):
        generate_phantom_pair(PhantomSpec(64, 80, true_field=folded))


def test_growth_tracks_outcome():
    specs = cohort_specs(CohortConfig(n_exams=200))
    rates = {}
    for s in specs:
        rates.setdefault(s.years_to_cancer, []).append(s.lesion.growth_rate)
    assert max(rates[None]) == 0.0
    means = [np.mean(rates[t]) for t in range(1, 6)]
    assert all(a > b for a, b in zip(means, means[1:]))


def test_current_is_prior_moved_by_field_without_lesion_change():
    rng = np.random.default_rng(0)
    tf = random_smooth_field(64, 80, rng, 3.0)
    pair, _ = generate_phantom_pair(PhantomSpec(64, 80, texture_seed=5, true_field=tf))
    from alignrisk.grid import warp_bilinear

    # analytic evaluation differs from resampling only by interpolation error
    assert np.mean(np.abs(warp_bilinear(pair.prior, tf) - pair.current)) < 0.02
    assert M.ncc(warp_bilinear(pair.prior, tf), pair.current) > 0.95


def test_written_cohort_round_trips(tmp_path):
    cohort = generate_cohort(CohortConfig(n_exams=8, height=64, width=80))
    write_cohort(tmp_path, cohort)
    with open(tmp_path / "pairs.csv") as fh:
        assert next(csv.reader(fh)) == ["patient_id", "exam_id", "current_path", "prior_path", "gap_months",
                                        "followup_years", "years_to_cancer", "density"]
    pairs = read_pairs(tmp_path / "pairs.csv")
    assert [p.exam_id for p in pairs] == [p.exam_id for p, _ in cohort]
    for (orig, tf), back in zip(cohort, pairs):
        assert np.max(np.abs(orig.current - back.current)) <= 0.5 / 65535 + 1e-12
        assert np.array_equal(orig.label.y, back.label.y)
        assert np.array_equal(orig.label.delta, back.label.delta)
        assert np.allclose(io.read_df2d(tmp_path / "fields" / f"{orig.exam_id}.df2d"), tf, atol=1e-5)
    outcomes = read_outcomes(tmp_path / "pairs.csv")
    assert set(outcomes) == {p.exam_id for p, _ in cohort}


def test_cohort_table_reproduces_outcomes_through_label_rules(tmp_path):
    cohort = generate_cohort(CohortConfig(n_exams=30, height=64, width=80))
    write_cohort(tmp_path, cohort)
    labels, _ = embed_labels(read_exam_rows(tmp_path / "cohort.csv"))
    for pair, _ in cohort:
        lab = labels[pair.exam_id]
        assert lab.years_to_cancer == pair.label.years_to_cancer
        assert lab.is_negative == (pair.label.years_to_cancer is None)
