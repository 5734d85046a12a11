"""Acceptance gate: one test per criterion, each printed as PASS/FAIL in the terminal summary.

The strategy comparison (criteria 6, 7 and 9) runs the ``alignrisk run``
command at its defaults, twice, which takes roughly a quarter of an hour.
"""

import csv
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from alignrisk import metrics as M
from alignrisk import risk as R
from alignrisk.cli import main
from alignrisk.grid import AffineTransform2D, affine_to_field, zero_field
from alignrisk.labels import csaw_labels, embed_labels, split_cohort
from alignrisk.phantom import breast_mask, registration_phantom
from alignrisk.records import SurvivalLabel, censor_mask
from alignrisk.registration import register
from alignrisk.survival import EvalRecord, UndefinedMetricError, auc_at_horizon, bootstrap_ci, c_index

from test_labels import CSAW_EXPECTED, CSAW_ROWS, EMBED_EXCLUDED, EMBED_EXPECTED, EMBED_ROWS, as_table
from test_metrics import scalar_ncc
from test_risk import CENSOR_CASES, delta_oracle
from test_survival import brute_auc, brute_c_index, random_records, synthetic

TESTS = Path(__file__).parent

GRADIENT_CHECKS = [
    "test_registration.py::test_affine_objective_gradient_on_sixteen_by_sixteen",
    "test_registration.py::test_deformable_objective_gradient_on_eight_by_eight",
    "test_metrics.py::test_ncc_gradient",
    "test_metrics.py::test_regularizer_gradients",
    "test_risk.py::test_hazard_gradients",
    "test_risk.py::test_masked_bce_score_gradient",
    "test_risk.py::test_attention_gradients",
    "test_risk.py::test_alignment_block_gradients",
    "test_risk.py::test_feature_warp_gradient_wrt_field",
    "test_risk.py::test_loss_feat_gradients",
    "test_pipelines.py::test_training_objective_gradients",
]


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.mark.criterion(1, "gradients match central differences within 1e-4; suite under 60 s")
def test_criterion_1_gradient_correctness(record_property):
    start = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider"]
                          + [str(TESTS / n) for n in GRADIENT_CHECKS],
                          capture_output=True, text=True, cwd=TESTS.parent)
    elapsed = time.perf_counter() - start
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-300:]
    record_property("detail", f"{summary}, wall {elapsed:.1f} s")
    assert proc.returncode == 0, proc.stdout[-3000:]
    assert "failed" not in summary and "passed" in summary
    assert elapsed < 60.0


@pytest.mark.criterion(2, "registration recovers 50 phantom fields")
def test_criterion_2_registration_recovery(record_property):
    mask = breast_mask(128, 160) > 0.5
    ncc_final, ordered, epe, epe_mask, njd, seconds = [], 0, [], [], [], []
    for seed in range(50):
        fixed, moving, truth = registration_phantom(seed, 128, 160, 6.0)
        assert np.max(np.hypot(*truth)) <= 6.0 + 1e-9
        t0 = time.process_time()
        res = register(fixed, moving)
        seconds.append(time.process_time() - t0)
        q = res.quality
        ncc_final.append(q.ncc_final)
        ordered += q.ncc_before < q.ncc_affine < q.ncc_final
        err = np.hypot(*(res.final_field - truth))
        epe.append(err.mean())
        epe_mask.append(err[mask].mean())
        njd.append(q.njd_percent)
    record_property("detail", f"mean NCC {np.mean(ncc_final):.4f}, ordered {ordered}/50, "
                              f"EPE {np.mean(epe):.3f} px (breast {np.mean(epe_mask):.3f}), "
                              f"max NJD {max(njd):.3f}%, slowest {max(seconds):.1f} s")
    assert np.mean(ncc_final) >= 0.95
    assert ordered >= 45
    assert np.mean(epe) <= 1.5
    assert max(njd) <= 0.1
    assert max(seconds) <= 120.0


@pytest.mark.criterion(3, "Jacobian, NJD and NCC oracles")
def test_criterion_3_deformation_metric_oracles(record_property):
    rng = np.random.default_rng(3)
    worst_det = 0.0
    for _ in range(200):
        matrix = np.eye(2) + rng.uniform(-0.9, 0.9, (2, 2))
        H, W = rng.integers(3, 33, 2)
        jm = M.jacobian_map(affine_to_field(AffineTransform2D(matrix, rng.uniform(-0.5, 0.5, 2)), H, W))
        worst_det = max(worst_det, float(np.max(np.abs(jm.det - np.linalg.det(matrix)))))
    assert worst_det <= 1e-6
    for H, W in [(2, 2), (8, 8), (128, 160)]:
        assert M.njd_percent(M.jacobian_map(zero_field(H, W))) == 0.0
    worst_ncc = 0.0
    fixtures = [(np.array([[0.0, 1.0], [2.0, 3.0]]), np.array([[1.0, 3.0], [2.0, 4.0]]))]
    fixtures += [tuple(rng.random((2, 6, 7))) for _ in range(20)]
    for a, b in fixtures:
        worst_ncc = max(worst_ncc, abs(M.ncc(a, b) - scalar_ncc(a, b)))
    assert worst_ncc <= 1e-3
    record_property("detail", f"det error {worst_det:.1e}, NCC error {worst_ncc:.1e}")


@pytest.mark.criterion(4, "risk head monotone, censor masks exact, censored loss zero")
def test_criterion_4_risk_head_invariants(record_property):
    rng = np.random.default_rng(4)
    for _ in range(10_000):
        d = int(rng.integers(1, 9))
        scale = rng.uniform(0.01, 20)
        head = R.HazardHead(rng.normal(0, scale, d), rng.normal(0, scale), rng.normal(0, scale, (d, 5)),
                            rng.normal(0, scale, 5))
        assert np.all(np.diff(R.cumulative_probability(head, rng.normal(0, scale, d)).prob) >= 0)
    assert len(CENSOR_CASES) >= 12
    for followup, ttc, want in CENSOR_CASES:
        assert censor_mask(followup, ttc).tolist() == want == delta_oracle(followup, ttc)
    censored = SurvivalLabel(np.zeros(5), np.zeros(5), 0.0)
    assert R.masked_bce(R.RiskOutput(np.zeros(5), rng.random(5)), censored) == 0.0
    record_property("detail", f"10000 heads, {len(CENSOR_CASES)} censor cases")


@pytest.mark.criterion(5, "C-index and AUC equal enumeration; bootstrap CIs behave")
def test_criterion_5_survival_metric_oracles(record_property):
    checked = 0
    for seed in range(400):
        rng = np.random.default_rng(seed)
        recs = random_records(rng, int(rng.integers(2, 21)), ties=bool(seed % 2))
        try:
            want = brute_c_index(recs)
        except UndefinedMetricError:
            with pytest.raises(UndefinedMetricError):
                c_index(recs)
        else:
            assert c_index(recs) == want
            checked += 1
        for t in range(1, 6):
            try:
                want = brute_auc(recs, t)
            except UndefinedMetricError:
                continue
            assert auc_at_horizon(recs, t) == want
            moved = [EvalRecord(np.exp(3 * r.prob) + r.prob ** 3, r.label) for r in recs]
            assert auc_at_horizon(moved, t) == want
    widths = []
    for n in (50, 200, 800):
        recs = synthetic(np.random.default_rng(n), n)
        ci = bootstrap_ci(recs, c_index, resamples=1000, seed=0)
        assert ci.ci_low <= ci.point <= ci.ci_high
        widths.append(ci.ci_high - ci.ci_low)
    assert widths[0] > widths[1] > widths[2]
    record_property("detail", f"{checked} C-index fixtures, CI widths " + ", ".join(f"{w:.3f}" for w in widths))


@pytest.fixture(scope="session")
def strategy_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("strategy_runs")
    out = []
    for name in ("first", "second"):
        start = time.perf_counter()
        assert main(["run", "--out", str(base / name)]) == 0
        out.append((base / name, time.perf_counter() - start))
    return out


def c_indices(run_dir):
    return {r["strategy"]: float(r["c_index"]) for r in rows(run_dir / "results.csv")}


@pytest.mark.criterion(6, "ImgFeatAlign > ImgAlign, FeatAlign > NoAlign on 400 exams")
def test_criterion_6_strategy_ordering(strategy_runs, record_property):
    run_dir, seconds = strategy_runs[0]
    c = c_indices(run_dir)
    n = {r["strategy"]: int(r["n"]) for r in rows(run_dir / "results.csv")}
    record_property("detail", ", ".join(f"{k} {v:.3f}" for k, v in c.items()) + f"; run {seconds / 60:.1f} min")
    assert len(rows(run_dir / "split.csv")) == 400 and n["noalign"] > 0
    assert c["imgfeatalign"] > max(c["imgalign"], c["featalign"])
    assert min(c["imgalign"], c["featalign"]) > c["noalign"]
    assert c["imgfeatalign"] - c["noalign"] >= 0.03
    assert seconds <= 2 * 3600


@pytest.mark.criterion(7, "regularized feature fields fold less and vary less")
def test_criterion_7_regularization_tradeoff(strategy_runs, record_property):
    run_dir, _ = strategy_runs[0]
    dq = {r["strategy"]: r for r in rows(run_dir / "deform_quality.csv")}
    fa, far = dq["featalign"], dq["featalignreg"]
    c = c_indices(run_dir)
    # the C-index direction is reported rather than asserted; desk-scale noise may mask it
    gap = c["featalign"] - c["featalignreg"]
    direction = "held" if gap >= -0.01 else "not observed"
    record_property("detail", f"NJD {float(fa['njd_percent']):.3f}% vs {float(far['njd_percent']):.3f}%, "
                              f"Jacobian std {float(fa['jacobian_std']):.3f} vs {float(far['jacobian_std']):.3f}; "
                              f"reported: C-index FeatAlign - FeatAlignReg = {gap:+.3f}, "
                              f"tolerance -0.01 {direction}")
    assert float(far["njd_percent"]) < float(fa["njd_percent"])
    assert float(far["jacobian_std"]) < float(fa["jacobian_std"])


@pytest.mark.criterion(8, "label tables reproduced; splits disjoint for 100 seeds")
def test_criterion_8_label_rules(record_property):
    labels, excluded = embed_labels(EMBED_ROWS)
    assert as_table(labels) == EMBED_EXPECTED and set(excluded) == EMBED_EXCLUDED
    labels, excluded = csaw_labels(CSAW_ROWS)
    assert as_table(labels) == CSAW_EXPECTED and excluded == ["C5-15"]
    # interval cancer after the 2016 screen is capped at the study end
    assert labels["C2-16"].years_to_cancer == 0 and labels["C2-14"].years_to_cancer == 2
    patients = [f"p{i:03d}" for i in range(73)]
    for seed in range(100):
        parts = [set(p) for p in split_cohort(patients, (5, 2, 3), seed)]
        assert set().union(*parts) == set(patients) and sum(map(len, parts)) == len(patients)
        assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
    record_property("detail", f"{len(EMBED_EXPECTED)} + {len(CSAW_EXPECTED)} labelled exams, 100 seeds")


@pytest.mark.criterion(9, "rerunning the experiment reproduces every CSV byte for byte")
def test_criterion_9_determinism(strategy_runs, record_property):
    (a, _), (b, _) = strategy_runs
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    csvs = [n for n in names if n.endswith(".csv")]
    assert len(csvs) >= 7
    differing = [n for n in names if (a / n).read_bytes() != (b / n).read_bytes()]
    record_property("detail", f"{len(csvs)} CSVs compared, {len(differing)} differ")
    assert not differing
