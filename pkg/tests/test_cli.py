import csv
import json

import numpy as np
import pytest

from alignrisk import io
from alignrisk.cli import main


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def cohort_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "cohort"
    assert main(["phantom", "--out", str(out), "--n-exams", "14", "--height", "64", "--width", "80"]) == 0
    return out


def test_phantom_layout(cohort_dir):
    pairs = rows(cohort_dir / "pairs.csv")
    assert len(pairs) == 14
    assert (cohort_dir / pairs[0]["current_path"]).exists()
    assert list(rows(cohort_dir / "cohort.csv")[0]) == [
        "patient_id", "exam_id", "exam_year", "view", "laterality", "image_path", "birads", "severity",
        "rad_timing", "density"]


def test_labels_and_split(cohort_dir, tmp_path):
    assert main(["labels", "--scheme", "embed", "--rows", str(cohort_dir / "cohort.csv"),
                 "--out", str(tmp_path / "labels.csv"), "--excluded", str(tmp_path / "ex.csv")]) == 0
    labels = {r["exam_id"]: r for r in rows(tmp_path / "labels.csv")}
    for r in rows(cohort_dir / "pairs.csv"):
        assert labels[r["exam_id"]]["years_to_cancer"] == r["years_to_cancer"]
    assert main(["split", "--rows", str(cohort_dir / "pairs.csv"), "--out", str(tmp_path / "split.csv")]) == 0
    counts = {}
    for r in rows(tmp_path / "split.csv"):
        counts[r["split"]] = counts.get(r["split"], 0) + 1
    assert counts == {"train": 7, "val": 3, "test": 4}


def test_csaw_scheme(tmp_path):
    (tmp_path / "rows.csv").write_text(
        "patient_id,exam_id,exam_year,view,laterality,image_path,birads,severity,rad_timing,density\n"
        "A,A1,2012,CC,L,,,,,\nA,A2,2014,CC,L,,,,2,\n")
    assert main(["labels", "--scheme", "csaw", "--rows", str(tmp_path / "rows.csv"),
                 "--out", str(tmp_path / "l.csv")]) == 0
    assert [r["years_to_cancer"] for r in rows(tmp_path / "l.csv")] == ["3", "1"]


def test_preprocess(tmp_path):
    img = np.zeros((50, 40))
    img[10:40, 5:25] = 0.7
    io.save_image(tmp_path / "raw.png", img)
    assert main(["preprocess", "--input", str(tmp_path / "raw.png"), "--out", str(tmp_path / "pp.png"),
                 "--width", "32", "--height", "48"]) == 0
    assert io.load_image(tmp_path / "pp.png").shape == (48, 32)


def test_register_and_deform_metrics(cohort_dir, tmp_path):
    pair = rows(cohort_dir / "pairs.csv")[0]
    fixed, moving = str(cohort_dir / pair["current_path"]), str(cohort_dir / pair["prior_path"])
    field = tmp_path / "f.df2d"
    assert main(["register", "--fixed", fixed, "--moving", moving, "--out-field", str(field),
                 "--out-warped", str(tmp_path / "w.png"), "--report", str(tmp_path / "q.csv"),
                 "--deformable-iters-per-level", "40"]) == 0
    assert io.read_df2d(field).shape == (2, 64, 80)
    q = rows(tmp_path / "q.csv")[0]
    assert float(q["ncc_final"]) > float(q["ncc_before"])
    assert main(["deform-metrics", str(field), "--fixed", fixed, "--moving", moving,
                 "--out", str(tmp_path / "dm.csv")]) == 0
    dm = rows(tmp_path / "dm.csv")[0]
    assert float(dm["njd_percent"]) == float(q["njd_percent"])
    assert float(dm["ncc"]) == pytest.approx(float(q["ncc_final"]), abs=1e-9)


def test_train_predict_evaluate(cohort_dir, tmp_path):
    pairs = str(cohort_dir / "pairs.csv")
    model = str(tmp_path / "m.lawt")
    assert main(["train", "--strategy", "imgfeatalign", "--pairs", pairs, "--epochs", "2",
                 "--fields-dir", str(cohort_dir / "fields"), "--out", model,
                 "--loss-curve", str(tmp_path / "loss.csv")]) == 0
    assert len(rows(tmp_path / "loss.csv")) == 2
    assert main(["predict", "--strategy", "imgfeatalign", "--pairs", pairs, "--model", model,
                 "--fields-dir", str(cohort_dir / "fields"), "--out", str(tmp_path / "pred.csv")]) == 0
    preds = rows(tmp_path / "pred.csv")
    assert len(preds) == 3 * 14
    assert all(float(r["p1"]) <= float(r["p5"]) for r in preds)
    assert main(["evaluate", "--predictions", str(tmp_path / "pred.csv"), "--labels", pairs,
                 "--out", str(tmp_path / "eval.csv"), "--resamples", "30", "--min-group-size", "2"]) == 0
    metrics = [r["metric"] for r in rows(tmp_path / "eval.csv")]
    assert metrics == ["c_index"] + [f"auc_{t}" for t in range(1, 6)]


def test_run_subcommand(tmp_path):
    cfg = {"cohort": {"n_exams": 20, "height": 64, "width": 80}, "strategies": ["noalign", "featalign"],
           "train": {"epochs": 2}, "bootstrap_resamples": 20}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert main(["run", "--config", str(tmp_path / "cfg.json"), "--train-epochs", "1",
                 "--out", str(tmp_path / "out")]) == 0
    assert json.loads((tmp_path / "out" / "config.json").read_text())["train"]["epochs"] == 1
    assert [r["strategy"] for r in rows(tmp_path / "out" / "results.csv")] == ["noalign", "featalign"]


def test_errors_return_nonzero(tmp_path, capsys):
    assert main(["preprocess", "--input", str(tmp_path / "missing.png"), "--out", str(tmp_path / "x.png")]) == 1
    assert "error" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["labels", "--scheme", "other", "--rows", "x", "--out", "y"])
