import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from laspet import pipeline as pl
from laspet.cli import main
from laspet.volgrid import read_mvol

DATA = Path(__file__).parent / "data"
GOLDEN = ["--seed", "7", "--segmenter", "threshold-union", "--patients", "3", "--trials", "200"]
TINY_MODEL = "model:\n  feature_dim: 6\n  depths: [1, 1]\n  heads: [1, 2]\n  patch_size: 12\n"


@pytest.fixture(scope="module")
def study_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("study") / "p0"
    assert main(["phantom", str(d), "--seed", "3"]) == 0
    return d


def test_phantom_writes_study_and_is_deterministic(study_dir, tmp_path):
    for name in ("pet1", "ct1", "pet2", "ct2", "gt1", "gt2", "organs1", "organs2"):
        assert (study_dir / f"{name}.mvol").exists()
    manifest = json.loads((study_dir / "manifest.json").read_text())
    assert manifest["command"] == "phantom" and manifest["schema_version"] == 1
    assert main(["phantom", str(tmp_path / "again"), "--seed", "3"]) == 0
    for name in ("pet1", "gt2"):
        assert (tmp_path / "again" / f"{name}.mvol").read_bytes() == (study_dir / f"{name}.mvol").read_bytes()


def test_phantom_errors_are_stage_tagged(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("residual_fraction: 2.0\n")
    assert main(["phantom", str(tmp_path / "x"), "--config", str(bad)]) == 10
    broken = tmp_path / "broken.yaml"
    broken.write_text("seed: [\n")
    assert main(["phantom", str(tmp_path / "y"), "--config", str(broken)]) == 9


def test_phantom_misregistration_flag(tmp_path):
    assert main(["phantom", str(tmp_path / "s"), "--seed", "3", "--shift", "6,0,0"]) == 0
    a = json.loads((tmp_path / "s" / "manifest.json").read_text())["lesions"]["pet1"]
    assert main(["phantom", str(tmp_path / "t"), "--seed", "3"]) == 0
    b = json.loads((tmp_path / "t" / "manifest.json").read_text())["lesions"]["pet1"]
    for ra, rb in zip(a, b):
        assert ra["centroid_mm"][0] == pytest.approx(rb["centroid_mm"][0] + 6.0)


def test_vol_info_and_convert(study_dir, tmp_path, capsys):
    assert main(["vol", "info", str(study_dir / "pet1.mvol")]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["dims"] == [48, 48, 48]
    out = tmp_path / "small.mvol"
    assert main(["vol", "convert", str(study_dir / "pet1.mvol"), str(out), "--spacing", "6"]) == 0
    assert read_mvol(out).dims == (24, 24, 24)
    assert main(["vol", "info", str(tmp_path / "missing.mvol")]) == 1


def test_segment_metrics_mpdr_register(study_dir, tmp_path, capsys):
    seg = tmp_path / "seg"
    assert main(["segment", str(study_dir), "--rule", "threshold-union", "--out", str(seg)]) == 0
    gt2 = read_mvol(study_dir / "gt2.mvol").values > 0
    np.testing.assert_array_equal(read_mvol(seg / "pred2.mvol").values > 0, gt2)

    assert main(["metrics", "--labels", str(seg / "pred1.mvol"), "--pet", str(study_dir / "pet1.mvol"),
                 "--baseline", "--spleen", str(study_dir / "organs1.mvol"), "--json", str(tmp_path / "m.json")]) == 0
    m = json.loads((tmp_path / "m.json").read_text())
    assert m["schema_version"] == 1 and m["metrics"]["n_lesions"] >= 1
    assert main(["metrics", "--labels", str(seg / "pred2.mvol"), "--pet", str(study_dir / "pet2.mvol"),
                 "--interim"]) == 15
    capsys.readouterr()

    assert main(["mpdr", "--pred1", str(seg / "pred1.mvol"), "--pred2", str(seg / "pred2.mvol"),
                 "--out", str(tmp_path / "kept.mvol")]) == 0
    kept = read_mvol(tmp_path / "kept.mvol").values
    assert ((kept > 0) <= gt2).all()

    capsys.readouterr()
    assert main(["register", "--moving", str(study_dir / "ct1.mvol"), "--fixed", str(study_dir / "ct2.mvol"),
                 "--out-transform", str(tmp_path / "t.json")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["rotation_deg"] < 1.0
    assert json.loads((tmp_path / "t.json").read_text())["schema_version"] == 1


def test_segment_model_requires_checkpoint(study_dir):
    assert main(["segment", str(study_dir), "--rule", "model"]) == 12


def test_eval_on_oracle_predictions(study_dir, tmp_path):
    p = tmp_path / "p"
    p.mkdir()
    for f in study_dir.iterdir():
        (p / f.name).write_bytes(f.read_bytes())
    (p / "pred1.mvol").write_bytes((study_dir / "gt1.mvol").read_bytes())
    (p / "pred2.mvol").write_bytes((study_dir / "gt2.mvol").read_bytes())
    report = tmp_path / "r.json"
    assert main(["eval", str(p), "--json", str(report), "--bootstrap", "100", "--criterion", "overlap"]) == 0
    r = json.loads(report.read_text())
    assert r["pet2"]["raw"]["detection"]["overlap"]["f1"]["value"] == 1.0
    assert list(r["pet2"]["raw"]["detection"]) == ["overlap"]
    assert main(["eval", str(tmp_path / "nothing"), "--json", str(report)]) == 16


def test_pipeline_golden_and_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["pipeline", "--out", str(a), *GOLDEN]) == 0
    assert main(["pipeline", "--out", str(b), *GOLDEN]) == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    assert (a / "report.txt").read_text() == (DATA / "golden_report.txt").read_text()
    assert (a / "detection.csv").read_text() == (DATA / "golden_detection.csv").read_text()
    report = json.loads((a / "report.json").read_text())
    manifest = json.loads((a / "manifest.json").read_text())
    assert report["manifest"]["config_hash"] == manifest["config_hash"]
    for name in ("pet1_segmentation", "correlations", "detection", "ds_agreement"):
        first = (a / f"{name}.csv").read_text().splitlines()[0]
        assert first == f"# manifest: manifest.json config_hash={manifest['config_hash']}"
    capsys.readouterr()
    assert main(["report", str(a / "report.json"), "--csv-dir", str(tmp_path / "csv")]) == 0
    assert capsys.readouterr().out == (DATA / "golden_report.txt").read_text()
    assert (tmp_path / "csv" / "detection.csv").read_text() == (a / "detection.csv").read_text()


def test_pipeline_worker_count_does_not_change_report(tmp_path, monkeypatch):
    monkeypatch.setenv("LASPET_THREADS", "1")
    assert main(["pipeline", "--out", str(tmp_path / "one"), *GOLDEN]) == 0
    monkeypatch.setenv("LASPET_THREADS", "3")
    assert main(["pipeline", "--out", str(tmp_path / "three"), *GOLDEN]) == 0
    assert (tmp_path / "one" / "report.json").read_bytes() == (tmp_path / "three" / "report.json").read_bytes()


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("seed: 1\ncohort:\n  n_patients: 4\neval:\n  n_trials: 50\n")
    merged = pl.load_config(cfg, {"seed": 9})
    assert merged["seed"] == 9 and merged["cohort"]["n_patients"] == 4 and merged["eval"]["n_trials"] == 50
    assert merged["cohort"]["lesion_count_cycle"] == 3
    cfg.write_text("bogus: 1\n")
    assert main(["pipeline", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 9
    assert main(["pipeline", "--patients", "0", "--out", str(tmp_path / "o")]) == 9


def test_derive_seed_is_stable_and_stage_specific():
    assert pl.derive_seed(0, "phantom", 0) == pl.derive_seed(0, "phantom", 0)
    seeds = {pl.derive_seed(0, s, i) for s in pl.STAGE_KEYS for i in range(3)}
    assert len(seeds) == 3 * len(pl.STAGE_KEYS)


def test_report_errors(tmp_path, capsys):
    empty = tmp_path / "empty.json"
    empty.write_text(json.dumps({"n_patients": 0}))
    assert main(["report", str(empty)]) == 17
    assert main(["report", str(tmp_path / "missing.json")]) == 17


def test_single_patient_report_has_degenerate_ci(tmp_path, capsys):
    assert main(["pipeline", "--out", str(tmp_path / "one"), "--patients", "1", "--trials", "50"]) == 0
    text = (tmp_path / "one" / "report.txt").read_text()
    assert "dice       1.000 [1.000, 1.000]" in text
    assert "mtv_ml             n/a" in text


def test_invariant_violation_exit_code(tmp_path, monkeypatch):
    monkeypatch.setattr(pl, "check_report", lambda report: ["forced"])
    assert main(["pipeline", "--out", str(tmp_path / "x"), "--patients", "2", "--trials", "20"]) == 20


def test_train_toy_and_infer(study_dir, tmp_path, capsys):
    cfg = tmp_path / "m.yaml"
    cfg.write_text(TINY_MODEL)
    ckpt = tmp_path / "m.lasp"
    assert main(["train-toy", "--out", str(ckpt), "--config", str(cfg), "--steps", "2",
                 "--losses", str(tmp_path / "l.csv")]) == 0
    assert ckpt.read_bytes()[:4] == b"LASP"
    assert len((tmp_path / "l.csv").read_text().splitlines()) == 3
    out = tmp_path / "inf"
    assert main(["infer", str(study_dir), "--checkpoint", str(ckpt), "--out", str(out), "--no-register"]) == 0
    assert read_mvol(out / "pred2.mvol").dims == (48, 48, 48)
    assert (out / "transform.json").exists()
    assert main(["infer", str(study_dir), "--checkpoint", str(tmp_path / "none.lasp"), "--out", str(out)]) == 14


def test_console_script_entry_point():
    res = subprocess.run([sys.executable, "-m", "laspet.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for sub in ("phantom", "vol", "segment", "register", "mpdr", "metrics", "eval", "train-toy", "infer",
                "pipeline", "report"):
        assert sub in res.stdout
