import csv
import json

import numpy as np
import pytest

from fflogo.cli import EXIT_CODES, main, sample_cloud_path
from fflogo.transform import RigidTransform


def test_info(capsys):
    assert main(["info"]) == 0
    out = capsys.readouterr().out
    assert "classical-descriptor" in out and "seeded-attention" in out
    assert str(sample_cloud_path()) in out


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "0.1.0" in capsys.readouterr().out


def test_register_sample_onto_itself(tmp_path, capsys):
    sample = str(sample_cloud_path())
    assert main(["register", sample, sample, "--out", str(tmp_path)]) == 0
    printed = RigidTransform.from_text(capsys.readouterr().out)
    assert printed.allclose(RigidTransform.identity(), atol=1e-3)
    doc = json.loads((tmp_path / "result.json").read_text())
    assert RigidTransform.from_list(doc["T_f"]).allclose(printed, atol=1e-12)
    assert (tmp_path / "source_registered.ply").is_file()


def test_register_errors(tmp_path):
    sample = str(sample_cloud_path())
    assert main(["register", str(tmp_path / "missing.ply"), sample, "--out", str(tmp_path)]) == EXIT_CODES["io"]
    bad = tmp_path / "bad.xyz"
    bad.write_text("0 0 0\n1 x 0\n")
    assert main(["register", str(bad), sample, "--out", str(tmp_path)]) == EXIT_CODES["parse"]
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"voxel_size": -1}))
    assert main(["register", sample, sample, "--config", str(cfg)]) == EXIT_CODES["config"]
    tiny = tmp_path / "tiny.xyz"
    tiny.write_text("".join(f"{0.001 * i} 0 0\n" for i in range(5)))
    assert main(["register", str(tiny), sample, "--out", str(tmp_path)]) == EXIT_CODES["normals"]


def test_usage_errors():
    with pytest.raises(SystemExit) as exc:
        main(["register", "a.ply", "b.ply", "--no-logo", "--go-only"])
    assert exc.value.code == EXIT_CODES["usage"]
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == EXIT_CODES["usage"]


def test_synth_and_invalid_spec(tmp_path, caplog):
    out = tmp_path / "c"
    assert main(["synth", "--out", str(out), "--pairs", "2", "--seed", "5"]) == 0
    doc = json.loads((out / "manifest.json").read_text())
    assert len(doc["pairs"]) == 2 and doc["corpus"]["seed"] == 5
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"pairs": 0}))
    assert main(["synth", str(spec), "--out", str(tmp_path / "d")]) == EXIT_CODES["config"]
    assert "pairs" in caplog.text


def test_evaluate_writes_consistent_report(small_corpus, tmp_path, capsys):
    report = tmp_path / "r.json"
    assert main(["evaluate", str(small_corpus), "--out", str(report), "--repeats", "1"]) == 0
    doc = json.loads(report.read_text())
    rows = list(csv.DictReader(report.with_suffix(".csv").open()))
    assert len(rows) == len(doc["evaluations"]) == 4
    assert sum(int(r["recalled"]) for r in rows) / len(rows) == doc["recall"]
    assert "logo" in capsys.readouterr().out


def test_ablate_on_noiseless_aligned_corpus(tmp_path):
    spec = tmp_path / "spec.json"
    clean = {"density_keep_fraction": 1.0, "noise_sigma": 0.0, "overlap_fraction": 1.0, "outlier_fraction": 0.0}
    spec.write_text(json.dumps({"pairs": 2, "base_points": 5000, "rot_max_deg": 0.0, "trans_max": 0.0,
                                "spec_k": clean, "spec_l": clean}))
    corpus = tmp_path / "corpus"
    assert main(["synth", str(spec), "--out", str(corpus)]) == 0
    report = tmp_path / "ablate.json"
    assert main(["ablate", str(corpus), "--out", str(report), "--repeats", "1"]) == 0
    doc = json.loads(report.read_text())
    assert set(doc["arms"]) == {"ff", "go", "logo"}
    for arm in doc["arms"].values():
        assert arm["recall"] == 1.0
    # flat regions give tied descriptors, so only the refined arms are exact
    for name in ("go", "logo"):
        assert doc["arms"][name]["mean_re"] < 0.1 and doc["arms"][name]["mean_te"] < 1e-3
    assert np.isfinite(doc["mean_re_deg"])


def test_empty_corpus(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"corpus": {}, "pairs": []}))
    assert main(["evaluate", str(tmp_path), "--out", str(tmp_path / "r.json")]) == EXIT_CODES["empty-corpus"]
    assert main(["evaluate", str(tmp_path / "nothing")]) == EXIT_CODES["io"]
