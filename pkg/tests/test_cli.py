import json
import subprocess
import sys

import pytest

from cmdskel.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    rc = main(["gen-synth", "--out", str(d / "train.jsonl"), "--test-out", str(d / "test.jsonl"),
               "--classes", "3", "--per-class", "4", "--test-per-class", "2", "--frames", "10", "--joints", "25"])  # fmt: skip
    assert rc == 0
    return d


TINY = ["--hidden_dim", "4", "--embedding_dim", "4", "--num_layers", "1", "--N", "8", "--K", "2",
        "--batch_size", "4", "--target_frames", "8", "--dtype", "float64"]  # fmt: skip


@pytest.fixture(scope="module")
def trained(workdir):
    out = workdir / "run"
    rc = main(["pretrain", "--data", str(workdir / "train.jsonl"), "--out", str(out), "--epochs", "2", *TINY])
    assert rc == 0
    return out


def test_gen_synth_split(workdir):
    assert len((workdir / "train.jsonl").read_text().splitlines()) == 1 + 12
    assert len((workdir / "test.jsonl").read_text().splitlines()) == 1 + 6


def test_pretrain_outputs(trained):
    assert (trained / "checkpoint" / "manifest.json").exists()
    assert (trained / "metrics.csv").read_text().splitlines()[0].startswith("epoch,step,lr,loss_total")
    manifest = json.loads((trained / "run-manifest.json").read_text())
    assert manifest["config"]["epochs"] == 2 and manifest["config"]["lr_drop_epoch"] == 1


def test_pretrain_zero_epochs(workdir, tmp_path):
    rc = main(["pretrain", "--data", str(workdir / "train.jsonl"), "--out", str(tmp_path), "--epochs", "0", *TINY])
    assert rc == 0
    assert (tmp_path / "checkpoint" / "arrays.bin").exists()


def test_config_file_and_override(workdir, tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("epochs = 1\nlr_drop_epoch = 0\nK = 3\n")
    rc = main(["pretrain", "--config", str(cfg), "--data", str(workdir / "train.jsonl"), "--out", str(tmp_path / "o"), *TINY])
    assert rc == 0
    manifest = json.loads((tmp_path / "o" / "run-manifest.json").read_text())
    assert manifest["config"]["K"] == 2  # flag wins over file


def test_missing_config_is_usage_error(workdir, tmp_path, capsys):
    rc = main(["pretrain", "--config", str(tmp_path / "nope.txt"), "--data", str(workdir / "train.jsonl"), "--out", str(tmp_path)])
    assert rc == 2
    err = capsys.readouterr().err
    assert "config file not found" in err and "usage:" in err


def test_bad_value_is_usage_error(workdir, tmp_path):
    assert main(["pretrain", "--data", str(workdir / "train.jsonl"), "--out", str(tmp_path), "--K", "many"]) == 2


def test_unknown_verb():
    assert main(["train-everything"]) == 2


def test_missing_data_is_runtime_error(tmp_path):
    assert main(["pretrain", "--data", str(tmp_path / "none.jsonl"), "--out", str(tmp_path), *TINY]) == 1


def test_knn_result_is_reproducible(trained, workdir, tmp_path):
    args = ["eval-knn", "--checkpoint", str(trained / "checkpoint"), "--train", str(workdir / "train.jsonl"),
            "--test", str(workdir / "test.jsonl")]  # fmt: skip
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "result.json").read_bytes()
    assert a == (tmp_path / "b" / "result.json").read_bytes()
    res = json.loads(a)
    assert set(res) == {"protocol", "modality", "top1", "n_test", "checkpoint"}
    assert res["n_test"] == 6 and 0 <= res["top1"] <= 1


def test_linear_ensemble(trained, workdir, tmp_path):
    rc = main(["eval-linear", "--checkpoint", str(trained / "checkpoint"), "--train", str(workdir / "train.jsonl"),
               "--test", str(workdir / "test.jsonl"), "--modality", "joint,motion", "--probe-epochs", "3",
               "--out", str(tmp_path)])  # fmt: skip
    assert rc == 0
    res = json.loads((tmp_path / "result.json").read_text())
    assert res["modality"] == "joint+motion" and set(res["per_modality"]) == {"joint", "motion"}


def test_eval_unknown_modality(trained, workdir, tmp_path):
    rc = main(["eval-knn", "--checkpoint", str(trained / "checkpoint"), "--train", str(workdir / "train.jsonl"),
               "--test", str(workdir / "test.jsonl"), "--modality", "bone", "--out", str(tmp_path)])  # fmt: skip
    assert rc == 1


def test_export_features(trained, workdir, tmp_path):
    out = tmp_path / "f.jsonl"
    rc = main(["export-features", "--checkpoint", str(trained / "checkpoint"), "--data", str(workdir / "test.jsonl"), "--out", str(out)])
    assert rc == 0
    assert json.loads(out.read_text().splitlines()[0])["dim"] == 4


def test_resume_flag(trained, workdir, tmp_path):
    rc = main(["pretrain", "--data", str(workdir / "train.jsonl"), "--out", str(tmp_path), "--resume",
               str(trained / "checkpoint"), "--epochs", "3", "--lr_drop_epoch", "1", *TINY])  # fmt: skip
    assert rc == 0
    assert json.loads((tmp_path / "checkpoint" / "manifest.json").read_text())["epoch"] == 3


def test_verify_quick_subprocess(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "cmdskel", "verify", "--quick", "--out", str(tmp_path)],
                          capture_output=True, text=True, timeout=300)  # fmt: skip
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert "FAIL" not in proc.stdout
