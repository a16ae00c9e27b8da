import json

import pytest

from fv2ic.cli import main
from fv2ic.fedsim import read_csv

SMALL = {
    "dataset": {"image_size": 16, "num_clients": 2, "samples_per_client": 10},
    "model": {"unet_depth": 2, "vae_depth": 2, "latent_dim": 4},
    "federation": {"rounds": 2, "batch_labeled": 2, "batch_unlabeled": 4, "distill_batch": 4, "iter_max_distill": 1},
}


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(SMALL))
    return p


def err_line(capsys):
    lines = capsys.readouterr().err.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


def test_bad_config_exits_with_one_line(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"dataset": {"labeled_ratio": 1.5}}))
    assert main(["--config", str(p), "train"]) == 2
    err = err_line(capsys)
    assert err["error"] == "config" and err["field"] == "dataset.labeled_ratio"


def test_malformed_config(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{oops")
    assert main(["--config", str(p), "generate"]) == 2
    assert "malformed JSON" in err_line(capsys)["message"]


def test_threads_variable_validated(cfg_file, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("FV2IC_THREADS", "zero")
    assert main(["--config", str(cfg_file), "--out", str(tmp_path / "g"), "generate"]) == 2
    assert err_line(capsys)["field"] == "FV2IC_THREADS"


def test_generate_train_evaluate_plot(cfg_file, tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["--config", str(cfg_file), "--out", str(data), "generate"]) == 0
    assert (data / "manifest.json").exists()
    run = tmp_path / "run"
    assert main(["--config", str(cfg_file), "--seed", "3", "--out", str(run), "train", "--data", str(data)]) == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert set(out["test"]) == {"dice", "jaccard", "sensitivity", "accuracy"}
    assert len(read_csv(run / "report.csv")) == 2
    assert (run / "convergence.png").exists()

    assert main(["evaluate", "--checkpoint", str(run / "best.json"), "--data", str(data)]) == 0
    text = capsys.readouterr().out
    assert text.splitlines()[0] == "split,dice,jaccard,sensitivity,accuracy"
    assert "dice" in text.splitlines()[3]

    plots = tmp_path / "plots"
    assert main(["--no-plots", "--out", str(plots), "plot", "--report", str(run / "report.csv"), "--clients", "1"]) == 0
    assert (plots / "convergence.csv").exists() and not (plots / "convergence.png").exists()


def test_analyze_latent_command(cfg_file, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["--config", str(cfg_file), "--no-plots", "--out", str(run), "train"]) == 0
    capsys.readouterr()
    out = tmp_path / "lat"
    ckpt = str(run / "final.json")
    assert main(["--no-plots", "--out", str(out), "analyze-latent", "--combined", ckpt, "--vae-only", ckpt]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "model,avg_d"
    assert lines[1].split(",")[1] == lines[2].split(",")[1]


def test_missing_checkpoint_is_one_line_error(tmp_path, capsys):
    assert main(["evaluate", "--checkpoint", str(tmp_path / "nope.json")]) == 1
    assert err_line(capsys)["error"] == "io"
