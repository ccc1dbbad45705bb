import json

import numpy as np
import pytest

from cconvfluid import io
from cconvfluid.cli import main

TINY = {"model": {"width": 4, "selector_width": 2}, "train": {"total_iters": 3, "batch_size": 2, "log_every": 1}}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--preset", "drop-tiny", "--seed", "1", "--scenes", "2", "--frame-count", "8",
                 "--out", str(d / "data"), "--threads", "1"]) == 0
    (d / "cfg.json").write_text(json.dumps(TINY))
    assert main(["train", "--data", str(d / "data"), "--config", str(d / "cfg.json"), "--out", str(d / "m.ckpt"),
                 "--threads", "1"]) == 0
    (d / "scene.json").write_text(json.dumps({"preset": "drop-tiny", "seed": 5}))
    return d


def test_gen_data_writes_one_file_per_scene(work):
    files = sorted(p.name for p in (work / "data").iterdir())
    assert files == ["drop-tiny_0001.flpf", "drop-tiny_0002.flpf"]
    assert len(io.read_frames(work / "data" / files[0])) == 8


def test_train_writes_checkpoint_and_loss_curve(work):
    params, cfg, adam, man = io.load_checkpoint(work / "m.ckpt")
    assert cfg.width == 4 and adam.step == 3 and man["iteration"] == 3
    lines = (work / "m.ckpt.loss.csv").read_text().splitlines()
    assert lines[0] == "iteration,loss,lr" and len(lines) == 4


def test_simulate_and_eval(work, capsys):
    out = work / "pred.flpf"
    assert main(["simulate", "--ckpt", str(work / "m.ckpt"), "--scene", str(work / "scene.json"),
                 "--frames", "5", "--out", str(out)]) == 0
    pred = io.read_frames(out)
    assert len(pred) == 6
    assert main(["eval", "--pred", str(out), "--gt", str(out), "--report", str(work / "r.csv")]) == 0
    summary = json.loads((work / "r.json").read_text())
    assert all(v == 0 for k, v in summary.items() if k != "seed")
    assert (work / "r.csv").read_text().startswith("metric,frame,value\n")


def test_eval_with_checkpoint_reports_short_horizon(work):
    gt = work / "data" / "drop-tiny_0001.flpf"
    assert main(["eval", "--pred", str(gt), "--gt", str(gt), "--report", str(work / "r2.csv"),
                 "--ckpt", str(work / "m.ckpt")]) == 0
    summary = json.loads((work / "r2.json").read_text())
    assert summary["avg_pos_error_t1"] > 0


def test_export(work):
    gt = work / "data" / "drop-tiny_0001.flpf"
    assert main(["export", "--frames", str(gt), "--format", "ply", "--out", str(work / "ply")]) == 0
    assert len(list((work / "ply").glob("*.ply"))) == 8


def test_simulate_zero_frames_is_usage_error(work, capsys):
    with pytest.raises(SystemExit) as e:
        main(["simulate", "--ckpt", "x", "--scene", "y", "--frames", "0", "--out", "z"])
    assert e.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as e:
        main(["eval", "--bogus"])
    assert e.value.code == 2


def test_failure_is_one_machine_readable_line(tmp_path, capsys):
    bad = tmp_path / "bad.flpf"
    bad.write_bytes(b"FLPF" + bytes(30))
    assert main(["export", "--frames", str(bad), "--format", "csv", "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: FormatError: ")


def test_grad_check_seed_7(capsys):
    assert main(["grad-check", "--seed", "7", "--threads", "1"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[-1].startswith("ok ")
    groups = [ln.split() for ln in lines[:-1]]
    assert {g for g, _ in groups} >= {"head", "main", "cons", "taim_main", "taim_cons", "fusion0"}
    assert all(float(e) <= 1e-5 for _, e in groups)
