import json

import numpy as np
import pytest

from osvda import data
from osvda.cli import main
from osvda.data import load_manifest
from osvda.gradcheck import OBJECTIVES
from osvda.network import ModelDims, init_params, load_params

SMALL = {
    "synth": {"K": 3, "num_private": 2, "D": 4, "c": 3, "samples_per_class": 10},
    "model": {"H": 8, "F": 6, "P": 5},
    "train": {"stage1_epochs": 2, "stage2_epochs": 2, "b": 8},
}


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


@pytest.fixture
def synth_dir(tmp_path, cfg_file):
    out = tmp_path / "data"
    assert main(["synth", "--config", cfg_file, "--seed", "0", "--out", str(out)]) == 0
    return out


def _train(cfg_file, synth_dir, out, *extra):
    return main(
        ["train", "--config", cfg_file, "--seed", "1", "--source", str(synth_dir / "source.jsonl"),
         "--target", str(synth_dir / "target.jsonl"), "--out", str(out), *extra]
    )


def test_synth_outputs(synth_dir, tmp_path, cfg_file):
    source = load_manifest(synth_dir / "source.jsonl")
    target = load_manifest(synth_dir / "target.jsonl")
    assert source.K == 3 and len(source) == 30 and len(target) == 50
    assert all(data.ground_truth(s) is None for s in target)
    truth = json.loads((synth_dir / "target.ground_truth.json").read_text())
    assert len(truth) == 50
    again = tmp_path / "again"
    main(["synth", "--config", cfg_file, "--seed", "0", "--out", str(again)])
    for name in ("source.jsonl", "target.jsonl", "target.ground_truth.json"):
        assert (again / name).read_bytes() == (synth_dir / name).read_bytes()


def test_synth_default_split(tmp_path):
    assert main(["synth", "--seed", "0", "--out", str(tmp_path)]) == 0
    source = load_manifest(tmp_path / "source.jsonl")
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert source.K == 6 and cfg["synth"]["num_private"] == 6


def test_seed_required(tmp_path):
    with pytest.raises(SystemExit):
        main(["train", "--out", str(tmp_path)])


def test_train_zero_epochs_is_initialisation(tmp_path, synth_dir):
    zero = dict(SMALL, train={"stage1_epochs": 0, "stage2_epochs": 0, "b": 8})
    zero_cfg = tmp_path / "zero.json"
    zero_cfg.write_text(json.dumps(zero))
    _train(str(zero_cfg), synth_dir, tmp_path / "zero")
    params = load_params(tmp_path / "zero" / "checkpoint")
    assert params == init_params(ModelDims(D=4, c=3, H=8, F=6, P=5, K=3), 1)


def test_train_deterministic_and_config_echo(tmp_path, cfg_file, synth_dir):
    assert _train(cfg_file, synth_dir, tmp_path / "a") == 0
    assert _train(cfg_file, synth_dir, tmp_path / "b") == 0
    for name in ("checkpoint.npy", "checkpoint.json", "history.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    # re-running from the echoed configuration reproduces the run
    echoed = str(tmp_path / "a" / "config.json")
    assert main(["train", "--config", echoed, "--seed", "1", "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "checkpoint.npy").read_bytes() == (tmp_path / "a" / "checkpoint.npy").read_bytes()
    history = json.loads((tmp_path / "a" / "history.json").read_text())
    assert "pseudo_all_acc" in history[-1]


def test_train_missing_manifest(tmp_path, cfg_file, capsys):
    missing = tmp_path / "nope.jsonl"
    rc = main(["train", "--config", cfg_file, "--seed", "0", "--source", str(missing), "--target", str(missing), "--out", str(tmp_path)])
    assert rc != 0
    assert str(missing) in capsys.readouterr().err


def test_bad_config_key(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"train": {"learning_rate": 1}}))
    assert main(["synth", "--config", str(path), "--seed", "0", "--out", str(tmp_path)]) == 2


def test_eval_and_sweep(tmp_path, cfg_file, synth_dir, capsys):
    run = tmp_path / "run"
    _train(cfg_file, synth_dir, run)
    ck = str(run / "checkpoint")
    target = str(synth_dir / "target.jsonl")
    assert main(["eval", "--checkpoint", ck, "--target", target, "--out", str(run)]) == 0
    first = (run / "metrics.json").read_bytes()
    report = json.loads(first)
    assert {"all_acc", "os_star", "unk", "hos", "confusion"} <= set(report)
    assert main(["eval", "--checkpoint", ck, "--target", target, "--out", str(run)]) == 0
    assert (run / "metrics.json").read_bytes() == first
    assert "HOS" in capsys.readouterr().out

    assert main(["eval", "--checkpoint", str(tmp_path / "none"), "--target", target, "--out", str(run)]) != 0

    sweep = ["sweep-gamma", "--checkpoint", ck, "--source", str(synth_dir / "source.jsonl"), "--target", target, "--out", str(run)]
    assert main(sweep + ["--gammas", "0.3"]) == 0
    assert len(json.loads((run / "sweep_gamma.json").read_text())) == 1
    assert main(sweep) == 0
    records = json.loads((run / "sweep_gamma.json").read_text())
    assert len(records) == 21
    assert {"gamma", "hos", "os_star", "unk"} <= set(records[0])
    rates = [r["rejection_rate"] for r in records]
    assert rates == sorted(rates)
    assert records[-1]["gamma"] == 1.0 and records[-1]["unk"] == 1.0 and records[-1]["rejection_rate"] == 1.0
    assert records[0]["gamma"] == -1.0 and records[0]["unk"] == 0.0


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--configs", "2", "--out", str(tmp_path)]) == 0
    lines = [line for line in capsys.readouterr().out.splitlines() if line.strip()]
    names = [line.split()[1] for line in lines]
    assert sorted(names) == sorted(OBJECTIVES)
    report = json.loads((tmp_path / "gradcheck.json").read_text())
    assert [r["loss"] for r in report] == list(OBJECTIVES)


def test_gradcheck_fault_injection(capsys):
    assert main(["gradcheck", "--configs", "1", "--inject-fault", "0.01"]) != 0
    assert "FAIL" in capsys.readouterr().out
