import json

import pytest

from uwb_ssr.cli import ConfigError, main, resolve_config

TINY = {
    "synth": {"n_words": 3, "n_sessions": 4, "frames_min": 10, "frames_max": 16, "seed": 2},
    "model": {"channels": [16, 32, 48], "head_hidden": 12},
    "train": {"max_epochs": 2, "warmup_epochs": 1, "batch_size": 4},
}


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return str(p)


@pytest.fixture
def raw_dir(tmp_path, cfg_file):
    out = tmp_path / "raw"
    assert main(["generate", "--config", cfg_file, "--out", str(out)]) == 0
    return out


def test_generate_and_inspect(raw_dir, capsys):
    assert json.loads((raw_dir / "run_config.json").read_text())["synth"]["n_words"] == 3
    assert main(["inspect", str(raw_dir / "sessions" / "s01" / "w00.uwbf")]) == 0
    out = capsys.readouterr().out
    assert "bins (N)    256" in out and "100.000 Hz" in out


def test_preprocess_train_evaluate(tmp_path, raw_dir, cfg_file, capsys):
    pp = tmp_path / "pp"
    assert main(["preprocess", "--config", cfg_file, "--data", str(raw_dir), "--out", str(pp)]) == 0
    run = tmp_path / "run"
    assert main(["train", "--config", cfg_file, "--data", str(pp), "--fold", "1", "--out", str(run)]) == 0
    summary = json.loads((run / "fold_01.json").read_text())
    assert summary["test_session"] == "s02" and len(summary["val_sessions"]) == 1
    capsys.readouterr()
    assert main(["evaluate", "--config", cfg_file, "--data", str(pp),
                 "--checkpoint", str(run / "fold_01.ckpt")]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["accuracy"] == summary["accuracy"] and res["total"] == 3


def test_cv_reproducible_from_run_config(tmp_path, cfg_file):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["cv", "--config", cfg_file, "--out", str(a)]) == 0
    assert main(["cv", "--config", str(a / "run_config.json"), "--out", str(b)]) == 0
    text = (a / "cv_report.csv").read_text()
    assert text == (b / "cv_report.csv").read_text()
    assert len(text.strip().splitlines()) == 1 + 4 + 2


def test_gradcheck_command(cfg_file, capsys):
    assert main(["gradcheck", "--config", cfg_file, "--coords", "30"]) == 0
    assert "max relative error" in capsys.readouterr().out


def test_exit_codes(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["generate", "--out", str(tmp_path), "--bogus"])
    assert exc.value.code == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"learning_rate": 1.0}}))
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    assert "train.learning_rate" in capsys.readouterr().err
    junk = tmp_path / "junk.uwbf"
    junk.write_bytes(b"nope")
    assert main(["inspect", str(junk)]) == 1


def test_toml_config_and_overrides(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('[synth]\nn_words = 4\nseed = 3\n[run]\nworkers = 2\n')
    from uwb_ssr.cli import _read_config_file
    doc = _read_config_file(p)
    cfg = resolve_config(doc, seed=9)
    assert cfg.synth.n_words == 4 and cfg.synth.seed == 9 and cfg.train.seed == 9 and cfg.workers == 2
    with pytest.raises(ConfigError, match="dropout"):
        resolve_config({"model": {"dropout": 2.0}})
    with pytest.raises(ConfigError, match="section"):
        resolve_config({"optim": {}})
