import json
import os

import numpy as np

from deskml import checkpoint as CK
from deskml.cli import EXIT_CONFIG, EXIT_USAGE, cli_main


def write_config(tmp_path, extra=None):
    cfg = {
        "model": {"name": "fully_connected_classification"},
        "dataset": {"num_train_examples": 64, "num_eval_examples": 16},
        "batch_size": 8,
        "total_steps": 4,
        "eval_every": 4,
        "optimizer": {"kind": "adam", "lr": 1e-2},
    }
    if extra:
        cfg.update(extra)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def test_run_smoke(tmp_path, capsys):
    wd = str(tmp_path / "run")
    code = cli_main(["run", "--config", write_config(tmp_path),
                     "--workdir", wd, "--seed", "0"])
    assert code == 0
    metrics = json.loads(capsys.readouterr().out.strip())
    assert "accuracy" in metrics and "loss" in metrics
    assert os.path.exists(os.path.join(wd, "metrics.jsonl"))
    assert os.path.exists(os.path.join(wd, "ckpt_4.bin"))


def test_override_zero_lr_leaves_params_at_init(tmp_path, capsys):
    cfg = write_config(tmp_path)
    wd_a = str(tmp_path / "a")
    wd_b = str(tmp_path / "b")
    assert cli_main(["run", "--config", cfg, "--workdir", wd_a,
                     "--override", "optimizer.lr=0.0",
                     "--override", "total_steps=1",
                     "--seed", "3"]) == 0
    assert cli_main(["run", "--config", cfg, "--workdir", wd_b,
                     "--override", "total_steps=0", "--seed", "3"]) == 0
    capsys.readouterr()
    trained = CK.load_checkpoint(os.path.join(wd_a, "ckpt_1.bin"))
    init = CK.load_checkpoint(os.path.join(wd_b, "ckpt_0.bin"))
    for name in init.params:
        assert np.array_equal(trained.params[name].data, init.params[name].data)


def test_missing_config_flag_is_usage_error(tmp_path, capsys):
    code = cli_main(["run", "--workdir", str(tmp_path / "x")])
    capsys.readouterr()
    assert code == EXIT_USAGE


def test_bad_config_file_is_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code = cli_main(["run", "--config", str(bad),
                     "--workdir", str(tmp_path / "x")])
    err = capsys.readouterr().err
    assert code == EXIT_CONFIG
    assert "config error" in err


def test_unknown_override_key_is_config_error(tmp_path, capsys):
    code = cli_main(["run", "--config", write_config(tmp_path),
                     "--workdir", str(tmp_path / "x"),
                     "--override", "no.such.key=1"])
    capsys.readouterr()
    assert code == EXIT_CONFIG
