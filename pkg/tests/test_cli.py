"""End-to-end tests for the command line, one subprocess-free call at a time.

Everything goes through cli.main(argv) so exit codes are asserted
directly. Training runs use a handful of iterations on the shared tiny
dataset; the point here is plumbing, not accuracy.
"""

import json
import os
from pathlib import Path

import numpy as np
import pytest

import fogda.config as cfg
from fogda.cli import ABLATION_ROWS, main
from fogda.models import load_checkpoint
from fogda.scenes import read_png


def write_config(path, data_dir, run_dir, iterations=2, protocol="da",
                 counts=None, scene_seed=7, extra_train=None):
    counts = counts or {"train_source": 4, "train_target": 4,
                        "test_target": 2, "test_clear": 2}
    train = {"iterations": iterations, "checkpoint_every": max(iterations, 1),
             "eval_every": max(iterations, 1), "pl_warmup": 0}
    train.update(extra_train or {})
    payload = {
        "version": 1,
        "protocol": protocol,
        "scene": {"counts": counts, "seed": scene_seed},
        "train": train,
        "paths": {"data_dir": str(data_dir), "run_dir": str(run_dir)},
    }
    Path(path).write_text(json.dumps(payload))
    return payload


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """One synthesized dataset plus a finished 2-iteration training run."""
    root = tmp_path_factory.mktemp("cli")
    config_path = root / "c.json"
    write_config(config_path, root / "d", root / "r")
    assert main(["synth", "--config", str(config_path)]) == 0
    assert main(["train", "--config", str(config_path)]) == 0
    return root


def config_of(root):
    return str(root / "c.json")


class TestExitCodes:
    def test_missing_config_file(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "nope.json")]) == 3

    def test_malformed_json(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"version": 1,\n  "protocol: "da"}')
        assert main(["config", "--check", str(bad)]) == 2
        err = capsys.readouterr().err
        assert "line 2" in err and "column" in err

    def test_unknown_top_level_key(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"version": 1, "trian": {}}))
        assert main(["config", "--check", str(bad)]) == 2

    def test_unknown_train_key(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"version": 1, "train": {"learning_rate": 1}}))
        assert main(["config", "--check", str(bad)]) == 2
        assert "learning_rate" in capsys.readouterr().err

    def test_unknown_scene_key(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"version": 1, "scene": {"fog": 1}}))
        assert main(["config", "--check", str(bad)]) == 2

    def test_bad_version(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"version": 2}))
        assert main(["config", "--check", str(bad)]) == 2

    def test_config_without_mode_flag(self):
        assert main(["config"]) == 2

    def test_unknown_subcommand_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2


class TestConfigCommand:
    def test_dump_defaults_round_trips(self, capsys):
        assert main(["config", "--dump-defaults"]) == 0
        dumped = json.loads(capsys.readouterr().out)
        rebuilt = cfg.from_dict(dumped)
        assert json.loads(json.dumps(rebuilt.to_dict())) == dumped
        assert rebuilt.scene == cfg.RunConfig().scene

    def test_check_valid_file(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        write_config(path, tmp_path / "d", tmp_path / "r")
        assert main(["config", "--check", str(path)]) == 0
        assert "valid" in capsys.readouterr().out

    def test_env_seed_overrides_everything(self, tmp_path, monkeypatch, capsys):
        path = tmp_path / "c.json"
        write_config(path, tmp_path / "d", tmp_path / "r", scene_seed=5)
        monkeypatch.setenv(cfg.SEED_ENV, "99")
        loaded = cfg.resolve(cfg.load_file(path))
        assert loaded.scene.seed == 99 and loaded.train.seed == 99

    def test_env_seed_must_be_integer(self, tmp_path, monkeypatch):
        path = tmp_path / "c.json"
        write_config(path, tmp_path / "d", tmp_path / "r")
        monkeypatch.setenv(cfg.SEED_ENV, "lucky")
        assert main(["config", "--check", str(path)]) == 2


class TestSynth:
    def test_synth_then_refuse_overwrite(self, cli_workspace):
        assert main(["synth", "--config", config_of(cli_workspace)]) == 3

    def test_synth_force_rewrites(self, cli_workspace):
        assert main(["synth", "--config", config_of(cli_workspace),
                     "--force"]) == 0

    def test_manifest_and_files_exist(self, cli_workspace):
        data = cli_workspace / "d"
        manifest = json.loads((data / "manifest.json").read_text())
        assert set(manifest["splits"]) == {"train_source", "train_target",
                                           "test_target", "test_clear"}
        sealed = list((data / "train_target").glob("*_labels.sealed.json"))
        assert len(sealed) == 4


class TestTrain:
    def test_run_dir_contents(self, cli_workspace):
        run = cli_workspace / "r"
        assert (run / cfg.LOCK_NAME).exists()
        assert (run / "metrics.json").exists()
        assert (run / "log.jsonl").exists()
        assert (run / "checkpoints" / "ckpt_2.bin").exists()
        assert (run / "checkpoints" / "ema_2.bin").exists()

    def test_refuses_nonempty_run_dir(self, cli_workspace):
        assert main(["train", "--config", config_of(cli_workspace)]) == 3

    def test_force_requires_lock_marker(self, tmp_path):
        config_path = tmp_path / "c.json"
        write_config(config_path, tmp_path / "d", tmp_path / "precious")
        (tmp_path / "precious").mkdir()
        (tmp_path / "precious" / "thesis.txt").write_text("do not delete")
        assert main(["synth", "--config", str(config_path)]) == 0
        assert main(["train", "--config", str(config_path), "--force"]) == 3
        assert (tmp_path / "precious" / "thesis.txt").exists()

    def test_iterations_zero_writes_initial_checkpoint(self, cli_workspace,
                                                       tmp_path):
        run = tmp_path / "r0"
        assert main(["train", "--config", config_of(cli_workspace),
                     "--run-dir", str(run), "--iterations", "0"]) == 0
        names = sorted(p.name for p in (run / "checkpoints").iterdir())
        assert names == ["ckpt_0.bin", "ema_0.bin"]
        assert (run / "log.jsonl").read_text() == ""

    def test_lock_file_records_resolved_config(self, cli_workspace):
        lock = json.loads((cli_workspace / "r" / cfg.LOCK_NAME).read_text())
        assert lock["protocol"] == "da"
        assert lock["train"]["iterations"] == 2

    def test_source_only_writes_lowerbound_metrics(self, cli_workspace,
                                                   tmp_path):
        run = tmp_path / "rso"
        assert main(["train", "--config", config_of(cli_workspace),
                     "--run-dir", str(run), "--protocol", "source_only"]) == 0
        metrics = json.loads((run / "metrics.json").read_text())
        assert metrics["protocol"] == "lowerbound"
        _params, header = load_checkpoint(run / "checkpoints" / "ckpt_2.bin")
        assert header["protocol"] == "source_only"


class TestEval:
    def test_eval_checkpoint(self, cli_workspace, tmp_path, capsys):
        out = tmp_path / "m.json"
        assert main(["eval",
                     "--checkpoint",
                     str(cli_workspace / "r" / "checkpoints" / "ckpt_2.bin"),
                     "--data-dir", str(cli_workspace / "d"),
                     "--out", str(out)]) == 0
        metrics = json.loads(out.read_text())
        assert metrics["protocol"] == "da"
        assert 0.0 <= metrics["map"] <= 1.0
        assert "student" in capsys.readouterr().out

    def test_ema_flag_swaps_basename(self, cli_workspace, tmp_path, capsys):
        out = tmp_path / "m.json"
        assert main(["eval",
                     "--checkpoint",
                     str(cli_workspace / "r" / "checkpoints" / "ckpt_2.bin"),
                     "--data-dir", str(cli_workspace / "d"),
                     "--ema", "--out", str(out)]) == 0
        assert "ema_2.bin" in capsys.readouterr().out

    def test_da_checkpoint_refuses_clear_split(self, cli_workspace, tmp_path):
        assert main(["eval",
                     "--checkpoint",
                     str(cli_workspace / "r" / "checkpoints" / "ckpt_2.bin"),
                     "--data-dir", str(cli_workspace / "d"),
                     "--split", "test_clear",
                     "--out", str(tmp_path / "m.json")]) == 2

    def test_train_splits_rejected(self, cli_workspace, tmp_path):
        assert main(["eval",
                     "--checkpoint",
                     str(cli_workspace / "r" / "checkpoints" / "ckpt_2.bin"),
                     "--data-dir", str(cli_workspace / "d"),
                     "--split", "train_source",
                     "--out", str(tmp_path / "m.json")]) == 2

    def test_missing_checkpoint(self, cli_workspace, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "ghost.bin"),
                     "--data-dir", str(cli_workspace / "d")]) == 3

    def test_corrupt_checkpoint(self, cli_workspace, tmp_path):
        bad = tmp_path / "ckpt_9.bin"
        bad.write_bytes(b"not a checkpoint at all")
        assert main(["eval", "--checkpoint", str(bad),
                     "--data-dir", str(cli_workspace / "d")]) == 3

    def test_upperbound_tag(self, cli_workspace, tmp_path):
        run = tmp_path / "rso"
        assert main(["train", "--config", config_of(cli_workspace),
                     "--run-dir", str(run), "--protocol", "source_only"]) == 0
        out = tmp_path / "upper.json"
        assert main(["eval",
                     "--checkpoint", str(run / "checkpoints" / "ckpt_2.bin"),
                     "--data-dir", str(cli_workspace / "d"),
                     "--split", "test_clear", "--out", str(out)]) == 0
        assert json.loads(out.read_text())["protocol"] == "upperbound"


class TestDehaze:
    def test_round_trip_dimensions(self, cli_workspace, tmp_path):
        src = next((cli_workspace / "d" / "test_target").glob("*_foggy.png"))
        dst = tmp_path / "defogged.png"
        assert main(["dehaze", str(src), str(dst)]) == 0
        before, after = read_png(src), read_png(dst)
        assert after.shape == before.shape
        assert after.min() >= 0.0 and after.max() <= 1.0
        assert not np.array_equal(before, after)

    def test_missing_input(self, tmp_path):
        assert main(["dehaze", str(tmp_path / "ghost.png"),
                     str(tmp_path / "out.png")]) == 3


class TestAblate:
    def test_table_structure(self, cli_workspace, tmp_path, capsys):
        out = tmp_path / "ab"
        assert main(["ablate", "--config", config_of(cli_workspace),
                     "--out", str(out), "--seeds", "0,1",
                     "--iterations", "1"]) == 0
        capsys.readouterr()
        table = json.loads((out / "ablation_table.json").read_text())
        assert table["seeds"] == [0, 1]
        assert table["iterations"] == 1
        names = [row["name"] for row in table["rows"]]
        assert names == [name for name, _ in ABLATION_ROWS]
        first = table["rows"][0]
        assert first["toggles"] == {"deb": False, "cst": False,
                                    "rec": False, "pl": False}
        for row in table["rows"]:
            assert set(row["per_seed"]) == {"0", "1"}
            assert row["mean"] == pytest.approx(
                np.mean([row["per_seed"]["0"], row["per_seed"]["1"]]))
        full = table["rows"][-1]
        assert full["toggles"] == {"deb": True, "cst": True,
                                   "rec": True, "pl": True}
        lock = json.loads((out / "full_seed1" / cfg.LOCK_NAME).read_text())
        assert lock["train"]["seed"] == 1

    def test_bad_seed_list(self, cli_workspace, tmp_path):
        assert main(["ablate", "--config", config_of(cli_workspace),
                     "--out", str(tmp_path / "ab"), "--seeds", "0,x"]) == 2

    def test_source_only_config_rejected(self, cli_workspace, tmp_path):
        path = tmp_path / "c.json"
        write_config(path, cli_workspace / "d", tmp_path / "r",
                     protocol="source_only")
        assert main(["ablate", "--config", str(path),
                     "--out", str(tmp_path / "ab")]) == 2
