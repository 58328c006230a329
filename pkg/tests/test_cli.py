"""End-to-end CLI behavior: artifacts, determinism, comparisons."""

import csv
import json
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

import pytest

from adamix.cli import main
from adamix.data_synth import DatasetSpec, import_dataset
from adamix.runner import (CURVES_COLUMNS, RunConfig, run_compare,
                           run_training)
from adamix.ssl import STEPLOG_COLUMNS, ParadigmConfig

TINY_DATASET = dict(n_train=6, n_val=2, n_test=2, labeled_fraction=0.5,
                    image_size=32, seed=0)


def tiny_config(**overrides) -> RunConfig:
    cfg = RunConfig(
        dataset=DatasetSpec(**TINY_DATASET),
        paradigm=ParadigmConfig(strategy="adamix", patch_size=8,
                                max_patches=16),
        epochs=2, labeled_batch=2, unlabeled_batch=2, seed=0)
    return replace(cfg, **overrides) if overrides else cfg


def write_config(cfg: RunConfig, path: Path) -> Path:
    path.write_text(json.dumps(cfg.to_json_dict(), indent=2))
    return path


def read_csv(path: Path) -> tuple[tuple[str, ...], list[list[str]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        return header, list(reader)


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    """One tiny adamix/self-training run shared across read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = write_config(tiny_config(), root / "run.json")
    run_dir = root / "run0"
    rc = main(["train", "--config", str(cfg_path), "--out", str(run_dir),
               "--quiet"])
    assert rc == 0
    return cfg_path, run_dir


class TestTrain:
    def test_artifacts_exist(self, trained_run):
        _, run_dir = trained_run
        for name in ("config.json", "steplog.csv", "curves.csv",
                     "checkpoint.amck"):
            assert (run_dir / name).exists()

    def test_steplog_schema_and_length(self, trained_run):
        _, run_dir = trained_run
        header, rows = read_csv(run_dir / "steplog.csv")
        assert header == STEPLOG_COLUMNS
        # 6 train samples / (2+2) per step -> 2 steps/epoch, 2 epochs.
        assert len(rows) == 4
        assert [r[0] for r in rows] == ["0", "1", "2", "3"]

    def test_curves_schema_and_length(self, trained_run):
        _, run_dir = trained_run
        header, rows = read_csv(run_dir / "curves.csv")
        assert header == CURVES_COLUMNS
        assert len(rows) == 2  # one row per epoch
        assert rows[0][:3] == ["adamix", "self_training", "0"]

    def test_refuses_existing_directory(self, trained_run, capsys):
        cfg_path, run_dir = trained_run
        rc = main(["train", "--config", str(cfg_path), "--out", str(run_dir),
                   "--quiet"])
        assert rc == 2
        assert "already exists" in capsys.readouterr().err

    def test_replay_from_recorded_config_is_bit_identical(self, trained_run,
                                                          tmp_path):
        _, run_dir = trained_run
        replay_dir = tmp_path / "replay"
        rc = main(["train", "--config", str(run_dir / "config.json"),
                   "--out", str(replay_dir), "--quiet"])
        assert rc == 0
        original = (run_dir / "steplog.csv").read_bytes()
        replayed = (replay_dir / "steplog.csv").read_bytes()
        assert original == replayed

    def test_strategy_override_recorded(self, tmp_path):
        cfg_path = write_config(tiny_config(epochs=1), tmp_path / "run.json")
        run_dir = tmp_path / "none-run"
        rc = main(["train", "--config", str(cfg_path), "--strategy", "none",
                   "--out", str(run_dir), "--quiet"])
        assert rc == 0
        recorded = json.loads((run_dir / "config.json").read_text())
        assert recorded["paradigm"]["strategy"] == "none"

    def test_supervised_loss_starts_identically_across_strategies(
            self, trained_run, tmp_path):
        # Same seed, same init: the self-paced mixer is still in its identity
        # regime at iteration 0, so the first supervised-loss entry matches
        # the unmixed run exactly.
        cfg_path, run_dir = trained_run
        none_dir = tmp_path / "none"
        rc = main(["train", "--config", str(cfg_path), "--strategy", "none",
                   "--out", str(none_dir), "--quiet"])
        assert rc == 0
        _, rows_adamix = read_csv(run_dir / "steplog.csv")
        _, rows_none = read_csv(none_dir / "steplog.csv")
        sup_col = STEPLOG_COLUMNS.index("loss_sup")
        assert rows_adamix[0][sup_col] == rows_none[0][sup_col]


class TestEval:
    def test_eval_writes_csv(self, trained_run, capsys):
        _, run_dir = trained_run
        rc = main(["eval", "--run", str(run_dir), "--split", "test"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "mean DSC over 2 samples" in out
        header, rows = read_csv(run_dir / "eval.csv")
        assert header[:2] == ("sample_id", "class")
        # 2 test samples x 2 foreground classes.
        assert len(rows) == 4

    def test_eval_other_split(self, trained_run):
        _, run_dir = trained_run
        rc = main(["eval", "--run", str(run_dir), "--split", "val"])
        assert rc == 0

    def test_eval_missing_run(self, tmp_path, capsys):
        rc = main(["eval", "--run", str(tmp_path / "nonexistent")])
        assert rc == 2


class TestCompare:
    def test_three_strategies_three_seeds(self, tmp_path):
        cfg_path = write_config(tiny_config(epochs=1), tmp_path / "base.json")
        out = tmp_path / "cmp"
        rc = main(["compare", "--config", str(cfg_path),
                   "--seeds", "0,1,2",
                   "--strategies", "cutmix,umix,adamix",
                   "--out", str(out)])
        assert rc == 0
        run_dirs = sorted(p.name for p in (out / "runs").iterdir())
        assert len(run_dirs) == 9
        for strategy in ("cutmix", "umix", "adamix"):
            for seed in (0, 1, 2):
                assert f"self_training-{strategy}-seed{seed}" in run_dirs
        header, rows = read_csv(out / "curves.csv")
        assert header == CURVES_COLUMNS
        assert len(rows) == 9  # 9 runs x 1 epoch
        assert {(r[0], r[2]) for r in rows} == {
            (s, str(seed)) for s in ("cutmix", "umix", "adamix")
            for seed in (0, 1, 2)}
        header, rows = read_csv(out / "summary.csv")
        assert header == ("strategy", "paradigm", "n_seeds", "dsc_mean",
                          "dsc_std")
        assert len(rows) == 3
        assert all(r[2] == "3" for r in rows)

    def test_parallel_workers(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ADAMIX_NUM_WORKERS", "2")
        cfg_path = write_config(tiny_config(epochs=1), tmp_path / "base.json")
        out = tmp_path / "cmp"
        rc = main(["compare", "--config", str(cfg_path), "--seeds", "0",
                   "--strategies", "none,adamix", "--out", str(out)])
        assert rc == 0
        assert len(list((out / "runs").iterdir())) == 2

    def test_non_comparable_configs_rejected(self, tmp_path):
        base = tiny_config(epochs=1,
                           output_dir=str(tmp_path / "a"))
        other = tiny_config(epochs=2,
                            output_dir=str(tmp_path / "b"))
        with pytest.raises(ValueError, match="comparable"):
            run_compare([base, other], [0], tmp_path / "cmp")

    def test_duplicate_variants_rejected(self, tmp_path):
        base = tiny_config(epochs=1)
        with pytest.raises(ValueError, match="duplicate"):
            run_compare([base, tiny_config(epochs=1)], [0],
                        tmp_path / "cmp")

    def test_unknown_strategy_exits(self, tmp_path):
        cfg_path = write_config(tiny_config(epochs=1), tmp_path / "base.json")
        with pytest.raises(SystemExit):
            main(["compare", "--config", str(cfg_path), "--seeds", "0",
                  "--strategies", "blend", "--out", str(tmp_path / "cmp")])


class TestPlot:
    def test_plot_renders_pngs(self, trained_run, tmp_path):
        _, run_dir = trained_run
        out = tmp_path / "plots"
        rc = main(["plot", "--curves", str(run_dir), "--out", str(out)])
        assert rc == 0
        for name in ("loss_unsup.png", "loss_val.png", "dsc_val.png"):
            assert (out / name).stat().st_size > 0


class TestGenData:
    def test_export_and_reimport(self, tmp_path, capsys):
        spec = DatasetSpec(**TINY_DATASET)
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(spec.to_json_dict()))
        out = tmp_path / "data"
        rc = main(["gen-data", "--config", str(spec_path),
                   "--out", str(out)])
        assert rc == 0
        assert "10 samples" in capsys.readouterr().out
        spec_back, records = import_dataset(out)
        assert spec_back == spec
        assert len(records) == 10


class TestConfig:
    def test_schema_version_mismatch_exits(self, tmp_path, capsys):
        data = tiny_config().to_json_dict()
        data["schema_version"] = 99
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(data))
        rc = main(["train", "--config", str(path),
                   "--out", str(tmp_path / "run"), "--quiet"])
        assert rc == 2
        assert "schema_version" in capsys.readouterr().err

    def test_unknown_key_exits(self, tmp_path, capsys):
        data = tiny_config().to_json_dict()
        data["epcohs"] = 3
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(data))
        rc = main(["train", "--config", str(path),
                   "--out", str(tmp_path / "run"), "--quiet"])
        assert rc == 2

    def test_patch_grid_mismatch_rejected(self):
        cfg = tiny_config(paradigm=ParadigmConfig(strategy="adamix",
                                                  patch_size=5,
                                                  max_patches=16))
        with pytest.raises(ValueError, match="tile"):
            cfg.validate()

    def test_patch_budget_over_grid_rejected(self):
        cfg = tiny_config(paradigm=ParadigmConfig(strategy="adamix",
                                                  patch_size=16,
                                                  max_patches=16))
        # 32/16 -> 2x2 grid of 4 patches; a 16-patch budget cannot fit.
        with pytest.raises(ValueError, match="budget"):
            cfg.validate()

    def test_run_training_refuses_existing_dir(self, tmp_path):
        target = tmp_path / "dup"
        target.mkdir()
        with pytest.raises(FileExistsError):
            run_training(tiny_config(epochs=1, output_dir=str(target)))


class TestEntryPoint:
    def test_console_script_installed(self):
        result = subprocess.run([sys.executable, "-m", "pytest",
                                 "--version"], capture_output=True)
        assert result.returncode == 0  # sanity: subprocess plumbing works
        result = subprocess.run(["adamix", "--help"], capture_output=True,
                                text=True)
        assert result.returncode == 0
        assert "gen-data" in result.stdout
