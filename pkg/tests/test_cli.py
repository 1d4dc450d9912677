import hashlib
import json
from pathlib import Path

import pytest

from headcount.cli import main
from headcount.runconfig import (RunConfig, apply_overrides, load_run_config,
                                 run_config_from_dict)

TEST_SPACE = [
    {"channels": [4, 8], "repeats": [1], "kernels": [10], "stride": 5},
    {"channels": [8, 16], "repeats": [1, 2], "kernels": [4], "stride": 2},
    {"channels": [16, 24], "repeats": [1, 2], "kernels": [3, 5], "stride": 1},
]


def write_config(tmp_path, **overrides) -> str:
    cfg = {
        "seed": 11,
        "output_dir": str(tmp_path / "out"),
        "space": {"preset": "custom", "stages": TEST_SPACE},
        "data": {
            "dir": str(tmp_path / "data"),
            "sample_rate": 8000,
            "segment_seconds": 0.5,
            "train_per_class": 3,
            "val_per_class": 2,
            "test_per_class": 2,
            "train_speakers": 8,
            "test_speakers": 7,
        },
        "train": {"epochs": 2, "batch_size": 8, "lr": 0.05},
        "teacher": {"epochs": 2, "batch_size": 8, "lr": 0.002},
        "kd": {"enabled": True, "tau": 5.0},
        "search": {"mode": "evolutionary", "population": 6, "generations": 3},
    }
    for key, value in overrides.items():
        section, _, leaf = key.partition(".")
        if leaf:
            cfg.setdefault(section, {})[leaf] = value
        else:
            cfg[section] = value
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    return str(path)


class TestRunConfig:
    def test_unknown_top_level_key(self):
        with pytest.raises(ValueError, match="unknown config key 'bogus'"):
            run_config_from_dict({"bogus": 1})

    def test_unknown_nested_key(self):
        with pytest.raises(ValueError, match="unknown config key train.'epoch'"):
            run_config_from_dict({"train": {"epoch": 3}})

    def test_override(self):
        cfg = apply_overrides(RunConfig(), ["train.epochs=9", "output_dir=elsewhere"])
        assert cfg.train.epochs == 9
        assert cfg.output_dir == "elsewhere"

    def test_override_unknown_key(self):
        with pytest.raises(ValueError, match="unknown config key"):
            apply_overrides(RunConfig(), ["train.bogus=1"])

    def test_cost_lengths_derived_from_data(self):
        cfg = run_config_from_dict(
            {"data": {"sample_rate": 8000, "segment_seconds": 1.0}})
        assert cfg.cost_input_len() == 8000
        assert cfg.cost_segment_seconds() == 1.0
        cfg2 = run_config_from_dict({"cost": {"input_len": 123,
                                              "segment_seconds": 2.0}})
        assert cfg2.cost_input_len() == 123
        assert cfg2.cost_segment_seconds() == 2.0

    def test_load_rejects_bad_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{nope")
        with pytest.raises(ValueError, match="invalid JSON"):
            load_run_config(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run the whole desk pipeline once; individual tests inspect the results."""
    tmp_path = tmp_path_factory.mktemp("cli")
    cfg_path = write_config(tmp_path)
    assert main(["synth-data", "-c", cfg_path]) == 0
    assert main(["train-teacher", "-c", cfg_path]) == 0
    assert main(["train-supernet", "-c", cfg_path]) == 0
    assert main(["search", "-c", cfg_path]) == 0
    return tmp_path, cfg_path


class TestPipeline:
    def test_dataset_written(self, pipeline):
        tmp_path, _ = pipeline
        data = tmp_path / "data"
        assert (data / "manifest_train.csv").exists()
        assert (data / "manifest_val.csv").exists()
        assert (data / "manifest_test.csv").exists()
        assert (data / "synth_config.json").exists()

    def test_teacher_artifacts(self, pipeline):
        tmp_path, _ = pipeline
        out = tmp_path / "out"
        assert (out / "teacher.ckpt").exists()
        assert (out / "teacher_losses.csv").exists()
        assert (out / "teacher_loss_curve.png").exists()

    def test_supernet_artifacts(self, pipeline):
        tmp_path, _ = pipeline
        out = tmp_path / "out"
        assert (out / "supernet.ckpt").exists()
        assert (out / "supernet_losses.csv").exists()
        assert (out / "supernet_loss_curve.png").exists()
        assert (out / "logs" / "ledger.txt").exists()

    def test_search_artifacts(self, pipeline):
        tmp_path, _ = pipeline
        search = tmp_path / "out" / "search"
        for name in ("report.txt", "best_config.json", "candidates.csv",
                     "pareto.csv", "pareto.png", "history.csv", "history.png"):
            assert (search / name).exists(), name
        report = (search / "report.txt").read_text()
        assert "best candidate" in report
        pareto = (search / "pareto.csv").read_text().splitlines()
        assert pareto[0] == "config,error,latency_ms,daily_energy_mwh"

    def test_eval_best_and_preset(self, pipeline, capsys):
        tmp_path, cfg_path = pipeline
        assert main(["eval", "-c", cfg_path, "--best", "--split", "test"]) == 0
        out = capsys.readouterr().out
        assert "test error rate:" in out
        assert main(["eval", "-c", cfg_path, "--preset", "max",
                     "--split", "val"]) == 0

    def test_eval_standalone_checkpoint(self, pipeline, capsys):
        tmp_path, cfg_path = pipeline
        teacher = str(tmp_path / "out" / "teacher.ckpt")
        assert main(["eval", "-c", cfg_path, "--checkpoint", teacher,
                     "--split", "test"]) == 0
        assert "error rate" in capsys.readouterr().out

    def test_cost_command(self, pipeline, capsys):
        _, cfg_path = pipeline
        assert main(["cost", "-c", cfg_path, "--preset", "min"]) == 0
        out = capsys.readouterr().out
        assert "latency_ms:" in out
        assert "daily_energy_mwh:" in out

    def test_pareto_export(self, pipeline, capsys):
        tmp_path, cfg_path = pipeline
        assert main(["pareto-export", "-c", cfg_path]) == 0
        out_dir = tmp_path / "out"
        assert (out_dir / "pareto.csv").exists()
        assert (out_dir / "pareto.png").exists()

    def test_search_idempotent_bytes(self, pipeline):
        tmp_path, cfg_path = pipeline
        search = tmp_path / "out" / "search"
        before = hashlib.sha256((search / "candidates.csv").read_bytes()).hexdigest()
        assert main(["search", "-c", cfg_path]) == 0
        after = hashlib.sha256((search / "candidates.csv").read_bytes()).hexdigest()
        assert before == after

    def test_exhaustive_matches_evolutionary(self, pipeline, capsys):
        tmp_path, cfg_path = pipeline
        best = json.loads((tmp_path / "out" / "search" / "best_config.json")
                          .read_text())
        assert main(["search", "-c", cfg_path, "--set", "search.mode=exhaustive",
                     "--set", f"output_dir={tmp_path / 'out2'}",
                     "--checkpoint", str(tmp_path / "out" / "supernet.ckpt")]) == 0
        exact = json.loads((tmp_path / "out2" / "search" / "best_config.json")
                           .read_text())
        # tiny GA params here; the oracle-equality guarantee at default params
        # lives in test_searcher. Exhaustive can only be at least as good.
        assert exact["error"] <= best["error"]

    def test_resume_continues_step_count(self, pipeline):
        tmp_path, cfg_path = pipeline
        from headcount.trainer import load_checkpoint
        out = tmp_path / "out"
        steps_before = load_checkpoint(out / "supernet.ckpt").meta["steps"]
        assert main(["train-supernet", "-c", cfg_path, "--resume"]) == 0
        steps_after = load_checkpoint(out / "supernet.ckpt").meta["steps"]
        assert steps_after == 2 * steps_before


class TestCliErrors:
    def test_unknown_config_key_exits_nonzero(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"nonsense": 1}))
        assert main(["synth-data", "-c", str(path)]) == 1
        assert "unknown config key" in capsys.readouterr().err

    def test_missing_teacher_checkpoint(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path)
        assert main(["synth-data", "-c", cfg_path]) == 0
        assert main(["train-supernet", "-c", cfg_path]) == 1
        assert "error:" in capsys.readouterr().err

    def test_kd_requires_tau(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, **{"kd.tau": None})
        assert main(["synth-data", "-c", cfg_path]) == 0
        assert main(["train-teacher", "-c", cfg_path]) == 0
        assert main(["train-supernet", "-c", cfg_path]) == 1
        assert "kd.tau" in capsys.readouterr().err

    def test_eval_requires_subnet_selector(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path)
        assert main(["synth-data", "-c", cfg_path]) == 0
        assert main(["train-supernet", "-c", cfg_path,
                     "--set", "kd.enabled=false"]) == 0
        assert main(["eval", "-c", cfg_path]) == 1
        assert "--genes" in capsys.readouterr().err


class TestGradcheckCommand:
    def test_passes(self, capsys):
        assert main(["gradcheck", "--cases", "2"]) == 0
        out = capsys.readouterr().out
        assert "conv1d" in out and "FAIL" not in out
