import json
import os
import shutil

import numpy as np
import pytest

from advhash.cli import EXIT_CONFIG, EXIT_OK, main
from advhash.config import (
    experiment_from_dict,
    experiment_to_dict,
    load_experiment_config,
)
from advhash.data import ConfigurationError


def tiny_config_dict(out_dir, **train_overrides):
    train = dict(epochs=2, batch_size=8, code_length=8, image_size=16,
                 bands=2, seed=0, mask_hidden=8, learning_rate=1e-2)
    train.update(train_overrides)
    return {
        "dataset": {"kind": "synthetic", "classes": 2, "per_class": 12,
                    "image_size": 16, "seed": 3},
        "split": {"labeled_per_class": 4, "query_per_class": 2, "seed": 1},
        "train": train,
        "out_dir": str(out_dir),
    }


def write_config(tmp_path, name="config.json", **overrides):
    cfg = tiny_config_dict(tmp_path / "run", **overrides)
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path, cfg


class TestConfigParsing:
    def test_round_trip_identity(self, tmp_path):
        path, _ = write_config(tmp_path)
        cfg = load_experiment_config(path)
        again = experiment_from_dict(experiment_to_dict(cfg))
        assert again == cfg

    def test_unknown_key_rejected(self, tmp_path):
        cfg = tiny_config_dict(tmp_path / "run")
        cfg["train"]["lerning_rate"] = 0.1
        path = tmp_path / "config.json"
        path.write_text(json.dumps(cfg))
        with pytest.raises(ConfigurationError):
            load_experiment_config(path)

    def test_unknown_top_level_key_rejected(self, tmp_path):
        cfg = tiny_config_dict(tmp_path / "run")
        cfg["outdir"] = cfg.pop("out_dir")
        path = tmp_path / "config.json"
        path.write_text(json.dumps(cfg))
        with pytest.raises(ConfigurationError):
            load_experiment_config(path)

    def test_invalid_json_rejected(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("{not json")
        with pytest.raises(ConfigurationError):
            load_experiment_config(path)


class TestTrainCommand:
    def test_missing_config_exit_2(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG

    def test_usage_error_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["train"])
        assert exc.value.code == 2

    def test_train_outputs(self, tmp_path):
        path, cfg = write_config(tmp_path)
        assert main(["train", "--config", str(path)]) == EXIT_OK
        out = tmp_path / "run"
        assert (out / "checkpoint.pt").exists()
        assert (out / "metrics.csv").exists()
        assert (out / "split.json").exists()
        # config snapshot is copied verbatim
        assert (out / "config.json").read_bytes() == path.read_bytes()

    def test_reproducible_csv(self, tmp_path):
        path_a, _ = write_config(tmp_path)
        main(["train", "--config", str(path_a)])
        csv_a = (tmp_path / "run" / "metrics.csv").read_bytes()
        shutil.rmtree(tmp_path / "run")
        main(["train", "--config", str(path_a)])
        csv_b = (tmp_path / "run" / "metrics.csv").read_bytes()
        assert csv_a == csv_b

    def test_resume_bit_exact(self, tmp_path):
        # lr_decay=1.0 keeps per-epoch behavior independent of the epoch
        # target, so the 2-epoch run is an exact prefix of the 4-epoch run
        path4, _ = write_config(tmp_path, name="c4.json", epochs=4, lr_decay=1.0)
        main(["train", "--config", str(path4)])
        full_csv = (tmp_path / "run" / "metrics.csv").read_bytes()
        shutil.rmtree(tmp_path / "run")

        path2, _ = write_config(tmp_path, name="c2.json", epochs=2, lr_decay=1.0)
        main(["train", "--config", str(path2)])
        ckpt = tmp_path / "run" / "checkpoint.pt"
        saved = tmp_path / "mid.pt"
        shutil.copyfile(ckpt, saved)
        # continue with the 4-epoch config from the 2-epoch checkpoint
        assert main(["train", "--config", str(path4),
                     "--resume", str(saved)]) == EXIT_OK
        resumed_csv = (tmp_path / "run" / "metrics.csv").read_bytes()
        assert resumed_csv == full_csv

    def test_resume_missing_checkpoint(self, tmp_path):
        path, _ = write_config(tmp_path)
        assert main(["train", "--config", str(path),
                     "--resume", str(tmp_path / "none.pt")]) == EXIT_CONFIG


class TestEvalCommand:
    def test_eval_metrics_json(self, tmp_path):
        path, _ = write_config(tmp_path)
        main(["train", "--config", str(path)])
        ckpt = tmp_path / "run" / "checkpoint.pt"
        assert main(["eval", "--ckpt", str(ckpt), "--cutoff", "5"]) == EXIT_OK
        metrics = json.loads((tmp_path / "run" / "metrics.json").read_text())
        assert metrics["code_length"] == 8
        assert set(metrics["map"]) == {"full", "5"}
        assert 0.0 <= metrics["map"]["full"] <= 1.0
        assert len(metrics["pr_curve"]["radius"]) == 9

    def test_eval_never_builds_generator(self, tmp_path, monkeypatch):
        path, _ = write_config(tmp_path)
        main(["train", "--config", str(path)])
        ckpt = tmp_path / "run" / "checkpoint.pt"

        import advhash.generator as gen_mod

        def forbidden(*a, **k):
            raise AssertionError("generator constructed during eval")

        monkeypatch.setattr(gen_mod.HardSampleGenerator, "__init__", forbidden)
        assert main(["eval", "--ckpt", str(ckpt)]) == EXIT_OK

    def test_eval_deterministic(self, tmp_path):
        path, _ = write_config(tmp_path)
        main(["train", "--config", str(path)])
        ckpt = tmp_path / "run" / "checkpoint.pt"
        out1 = tmp_path / "m1.json"
        out2 = tmp_path / "m2.json"
        main(["eval", "--ckpt", str(ckpt), "--out", str(out1)])
        main(["eval", "--ckpt", str(ckpt), "--out", str(out2)])
        assert out1.read_bytes() == out2.read_bytes()

    def test_eval_missing_ckpt(self, tmp_path):
        assert main(["eval", "--ckpt", str(tmp_path / "no.pt")]) == EXIT_CONFIG

    def test_eval_unknown_split(self, tmp_path):
        path, _ = write_config(tmp_path)
        main(["train", "--config", str(path)])
        ckpt = tmp_path / "run" / "checkpoint.pt"
        assert main(["eval", "--ckpt", str(ckpt),
                     "--split", "train"]) == EXIT_CONFIG


class TestAblateCommand:
    def test_tiny_matrix(self, tmp_path):
        base = tiny_config_dict(tmp_path / "ablate", epochs=1)
        del base["out_dir"]
        manifest = {
            "base": base,
            "variants": ["no_adversarial", "fixed_paced(1.0)"],
            "seeds": [0, 1],
            "out_dir": str(tmp_path / "ablate"),
        }
        mpath = tmp_path / "manifest.json"
        mpath.write_text(json.dumps(manifest))
        assert main(["ablate", "--manifest", str(mpath)]) == EXIT_OK
        csv_text = (tmp_path / "ablate" / "ablation.csv").read_text()
        lines = csv_text.strip().splitlines()
        assert lines[0] == "variant,bits,map_mean,map_std,per_seed"
        assert len(lines) == 3
        assert {l.split(",")[0] for l in lines[1:]} == {
            "no_adversarial", "fixed_paced(1.0)"}
        assert (tmp_path / "ablate" / "ablation.md").exists()

    def test_manifest_variant_validation(self, tmp_path):
        manifest = {
            "base": {k: v for k, v in tiny_config_dict(tmp_path / "x").items()
                     if k != "out_dir"},
            "variants": ["bogus"],
            "seeds": [0],
            "out_dir": str(tmp_path / "x"),
        }
        mpath = tmp_path / "manifest.json"
        mpath.write_text(json.dumps(manifest))
        assert main(["ablate", "--manifest", str(mpath)]) == EXIT_CONFIG


class TestPlotCommand:
    def test_plots_from_run(self, tmp_path):
        path, _ = write_config(tmp_path)
        main(["train", "--config", str(path)])
        ckpt = tmp_path / "run" / "checkpoint.pt"
        main(["eval", "--ckpt", str(ckpt)])
        out = tmp_path / "plots"
        assert main(["plot", "--in", str(tmp_path / "run"),
                     "--out", str(out)]) == EXIT_OK
        assert (out / "loss_trace.png").exists()
        assert (out / "precision_at_n.png").exists()
        assert (out / "pr_curve.png").exists()

    def test_empty_dir_warns_no_op(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        out = tmp_path / "plots"
        assert main(["plot", "--in", str(empty), "--out", str(out)]) == EXIT_OK
        assert not list(out.glob("*.png"))

    def test_missing_dir(self, tmp_path):
        assert main(["plot", "--in", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "o")]) == EXIT_CONFIG
