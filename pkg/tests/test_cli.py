import json

import pytest

from inspectlab.cli import (EXIT_CONFIG, EXIT_OK, EXIT_REFUSED, ConfigError,
                            load_run_config, main)
from inspectlab.corpus import load_manifest

TINY_CORPUS = {"counts": {"good": 24, "double_print": 12, "interrupted_print": 12},
               "image_size": 16, "seed": 5}


def write_config(path, **overrides):
    cfg = {
        "preset": "smoke",
        "master_seed": 3,
        "corpus": TINY_CORPUS,
        "rows": [["baseline_mlp", "none"]],
        "retentions": [1.0],
        "tasks": ["binary"],
    }
    cfg.update(overrides)
    path.write_text(json.dumps(cfg))
    return path


class TestLoadRunConfig:
    def test_defaults_from_preset(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"preset": "paper"}))
        cfg = load_run_config(path)
        assert cfg["corpus"]["counts"]["good"] == 1000
        assert cfg["retentions"] == [1.0, 0.75, 0.5, 0.25]
        assert len(cfg["rows"]) == 9

    def test_unknown_preset_names_key(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"preset": "gigantic"}))
        with pytest.raises(ConfigError, match="preset"):
            load_run_config(path)

    def test_bad_master_seed_names_key(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"master_seed": "not-a-number"}))
        with pytest.raises(ConfigError, match="master_seed"):
            load_run_config(path)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{nope")
        with pytest.raises(ConfigError, match="JSON"):
            load_run_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "absent.json")


class TestCorpusGenerate:
    def test_generates_and_refuses_overwrite(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json")
        out = tmp_path / "corpus"
        assert main(["corpus", "generate", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
        manifest = load_manifest(out / "manifest.json")
        assert len(manifest.samples) == 48
        # rerun without --force refuses
        assert main(["corpus", "generate", "--config", str(cfg), "--out", str(out)]) == EXIT_REFUSED
        # and --force overwrites
        assert main(["corpus", "generate", "--config", str(cfg), "--out", str(out),
                     "--force"]) == EXIT_OK

    def test_malformed_config_exit_2(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"preset": "bogus"}))
        code = main(["corpus", "generate", "--config", str(path),
                     "--out", str(tmp_path / "out")])
        assert code == EXIT_CONFIG
        assert "preset" in capsys.readouterr().err


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("clirun")
    cfg = write_config(root / "c.json",
                       rows=[["baseline_mlp", "none"], ["baseline_mlp", "random"]],
                       retentions=[1.0, 0.5], tasks=["binary", "multiclass"])
    out = root / "run"
    code = main(["experiment", "run", "--config", str(cfg), "--out", str(out)])
    return code, out, cfg


class TestExperimentRun:
    def test_grid_completes(self, finished_run):
        code, out, _ = finished_run
        assert code == EXIT_OK
        for name in ("results.csv", "table.txt", "run.json"):
            assert (out / name).exists()
        doc = json.loads((out / "run.json").read_text())
        assert doc["cells_attempted"] == 8  # 2 rows x 2 tasks x 2 retentions
        assert doc["failures"] == []
        assert len(doc["cells"]) == 8

    def test_results_csv_shape(self, finished_run):
        _, out, _ = finished_run
        lines = (out / "results.csv").read_text().strip().split("\n")
        assert lines[0] == "model,augmentation,task,retention,fold,auc"
        assert len(lines) == 1 + 8 * 10

    def test_rerun_refused_without_force(self, finished_run):
        code, out, cfg = finished_run
        assert main(["experiment", "run", "--config", str(cfg),
                     "--out", str(out)]) == EXIT_REFUSED

    def test_only_filter(self, finished_run, tmp_path):
        _, _, cfg = finished_run
        out = tmp_path / "only"
        code = main(["experiment", "run", "--config", str(cfg), "--out", str(out),
                     "--only", "baseline_mlp", "--retention", "1.0"])
        assert code == EXIT_OK
        doc = json.loads((out / "run.json").read_text())
        assert doc["cells_attempted"] == 4  # 2 rows kept x 2 tasks x 1 retention

    def test_report_render_rebuilds_table(self, finished_run, tmp_path):
        _, out, _ = finished_run
        rebuilt = tmp_path / "table.txt"
        code = main(["report", "render", "--results", str(out / "results.csv"),
                     "--out", str(rebuilt)])
        assert code == EXIT_OK
        assert rebuilt.read_text() == (out / "table.txt").read_text()

    def test_missing_results_exit_2(self, tmp_path):
        assert main(["report", "render", "--results",
                     str(tmp_path / "none.csv")]) == EXIT_CONFIG


@pytest.fixture(scope="module")
def corpus32(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli32")
    cfg = write_config(root / "c.json",
                       corpus={"counts": {"good": 52, "double_print": 0,
                                          "interrupted_print": 0},
                               "image_size": 32, "seed": 9})
    out = root / "corpus"
    assert main(["corpus", "generate", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    return out


class TestGanAndAnomalyCommands:
    def test_gan_train_sample_resume(self, corpus32, tmp_path):
        cfg = tmp_path / "gan.json"
        cfg.write_text(json.dumps({
            "corpus_manifest": str(corpus32 / "manifest.json"),
            "class": "good",
            "gan": {"iterations": 30, "fid_interval": 15, "fid_sample_count": 16,
                    "seed": 2},
        }))
        out = tmp_path / "ckpt"
        assert main(["gan", "train", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
        ckpt = out / "good.lgan"
        assert ckpt.exists()

        samples_dir = tmp_path / "samples"
        assert main(["gan", "sample", "--checkpoint", str(ckpt), "--n", "4",
                     "--seed", "7", "--out", str(samples_dir)]) == EXIT_OK
        assert len(list(samples_dir.glob("*.png"))) == 4

        cfg.write_text(json.dumps({
            "corpus_manifest": str(corpus32 / "manifest.json"),
            "class": "good",
            "gan": {"iterations": 45, "fid_interval": 15, "fid_sample_count": 16,
                    "seed": 2},
        }))
        out2 = tmp_path / "ckpt2"
        assert main(["gan", "train", "--config", str(cfg), "--out", str(out2),
                     "--resume", str(ckpt)]) == EXIT_OK

    def test_gan_train_missing_corpus_exit_2(self, tmp_path, capsys):
        cfg = tmp_path / "gan.json"
        cfg.write_text(json.dumps({"corpus_manifest": str(tmp_path / "no/manifest.json"),
                                   "class": "good"}))
        assert main(["gan", "train", "--config", str(cfg),
                     "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_anomaly_train(self, corpus32, tmp_path):
        cfg = tmp_path / "anom.json"
        cfg.write_text(json.dumps({
            "corpus_manifest": str(corpus32 / "manifest.json"),
            "anomaly": {"epochs": 1, "seed": 3},
        }))
        out = tmp_path / "anom"
        assert main(["anomaly", "train", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
        from inspectlab.anomaly import load_model
        model = load_model(out / "anomaly.anom")
        assert len(model.epoch_losses) == 1
