import json
import subprocess
import sys

import numpy as np
import pytest

from smolk.cli import main, read_config_file
from smolk.exceptions import ConfigError
from smolk.model import load_model


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    payload = json.loads(out) if code == 0 and out.strip() else None
    return code, payload, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A 24-chunk, 30 s synthetic corpus and a briefly trained 6-kernel model."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["--out-dir", str(root / "data"), "--seed", "1", "synth", "--n", "24",
                 "--duration", "30"]) == 0
    assert main(["--out-dir", str(root / "run"), "--seed", "1", "train", "--manifest",
                 str(root / "data" / "train.txt"), "--kernels", "6", "--iterations", "8",
                 "--val-fraction", "0.2"]) == 0
    return root


class TestUsage:
    def test_unknown_subcommand(self, capsys):
        code, _, err = run_cli(capsys, "frobnicate")
        assert code == 2 and "usage" in err
        assert json.loads(err.strip().splitlines()[-1])["exit_code"] == 2

    def test_missing_subcommand(self, capsys):
        assert run_cli(capsys)[0] == 2

    def test_bad_jobs(self, capsys, tmp_path):
        assert run_cli(capsys, "--jobs", "0", "synth", "--n", "2")[0] == 2

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "smolk", "--help"], capture_output=True,
                              text=True)
        assert proc.returncode == 0 and "synth" in proc.stdout


class TestErrors:
    def test_missing_model_is_domain_error(self, capsys, tmp_path):
        code, _, err = run_cli(capsys, "--out-dir", tmp_path, "absorb", "--model",
                               tmp_path / "nope.smlk")
        assert code == 1
        line = json.loads(err.strip().splitlines()[-1])
        assert set(line) == {"error", "message", "exit_code"}

    def test_corrupt_model(self, capsys, tmp_path):
        bad = tmp_path / "bad.smlk"
        bad.write_bytes(b"not a model at all")
        code, _, err = run_cli(capsys, "--out-dir", tmp_path, "quantize", "--model", bad)
        assert code == 1 and json.loads(err.strip())["error"] == "BadMagic"

    def test_unknown_config_key(self, capsys, tmp_path, workspace):
        cfg = tmp_path / "run.toml"
        cfg.write_text("colour = 'red'\n")
        code, _, err = run_cli(capsys, "--config", cfg, "--out-dir", tmp_path, "eval", "--model",
                               workspace / "run" / "model.smlk", "--manifest",
                               workspace / "data" / "test.txt")
        assert code == 2 and "ConfigError" in err


class TestConfigFile:
    def test_sections(self, tmp_path):
        cfg = tmp_path / "run.toml"
        cfg.write_text('task = "segmentation"\nseed = 4\n[train]\niterations = 9\n'
                       '[post]\nwindow = 31\n')
        raw = read_config_file(cfg)
        assert raw["train"]["iterations"] == 9 and raw["seed"] == 4

    def test_syntax_error(self, tmp_path):
        cfg = tmp_path / "run.toml"
        cfg.write_text("[train\n")
        with pytest.raises(ConfigError):
            read_config_file(cfg)

    def test_unknown_section_key(self, tmp_path):
        cfg = tmp_path / "run.toml"
        cfg.write_text("[train]\nlearning_speed = 3\n")
        with pytest.raises(ConfigError):
            read_config_file(cfg)

    def test_config_drives_training(self, capsys, tmp_path, workspace):
        cfg = tmp_path / "run.toml"
        cfg.write_text("seed = 2\n[model]\nn_kernels = 3\n[train]\niterations = 3\n")
        code, payload, _ = run_cli(capsys, "--config", cfg, "--out-dir", tmp_path, "train",
                                   "--manifest", workspace / "data" / "train.txt",
                                   "--val-fraction", "0")
        assert code == 0 and load_model(payload["model"]).n_kernels == 3
        assert len((tmp_path / "trace.csv").read_text().splitlines()) == 4


class TestPipeline:
    def test_synth_outputs(self, workspace):
        data = workspace / "data"
        n_train = len([l for l in (data / "train.txt").read_text().splitlines()
                       if l and not l.startswith("#")])
        n_test = len([l for l in (data / "test.txt").read_text().splitlines()
                      if l and not l.startswith("#")])
        assert n_test > 0 and n_train > n_test

    def test_train_outputs(self, workspace):
        run = workspace / "run"
        for name in ("model.smlk", "trace.csv", "loss.svg", "validation_report.md"):
            assert (run / name).exists(), name
        report = (run / "validation_report.md").read_text()
        assert "sha256" in report and '"n_kernels": 6' in report

    def test_eval_with_ranking(self, capsys, tmp_path, workspace):
        code, payload, _ = run_cli(capsys, "--out-dir", tmp_path, "eval", "--model",
                                   workspace / "run" / "model.smlk", "--manifest",
                                   workspace / "data" / "test.txt", "--rank")
        assert code == 0
        rows = (tmp_path / "ranking.csv").read_text().splitlines()[1:]
        scores = [float(r.split(",")[1]) for r in rows]
        assert scores == sorted(scores)

    def test_deterministic_training(self, capsys, tmp_path, workspace):
        args = ["train", "--manifest", workspace / "data" / "train.txt", "--kernels", "6",
                "--iterations", "8", "--val-fraction", "0.2"]
        code, payload, _ = run_cli(capsys, "--out-dir", tmp_path, "--seed", "1", *args)
        reference = load_model(workspace / "run" / "model.smlk")
        np.testing.assert_array_equal(load_model(payload["model"]).weights, reference.weights)

    def test_absorb_and_quantize(self, capsys, tmp_path, workspace):
        model = workspace / "run" / "model.smlk"
        code, payload, _ = run_cli(capsys, "--out-dir", tmp_path, "absorb", "--model", model)
        assert code == 0 and load_model(payload["model"]).absorbed
        code, payload, _ = run_cli(capsys, "--out-dir", tmp_path, "quantize", "--model", model,
                                   "--dtype", "f16")
        assert code == 0 and load_model(payload["model"]).dtype == np.float16

    def test_prune(self, capsys, tmp_path, workspace):
        code, payload, _ = run_cli(capsys, "--out-dir", tmp_path, "prune", "--model",
                                   workspace / "run" / "model.smlk", "--manifest",
                                   workspace / "data" / "test.txt", "--pairs", "1")
        assert code == 0 and payload["pairs"] == 1
        assert load_model(payload["model"]).n_kernels == 5
        for name in ("prune_report.txt", "prune_report.csv", "retention.csv", "retention.svg"):
            assert (tmp_path / name).exists()

    def test_explain(self, capsys, tmp_path, workspace):
        model = workspace / "run" / "model.smlk"
        for what in ("kernels", "importance"):
            code, payload, _ = run_cli(capsys, "--out-dir", tmp_path, "explain", "--model", model,
                                       "--what", what, "--name", what)
            assert code == 0
        signal = next((workspace / "data").rglob("*.sig"))
        code, payload, _ = run_cli(capsys, "--out-dir", tmp_path, "explain", "--model", model,
                                   "--what", "groups", "--signal", signal, "--preprocess")
        assert code == 0
        header = open(payload["csv"]).readline().strip().split(",")
        assert header[0] == "t" and header[-1] == "total"

    def test_explain_needs_signal(self, capsys, tmp_path, workspace):
        code, _, _ = run_cli(capsys, "--out-dir", tmp_path, "explain", "--model",
                             workspace / "run" / "model.smlk", "--what", "groups")
        assert code == 2

    def test_noise_sweep(self, capsys, tmp_path, workspace):
        code, payload, _ = run_cli(capsys, "--out-dir", tmp_path, "sweep", "noise", "--manifest",
                                   workspace / "data" / "test.txt", "--model",
                                   workspace / "run" / "model.smlk", "--sigmas", "0,0.1")
        assert code == 0
        first = open(payload["csv"]).read().splitlines()[1].split(",")
        assert float(first[0]) == 0.0 and float(first[1]) == 0.0

    def test_scaling_sweep(self, capsys, tmp_path, workspace):
        code, payload, _ = run_cli(capsys, "--out-dir", tmp_path, "sweep", "scaling", "--manifest",
                                   workspace / "data" / "train.txt", "--m-values", "3",
                                   "--folds", "2", "--iterations", "2")
        assert code == 0 and len(open(payload["csv"]).read().splitlines()) == 2


class TestClassificationCli:
    def test_contribution(self, capsys, tmp_path):
        data, run = tmp_path / "data", tmp_path / "run"
        assert run_cli(capsys, "--out-dir", data, "synth", "--task", "classification", "--n", "12",
                       "--duration", "10")[0] == 0
        code, payload, _ = run_cli(capsys, "--out-dir", run, "train", "--manifest",
                                   data / "train.txt", "--kernels", "3", "--iterations", "3",
                                   "--val-fraction", "0")
        assert code == 0
        signal = next(data.rglob("*.sig"))
        code, payload, _ = run_cli(capsys, "--out-dir", run, "explain", "--model",
                                   run / "model.smlk", "--what", "contribution", "--signal",
                                   signal, "--class", "1")
        assert code == 0 and "spectrum_share" in payload
