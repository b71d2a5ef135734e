"""CLI subcommands: files produced, byte determinism, exit codes."""

import json
import subprocess
import sys

import numpy as np
import pytest

from bifusion import cli
from bifusion.synthetic import read_examples
from bifusion.tensor import VJP

TINY_INI = """
[task]
image_concepts = 4
question_concepts = 4
answers = 8
noise_sigma = 0.05
image_dim = 12
question_dim = 16
max_question_tokens = 6
min_question_tokens = 3
distractor_pool = 8
n_train = 48
n_test = 16
seed = 21

[model]
arch = omniban
d_v = 12
d_q = 16
d_m = 6
d_hid = 12
d_joint = 12
heads = 2
glimpses = 2
answers = 8

[train]
batch_size = 16
epochs = 2

[experiment]
seeds = 0
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_INI)
    return str(path)


def run_cli(*argv) -> int:
    return cli.main(list(argv))


class TestGen:
    def test_products_and_manifest(self, tiny_config, tmp_path):
        out = tmp_path / "data"
        assert run_cli("gen", "--config", tiny_config, "--out", str(out)) == 0
        train = read_examples(out / "train.jsonl")
        test = read_examples(out / "test.jsonl")
        manifest = json.loads((out / "manifest.json").read_text())
        assert len(train) == 48 and len(test) == 16
        assert manifest["n_examples"] == manifest["n_train"] + manifest["n_test"]
        assert manifest["seed"] == 21 and "spec_hash" in manifest

    def test_same_config_identical_bytes(self, tiny_config, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        run_cli("gen", "--config", tiny_config, "--out", str(a))
        run_cli("gen", "--config", tiny_config, "--out", str(b))
        for name in ("train.jsonl", "test.jsonl", "manifest.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_round_trip_matches_in_memory(self, tiny_config, tmp_path):
        from bifusion.config import load_config
        from bifusion.synthetic import make_dataset
        out = tmp_path / "data"
        run_cli("gen", "--config", tiny_config, "--out", str(out))
        loaded = read_examples(out / "train.jsonl")
        direct, _ = make_dataset(load_config(tiny_config).task)
        for a, b in zip(direct, loaded):
            assert a.image.matrix.tobytes() == b.image.matrix.tobytes()
            assert a.answer == b.answer


class TestTrain:
    def _gen(self, tiny_config, tmp_path):
        data = tmp_path / "data"
        run_cli("gen", "--config", tiny_config, "--out", str(data))
        return data

    def test_outputs_per_seed_and_aggregate(self, tiny_config, tmp_path):
        data = self._gen(tiny_config, tmp_path)
        out = tmp_path / "runs"
        code = run_cli("train", "--config", tiny_config, "--data", str(data),
                       "--out", str(out), "--seed", "1,2")
        assert code == 0
        for seed in (1, 2):
            assert (out / f"metrics_seed{seed}.csv").exists()
            assert (out / f"checkpoint_seed{seed}.ckpt").exists()
        assert (out / "summary.csv").exists()
        assert (out / "summary.txt").read_text().strip().endswith(tuple("0123456789"))
        assert (out / "training_curves.png").stat().st_size > 0
        assert "±" in (out / "summary.txt").read_text()

    def test_zero_epochs_initial_checkpoint_empty_history(self, tiny_config, tmp_path):
        data = self._gen(tiny_config, tmp_path)
        out = tmp_path / "runs0"
        assert run_cli("train", "--config", tiny_config, "--data", str(data),
                       "--out", str(out), "--epochs", "0") == 0
        metrics = (out / "metrics_seed0.csv").read_text().splitlines()
        assert metrics == ["epoch,train_loss,ortho_loss,alpha,val_acc"]
        from bifusion.checkpoint import load_checkpoint
        from bifusion.config import load_config
        from bifusion.models import build_model
        params, _ = load_checkpoint(out / "checkpoint_seed0.ckpt")
        init = build_model(load_config(tiny_config).model, seed=0).params()
        for name, arr in params.items():
            assert np.array_equal(arr, init[name].data)

    def test_determinism_bit_identical_outputs(self, tiny_config, tmp_path):
        data = self._gen(tiny_config, tmp_path)
        a, b = tmp_path / "runA", tmp_path / "runB"
        for out in (a, b):
            run_cli("train", "--config", tiny_config, "--data", str(data),
                    "--out", str(out))
        for name in ("metrics_seed0.csv", "checkpoint_seed0.ckpt", "summary.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_ablation_flags(self, tiny_config, tmp_path):
        data = self._gen(tiny_config, tmp_path)
        out = tmp_path / "ablate"
        assert run_cli("train", "--config", tiny_config, "--data", str(data),
                       "--out", str(out), "--no-mha", "--no-ortho",
                       "--epochs", "1") == 0
        metrics = (out / "metrics_seed0.csv").read_text().splitlines()[1]
        alpha = float(metrics.split(",")[3])
        assert alpha == 0.0

    def test_arch_override(self, tiny_config, tmp_path):
        data = self._gen(tiny_config, tmp_path)
        out = tmp_path / "concat"
        assert run_cli("train", "--config", tiny_config, "--data", str(data),
                       "--out", str(out), "--arch", "concat", "--epochs", "1") == 0
        assert "concat" in (out / "summary.txt").read_text()

    def test_missing_data_is_config_error(self, tiny_config, tmp_path):
        assert run_cli("train", "--config", tiny_config,
                       "--out", str(tmp_path / "x")) == cli.EXIT_CONFIG

    def test_divergence_exit_code(self, tiny_config, tmp_path):
        data = self._gen(tiny_config, tmp_path)
        bad = tmp_path / "bad.ini"
        bad.write_text(TINY_INI.replace("batch_size = 16",
                                        "batch_size = 16\nlearning_rate = 1e160"))
        with np.errstate(all="ignore"):
            code = run_cli("train", "--config", str(bad), "--data", str(data),
                           "--out", str(tmp_path / "div"))
        assert code == cli.EXIT_DIVERGENCE


class TestCost:
    def test_report_files_and_content(self, tiny_config, tmp_path):
        out = tmp_path / "cost"
        assert run_cli("cost", "--config", tiny_config, "--out", str(out)) == 0
        text = (out / "cost_report.txt").read_text()
        assert "convention" in text and "ratio" in text
        csv_text = (out / "cost_report.csv").read_text()
        assert csv_text.startswith("metric,omniban,coattention,ratio")
        assert (out / "cost_comparison.png").stat().st_size > 0

    def test_sweep_emits_table_and_figure(self, tiny_config, tmp_path):
        out = tmp_path / "sweep"
        assert run_cli("cost", "--config", tiny_config, "--out", str(out),
                       "--sweep", "N_q=4,8") == 0
        lines = (out / "sweep_n_q.csv").read_text().splitlines()
        assert lines[0].startswith("n_q,arch,")
        assert len(lines) == 1 + 2 * 2
        assert (out / "scaling_n_q.png").stat().st_size > 0

    def test_bad_sweep_key_is_config_error(self, tiny_config, tmp_path):
        assert run_cli("cost", "--config", tiny_config,
                       "--out", str(tmp_path / "s"),
                       "--sweep", "bogus=1") == cli.EXIT_CONFIG


class TestGradcheckCommand:
    def test_all_pass_exit_zero(self, capsys):
        assert cli.cmd_gradcheck(None) == 0
        out = capsys.readouterr().out
        assert "model_omniban" in out and "FAIL" not in out

    def test_injected_fault_nonzero_exit(self, capsys, monkeypatch):
        orig = VJP["matmul"]
        monkeypatch.setitem(VJP, "matmul",
                            lambda saved, g: tuple(-x for x in orig(saved, g)))
        assert cli.cmd_gradcheck(None) == cli.EXIT_GRADCHECK
        assert "FAIL" in capsys.readouterr().out


class TestConfigErrors:
    def test_unknown_key_rejected(self, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[model]\nwarp_factor = 9\n")
        assert run_cli("cost", "--config", str(bad),
                       "--out", str(tmp_path / "o")) == cli.EXIT_CONFIG

    def test_missing_config_file(self, tmp_path):
        assert run_cli("gen", "--config", str(tmp_path / "nope.ini"),
                       "--out", str(tmp_path / "o")) == cli.EXIT_CONFIG


class TestConsoleEntry:
    def test_module_invocation(self, tiny_config, tmp_path):
        out = tmp_path / "data"
        proc = subprocess.run(
            [sys.executable, "-m", "bifusion.cli", "gen",
             "--config", tiny_config, "--out", str(out)],
            capture_output=True, text=True)
        assert proc.returncode == 0
        assert (out / "train.jsonl").exists()
