import re
import time

import numpy as np
import pytest

from ddnn.checkpoint import load_checkpoint, save_checkpoint
from ddnn.cli import main
from ddnn.config import ConfigError, RunConfig
from ddnn.network import SubnetSpec, build_ddnn

TINY_TRAIN_CFG = """\
# desk-scale smoke configuration
family = resnet-basic
stage_blocks = 2,2
stage_channels = 16,32
num_classes = 4
input_shape = 3,8,8
subnets = 2,1
regime = ddnn_ekd
lr = 0.05
lr_drop_epochs =
batch_size = 16
epochs = 1
seed = 0
dataset = synthetic
synthetic_classes = 4
synthetic_train_per_class = 20
synthetic_test_per_class = 8
synthetic_size = 8,8
"""


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_TRAIN_CFG)
    return path


class TestRunConfig:
    def test_defaults_validate(self):
        RunConfig.from_sources(None, [])

    def test_unknown_key_rejected_with_name(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("no_such_key = 1\n")
        with pytest.raises(ConfigError, match="no_such_key"):
            RunConfig.from_sources(path, [])

    def test_overrides_win_over_file(self, tiny_config):
        run = RunConfig.from_sources(tiny_config, ["epochs=7", "regime=ddnn_hard"])
        assert run.epochs == 7 and run.regime == "ddnn_hard"

    def test_resolved_text_reparses_identically(self, tiny_config, tmp_path):
        run = RunConfig.from_sources(tiny_config, ["lr=0.025"])
        echo = tmp_path / "echo.cfg"
        echo.write_text(run.resolved_text())
        again = RunConfig.from_sources(echo, [])
        assert again == run

    def test_bad_value_reported(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("epochs = banana\n")
        with pytest.raises(ConfigError, match="epochs"):
            RunConfig.from_sources(path, [])

    def test_malformed_line_reported_with_lineno(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("epochs\n")
        with pytest.raises(ConfigError, match=":1:"):
            RunConfig.from_sources(path, [])


class TestTrainCommand:
    def test_smoke_run_completes_quickly(self, tiny_config, tmp_path, capsys):
        out = tmp_path / "run"
        t0 = time.monotonic()
        code = main(["train", "--config", str(tiny_config), "--out", str(out),
                     "--set", "epochs=1", "--deterministic"])
        elapsed = time.monotonic() - t0
        assert code == 0
        assert elapsed < 60.0
        assert (out / "metrics.csv").exists()
        assert (out / "config.resolved").exists()
        assert (out / "best_full.ckpt").exists()
        assert "best top-1 err" in capsys.readouterr().out

    def test_unknown_key_is_usage_error(self, tiny_config, capsys):
        code = main(["train", "--config", str(tiny_config), "--set", "bogus_key=1"])
        assert code == 2
        assert "bogus_key" in capsys.readouterr().err

    def test_rerun_from_resolved_config_reproduces_metrics(self, tiny_config, tmp_path):
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        assert main(["train", "--config", str(tiny_config), "--out", str(out1),
                     "--deterministic", "--seed", "3"]) == 0
        assert main(["train", "--config", str(out1 / "config.resolved"),
                     "--out", str(out2)]) == 0
        assert (out1 / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()

    def test_missing_dataset_dir_is_config_error(self, tiny_config, monkeypatch):
        monkeypatch.delenv("DDNN_DATA_DIR", raising=False)
        code = main(["train", "--config", str(tiny_config), "--set", "dataset=cifar10"])
        assert code == 2


class TestEvalAndExtract:
    def _train(self, tiny_config, out):
        assert main(["train", "--config", str(tiny_config), "--out", str(out),
                     "--deterministic"]) == 0
        return out / "best_sub1.ckpt"

    def test_eval_prints_per_net_errors(self, tiny_config, tmp_path, capsys):
        ckpt = self._train(tiny_config, tmp_path / "run")
        assert main(["eval", str(ckpt)]) == 0
        out = capsys.readouterr().out
        assert "full: top-1 err" in out and "sub1: top-1 err" in out

    def test_extract_names_dropped_blocks_fig2_style(self, tmp_path, capsys):
        # ResNet-50-shaped bottleneck full net with the [3,4,4,3] sub-net
        run = RunConfig.from_sources(None, [
            "family=resnet-bottleneck", "stage_blocks=3,4,6,3",
            "stage_channels=8,8,8,8", "num_classes=4", "input_shape=3,32,32",
            "subnets=3,4,4,3", "synthetic_size=32,32"])
        ddnn = build_ddnn(run.to_net_config(), run.to_subnet_specs(), seed=0)
        ckpt_path = tmp_path / "full.ckpt"
        save_checkpoint(ckpt_path, ddnn.named_state(), {"config": run.resolved_text()})
        out_path = tmp_path / "sub.ckpt"
        assert main(["extract", str(ckpt_path), "--subnet", "1",
                     "--out", str(out_path)]) == 0
        printed = capsys.readouterr().out
        assert "stage3:{5,6}" in printed
        assert "params:" in printed and "flops:" in printed
        tensors, meta = load_checkpoint(out_path)
        assert meta["subnet_index"] == 1
        assert not any(name.startswith("stage3.block5") for name in tensors)

    def test_extract_matches_in_ddnn_evaluation(self, tiny_config, tmp_path, capsys):
        ckpt = self._train(tiny_config, tmp_path / "run")
        sub_path = tmp_path / "sub.ckpt"
        assert main(["extract", str(ckpt), "--subnet", "1", "--out", str(sub_path)]) == 0
        assert main(["eval", str(ckpt)]) == 0
        in_ddnn = re.search(r"sub1: top-1 err ([0-9.]+)", capsys.readouterr().out).group(1)
        assert main(["eval", str(sub_path)]) == 0
        standalone = re.search(r"full: top-1 err ([0-9.]+)", capsys.readouterr().out).group(1)
        assert standalone == in_ddnn

    def test_extract_index_zero_drops_private_heads(self, tmp_path, capsys):
        run = RunConfig.from_sources(None, ["classifier_mode=private"])
        ddnn = build_ddnn(run.to_net_config(), run.to_subnet_specs(), seed=0)
        ckpt_path = tmp_path / "full.ckpt"
        save_checkpoint(ckpt_path, ddnn.named_state(), {"config": run.resolved_text()})
        out_path = tmp_path / "full_only.ckpt"
        assert main(["extract", str(ckpt_path), "--subnet", "0", "--out", str(out_path)]) == 0
        tensors, _ = load_checkpoint(out_path)
        expected = {n: v for n, v in ddnn.named_state().items() if not n.startswith("sub")}
        assert set(tensors) == set(expected)
        assert all(tensors[n].tobytes() == expected[n].tobytes() for n in tensors)

    def test_extract_bad_index_is_runtime_error(self, tiny_config, tmp_path, capsys):
        ckpt = self._train(tiny_config, tmp_path / "run")
        assert main(["extract", str(ckpt), "--subnet", "5", "--out",
                     str(tmp_path / "x.ckpt")]) == 1

    def test_corrupt_checkpoint_is_runtime_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"nope")
        assert main(["eval", str(bad)]) == 1


class TestCountCommand:
    def test_resnet34_reference_values(self, tmp_path, capsys):
        cfg = tmp_path / "r34.cfg"
        cfg.write_text("family = resnet-basic\n"
                       "stage_blocks = 3,4,6,3\n"
                       "stage_channels = 64,128,256,512\n"
                       "num_classes = 1000\n"
                       "input_shape = 3,224,224\n"
                       "subnets = 2,2,2,2\n"
                       "synthetic_size = 224,224\n")
        assert main(["count", "--config", str(cfg)]) == 0
        out = capsys.readouterr().out
        full_line = next(line for line in out.splitlines() if line.startswith("full"))
        params, flops = map(int, re.search(r"\((\d+) / (\d+)\)", full_line).groups())
        assert abs(params - 21.8e6) / 21.8e6 < 0.01
        assert abs(flops - 3.6e9) / 3.6e9 < 0.05
        sub_line = next(line for line in out.splitlines() if line.startswith("sub1"))
        sub_params = int(re.search(r"\((\d+) /", sub_line).group(1))
        assert abs(sub_params - 11.7e6) / 11.7e6 < 0.01


class TestGradcheckCommand:
    def test_tensor_scope_passes(self, capsys):
        assert main(["gradcheck", "tensor", "--seeds", "2"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out

    def test_unknown_scope_rejected(self, capsys):
        assert main(["gradcheck", "everything"]) == 2


class TestPlotCommand:
    def test_two_series_two_polylines(self, tmp_path):
        csv_path = tmp_path / "metrics.csv"
        csv_path.write_text(
            "epoch,net_name,split,top1_err,ce,kl,att_mse,total,lr,wall_secs\n"
            "0,full,test,50.0,1.0,0,0,1.0,0.1,0\n"
            "0,sub1,test,60.0,1.2,0,0,1.2,0.1,0\n")
        svg_path = tmp_path / "out.svg"
        assert main(["plot", str(csv_path), "--out", str(svg_path)]) == 0
        svg = svg_path.read_text()
        assert svg.count("<polyline") == 2
        assert "top-1 err" in svg

    def test_empty_csv_is_runtime_error(self, tmp_path, capsys):
        csv_path = tmp_path / "empty.csv"
        csv_path.write_text("epoch,net_name,split,top1_err,ce,kl,att_mse,total,lr,wall_secs\n")
        assert main(["plot", str(csv_path)]) == 1

    def test_full_pipeline_train_then_plot(self, tiny_config, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--config", str(tiny_config), "--out", str(out),
                     "--deterministic"]) == 0
        svg_path = tmp_path / "curves.svg"
        assert main(["plot", str(out / "metrics.csv"), "--out", str(svg_path)]) == 0
        assert svg_path.read_text().count("<polyline") == 2


class TestUsage:
    def test_no_command_is_usage_error(self, capsys):
        assert main([]) == 2

    def test_unknown_command_is_usage_error(self, capsys):
        assert main(["frobnicate"]) == 2
