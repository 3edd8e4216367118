"""Tests for nfcl_forecast.runner."""

from dataclasses import replace
from pathlib import Path

import pandas as pd
import pytest

from nfcl_forecast.baselines import DLinearModel, NLinearModel
from nfcl_forecast.checkpoint import save_checkpoint
from nfcl_forecast.config import RunConfig
from nfcl_forecast.datapipe import DataError
from nfcl_forecast.interpret import read_map_csv
from nfcl_forecast.nfcl import ModelDims, NfclModel, Variant
from nfcl_forecast.optim import EpochRecord, TrainingError, TrainReport
from nfcl_forecast.runner import (
    RunLayout,
    StageError,
    build_model,
    cmd_evaluate,
    cmd_explain,
    cmd_predict,
    cmd_train,
    cmd_verify,
    load_prepared,
    stage,
)
from nfcl_forecast.verify import CheckResult


@pytest.fixture
def cfg(series_csv, tmp_path):
    return RunConfig(
        data=str(series_csv), lookback=8, horizon=2, hidden=[4], seeds=[1], max_epochs=2,
        output_dir=str(tmp_path / "run"),
    )


@pytest.fixture
def checkpoint(cfg):
    return cmd_train(cfg)[0].checkpoint


class TestStage:
    def test_module_error_tagged(self):
        with pytest.raises(StageError, match="^load: data file not found") as exc_info:
            with stage("load"):
                raise DataError("data file not found: x.csv")
        assert exc_info.value.stage == "load"
        assert isinstance(exc_info.value.__cause__, DataError)

    def test_stage_error_passes_through(self):
        with pytest.raises(StageError, match="^inner: boom"):
            with stage("outer"):
                raise StageError("inner", "boom")

    def test_other_errors_untouched(self):
        with pytest.raises(KeyError):
            with stage("load"):
                raise KeyError("x")


class TestRunLayout:
    def test_paths(self):
        layout = RunLayout(Path("out"))
        assert layout.config == Path("out/config.toml")
        assert layout.checkpoint(3) == Path("out/checkpoints/seed-3.json")
        assert layout.train_report(3) == Path("out/reports/train-seed-3.csv")
        assert layout.metrics("seed-3") == Path("out/reports/metrics-seed-3.csv")
        assert layout.predictions("seed-3-val") == Path("out/predictions/seed-3-val.csv")
        assert layout.maps == Path("out/maps")


class TestBuildModel:
    @pytest.mark.parametrize(
        ("model", "kind"),
        [("v", NfclModel), ("c", NfclModel), ("d", NfclModel), ("nlinear", NLinearModel),
         ("dlinear", DLinearModel)],
    )
    def test_dispatch(self, model, kind):
        cfg = RunConfig(model=model, hidden=[3], kernels=[4, 1])
        built = build_model(cfg, ModelDims(2, 8, 2), 5)
        assert isinstance(built, kind)
        assert built.seed == 5

    def test_config_carried(self):
        built = build_model(
            RunConfig(model="d", hidden=[3, 2], kernels=[5, 1], padding="zero", slope=0.1),
            ModelDims(1, 8, 2), 0,
        )
        assert built.variant is Variant.D
        assert built.hidden == (3, 2)
        assert built.decomp.kernels == (5, 1)
        assert built.decomp.padding == "zero"
        assert built.slope == 0.1

    def test_moving_avg_carried(self):
        built = build_model(RunConfig(model="dlinear", moving_avg=7), ModelDims(1, 8, 2), 0)
        assert built.moving_avg == 7


class TestLoadPrepared:
    def test_windows_per_split(self, cfg):
        data = load_prepared(cfg)
        # 120 steps split 72/24/24, windows of 8 + 2
        assert [len(data.windows[s]) for s in ("train", "val", "test")] == [63, 15, 15]

    def test_no_data(self):
        with pytest.raises(StageError, match="^config: no data file given"):
            load_prepared(RunConfig())

    def test_too_short(self, cfg):
        with pytest.raises(StageError, match="^window: "):
            load_prepared(RunConfig(data=cfg.data, lookback=40, horizon=2))


class TestTrain:
    def test_one_result_per_seed(self, cfg):
        results = cmd_train(replace(cfg, seeds=[1, 2]))
        assert [r.seed for r in results] == [1, 2]
        assert all(r.checkpoint.is_file() for r in results)
        assert (Path(cfg.output_dir) / "config.toml").is_file()

    def test_failed_seed_keeps_partial_report(self, cfg, monkeypatch):
        def diverge(model, train_batch, val_batch, train_cfg):
            report = TrainReport(epochs=[EpochRecord(1, 1.0, 2.0)], diverged=True)
            raise TrainingError("epoch 2: training diverged", report)

        monkeypatch.setattr("nfcl_forecast.runner.train", diverge)
        with pytest.raises(StageError, match="^train: seed 1: epoch 2: training diverged"):
            cmd_train(cfg)
        partial = pd.read_csv(RunLayout(Path(cfg.output_dir)).train_report(1))
        assert partial["val_mse"].tolist() == [2.0]


class TestEvaluateAndPredict:
    def test_evaluate_all(self, cfg, checkpoint):
        reports = cmd_evaluate(cfg, checkpoint, split="all")
        assert [r.split for r in reports] == ["train", "val", "test"]
        assert RunLayout(Path(cfg.output_dir)).metrics("seed-1").is_file()

    def test_predict_default_path(self, cfg, checkpoint):
        path = cmd_predict(cfg, checkpoint, split="val")
        assert path == RunLayout(Path(cfg.output_dir)).predictions("seed-1-val")

    def test_dimension_mismatch(self, cfg, checkpoint):
        with pytest.raises(StageError, match="^checkpoint: dimension mismatch"):
            cmd_evaluate(replace(cfg, horizon=3), checkpoint)


class TestExplain:
    def test_every_target_plus_full_map(self, cfg, checkpoint):
        paths = cmd_explain(cfg, checkpoint, check=True)
        # K=3, T=2
        assert len(paths) == 3 * 2 + 1
        values, bias = read_map_csv(paths[-1])
        assert values.shape == (3 * 8, 3 * 2)
        assert bias.shape == (6,)

    def test_zero_output_weights_give_uniform_gray(self, cfg, tmp_path):
        model = build_model(cfg, ModelDims(3, 8, 2), 1)
        model.params["out.w"][...] = 0.0
        path = save_checkpoint(model, tmp_path / "zero.json")
        paths = cmd_explain(cfg, path, k=0, fmt="pgm", space="denormalized")
        assert len(paths) == 2 + 1
        pixels = paths[0].read_text().splitlines()[4:]
        assert all(set(row.split()) == {"127"} for row in pixels)

    def test_shared_scale(self, cfg, checkpoint):
        paths = cmd_explain(cfg, checkpoint, k=1, fmt="pgm", shared_scale=True)
        scales = {p.read_text().splitlines()[1] for p in paths[:-1]}
        assert len(scales) == 1


class TestVerify:
    def test_exit_code(self, monkeypatch, capsys):
        monkeypatch.setattr(
            "nfcl_forecast.runner.verify.run_checks",
            lambda seed, gradient_configs: [
                CheckResult("a", True, ""), CheckResult("b", False, "")
            ],
        )
        assert cmd_verify() == 1
        assert "1/2 checks passed" in capsys.readouterr().out
