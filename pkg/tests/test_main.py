import argparse
import asyncio
import json
import math

import pytest

from main import ConfigError, config_values, load_config, main, parse_silo_degrees, run, sweep_lambda
from models import AlgoMode, DatasetKind, SummaryReport
from settings import Settings

SMALL = "n_per_silo=120\nn_ood=150\nbatch_size=16\nlr=0.01\n"


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "experiment.env"
    path.write_text(SMALL)
    return path


def _args(**overrides):
    defaults = dict(config=None, dataset=None, algo=None, rounds=None, fishr_lambda=None, seeds=None, out=None)
    return argparse.Namespace(**{**defaults, **overrides})


class TestConfig:
    def test_flat_values(self):
        values = config_values({"SEEDS": "0,1,2", "flip_probs": "0.1, 0.2", "model_layers": "11,16,1",
                                "algo": "geometric", "silo_degrees": "10 25;60"})
        assert values["seeds"] == [0, 1, 2]
        assert values["flip_probs"] == [0.1, 0.2]
        assert values["model"] == {"layer_sizes": [11, 16, 1]}
        assert values["mode"] == "geometric"
        assert values["silo_degrees"] == [[10.0, 25.0], [60.0]]

    def test_silo_degrees(self):
        assert parse_silo_degrees("10 25 40;60 75 90;-10 -40 -90")[2] == [-10.0, -40.0, -90.0]

    def test_presets_then_file_then_flags(self, tmp_path):
        path = tmp_path / "color.env"
        path.write_text("dataset=color_digits\nweight_decay=0.02\n")
        config = load_config(_args(config=str(path), fishr_lambda=3.0))
        assert config.dataset == DatasetKind.COLOR_DIGITS
        assert config.lr == 3e-4
        assert config.weight_decay == 0.02
        assert config.fishr_lambda == 3.0

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "typo.env"
        path.write_text("roundz=3\n")
        with pytest.raises(ConfigError):
            load_config(_args(config=str(path)))

    def test_exit_codes_for_bad_config(self, tmp_path):
        assert main(["--config", str(tmp_path / "missing.env")]) == 2
        assert main(["--seeds", "1,1", "--out", str(tmp_path)]) == 2
        assert main(["--rounds", "0", "--out", str(tmp_path)]) == 2

    def test_missing_dataset_files(self, tmp_path, monkeypatch):
        monkeypatch.delenv("FEDILC_DATA_DIR", raising=False)
        assert main(["--dataset", "color_digits", "--out", str(tmp_path)]) == 2

    def test_runtime_error_exit_code(self, tmp_path):
        path = tmp_path / "bad_model.env"
        path.write_text(SMALL + "model_layers=5,1\n")
        assert main(["--config", str(path), "--rounds", "2", "--out", str(tmp_path)]) == 1


class TestRun:
    def test_smoke_and_determinism(self, tmp_path, config_file):
        outputs = []
        for name in ("first", "second"):
            out = tmp_path / name
            code = main(["--config", str(config_file), "--dataset", "synth_spurious", "--algo", "fishr_inter_geo",
                         "--lambda", "1.0", "--rounds", "10", "--seeds", "0,1", "--out", str(out)])
            assert code == 0
            outputs.append({path.name: path.read_text() for path in sorted(out.iterdir())})

        first, second = outputs
        assert first == second
        csvs = [name for name in first if name.endswith(".csv")]
        assert len(csvs) == 2
        assert "summary.schema.json" in first
        summary_name = next(name for name in first if name.endswith("_summary.json"))
        summary = SummaryReport.model_validate_json(first[summary_name])
        for metric in (summary.ood_loss, summary.ood_acc, summary.ood_auroc, summary.ood_auprc,
                       summary.fairness_variance, summary.fairness_kl):
            assert math.isfinite(metric.mean) and math.isfinite(metric.std)
        assert summary.seeds == [0, 1]
        schema = json.loads(first["summary.schema.json"])
        assert "ood_loss" in schema["properties"]


class TestSweep:
    def test_zero_lambda_row_matches_geometric(self, tmp_path, config_file):
        settings = Settings()
        args = _args(config=str(config_file), rounds=5, seeds="0,1", out=str(tmp_path))
        inter_geo = load_config(_args(**{**vars(args), "algo": "fishr_inter_geo"}))
        geometric = load_config(_args(**{**vars(args), "algo": "geometric"}))
        rows = asyncio.run(sweep_lambda(inter_geo, [0.0], settings))
        summary = asyncio.run(run(geometric, settings))
        assert len(rows) == 1
        assert rows[0].ood_loss_mean == summary.ood_loss.mean
        assert rows[0].ood_loss_std == summary.ood_loss.std

    def test_three_lambdas_three_rows(self, tmp_path, config_file):
        code = main(["--config", str(config_file), "--algo", "fed_curv", "--rounds", "3", "--seeds", "0",
                     "--sweep", "0,0.5,2", "--out", str(tmp_path)])
        assert code == 0
        sweep_csv = tmp_path / f"{DatasetKind.SYNTH_SPURIOUS.value}_{AlgoMode.FED_CURV.value}_lambda_sweep.csv"
        lines = sweep_csv.read_text().splitlines()
        assert lines[0] == "fishr_lambda,ood_loss_mean,ood_loss_std,formatted"
        assert len(lines) == 4

    def test_duplicate_lambdas(self, tmp_path, config_file):
        assert main(["--config", str(config_file), "--rounds", "2", "--sweep", "1,1", "--out", str(tmp_path)]) == 2
