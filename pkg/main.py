"""Experiment runner: seeds, lambda sweeps, and the server/client process modes."""
from functools import partial
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple
import argparse
import asyncio
import json
import logging
import math
import sys
import time

import httpx
import pandas as pd
from dotenv import dotenv_values
from pydantic import ValidationError

from datasets import (
    FederationDataset, load_cifar_binary, load_clinical_federation, load_mnist, load_silo,
    make_color_digits, make_rotated_silos, make_synth_clinical, make_synth_spurious, save_silo,
)
from federation import FederationCoordinator, round_log_csv, run_experiment
from federation_server import serve_until_done
from log_config import set_round, setup_logging
from metrics import accuracy_entropy, fairness_stats, format_summary, seed_summary
from models import (
    AlgoMode, DatasetKind, ExperimentConfig, MetricSummary, ModelSpec, RoundLog, SummaryReport, SweepRow,
)
from settings import Settings
from silo_client import SiloClient

# Get logger for this module
logger = logging.getLogger(__name__)

# Per-dataset defaults; config files and flags override them
DATASET_PRESETS: Dict[DatasetKind, Dict[str, Any]] = {
    DatasetKind.COLOR_DIGITS: {"lr": 3e-4, "weight_decay": 0.01, "lambda": 15.0},
    DatasetKind.ROTATED: {"lr": 1e-4, "weight_decay": 1e-3, "lambda": 1.0},
    DatasetKind.SYNTH_CLINICAL: {"lr": 2e-4, "weight_decay": 1e-3, "lambda": 0.1},
    DatasetKind.CLINICAL_CSV: {"lr": 2e-4, "weight_decay": 1e-3, "lambda": 0.1},
    DatasetKind.SYNTH_SPURIOUS: {"lr": 1e-4, "lambda": 0.1},
}

LIST_KEYS = {"seeds": int, "flip_probs": float, "ood_range": float, "cifar_batches": str}

MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
CIFAR_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))


class ConfigError(ValueError):
    """Raised for configuration problems that are not field validation errors"""
    pass


def _split_list(text: str) -> List[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def parse_silo_degrees(text: str) -> List[List[float]]:
    """"10 25 40;60 75 90" -> [[10, 25, 40], [60, 75, 90]]"""
    return [[float(angle) for angle in silo.split()] for silo in text.split(";") if silo.strip()]


def config_values(raw: Dict[str, Optional[str]]) -> Dict[str, Any]:
    """Turn flat KEY=value strings into ExperimentConfig input"""
    values: Dict[str, Any] = {}
    layers, head = None, None
    for key, text in raw.items():
        key = key.strip().lower()
        if text is None:
            raise ConfigError(f"config key '{key}' has no value")
        if key in LIST_KEYS:
            values[key] = [LIST_KEYS[key](item) for item in _split_list(text)]
        elif key == "silo_degrees":
            values[key] = parse_silo_degrees(text)
        elif key == "model_layers":
            layers = [int(size) for size in _split_list(text)]
        elif key == "model_head":
            head = text.strip()
        elif key in ("algo", "mode"):
            values["mode"] = text.strip()
        else:
            values[key] = text.strip()
    if layers is not None:
        values["model"] = {"layer_sizes": layers, **({"head": head} if head else {})}
    elif head is not None:
        raise ConfigError("model_head given without model_layers")
    return values


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Federated invariant learning experiments")
    parser.add_argument("--config", help="flat KEY=value config file")
    parser.add_argument("--dataset", choices=[kind.value for kind in DatasetKind])
    parser.add_argument("--algo", choices=[mode.value for mode in AlgoMode])
    parser.add_argument("--rounds", type=int)
    parser.add_argument("--lambda", dest="fishr_lambda", type=float)
    parser.add_argument("--seeds", help="comma-separated seeds")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--sweep", help="comma-separated lambdas for a lambda sweep")
    parser.add_argument("--serve", action="store_true", help="serve the federation over HTTP")
    parser.add_argument("--connect", metavar="URL", help="run one silo client against a server")
    parser.add_argument("--silo", help="silo file written by --serve (with --connect)")
    return parser.parse_args(argv)


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    """Preset < config file < flags"""
    file_values: Dict[str, Any] = {}
    if args.config:
        if not Path(args.config).is_file():
            raise ConfigError(f"config file not found: {args.config}")
        file_values = config_values(dotenv_values(args.config))
        unknown = set(file_values) - set(ExperimentConfig.model_fields) - {"lambda"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    flag_values: Dict[str, Any] = {}
    if args.dataset:
        flag_values["dataset"] = args.dataset
    if args.algo:
        flag_values["mode"] = args.algo
    if args.rounds is not None:
        flag_values["rounds"] = args.rounds
    if args.fishr_lambda is not None:
        flag_values["lambda"] = args.fishr_lambda
    if args.seeds:
        flag_values["seeds"] = [int(seed) for seed in _split_list(args.seeds)]
    if args.out:
        flag_values["output_dir"] = args.out

    dataset = DatasetKind(flag_values.get("dataset", file_values.get("dataset", DatasetKind.SYNTH_SPURIOUS)))
    if "fishr_lambda" in file_values:
        file_values["lambda"] = file_values.pop("fishr_lambda")
    return ExperimentConfig.model_validate({**DATASET_PRESETS[dataset], **file_values, **flag_values})


def default_model(config: ExperimentConfig, n_features: int) -> ModelSpec:
    if config.model is not None:
        return config.model
    if config.dataset == DatasetKind.COLOR_DIGITS:
        return ModelSpec(layer_sizes=[n_features, 390, 390, 1])
    if config.dataset == DatasetKind.ROTATED:
        return ModelSpec(layer_sizes=[n_features, 256, 10], head="softmax_ce")
    if config.dataset in (DatasetKind.SYNTH_CLINICAL, DatasetKind.CLINICAL_CSV):
        return ModelSpec(layer_sizes=[n_features, 1024, 1024, 512, 1])
    return ModelSpec(layer_sizes=[n_features, 32, 1])


def _data_file(config_path: Optional[str], settings: Settings, name: str) -> Path:
    """Explicit path, else the cache dir (plain or .gz)"""
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"data file not found: {path}")
        return path
    if settings.data_dir is None:
        raise ConfigError(f"no path for {name}; set it in the config or set FEDILC_DATA_DIR")
    for candidate in (settings.data_dir / name, settings.data_dir / f"{name}.gz"):
        if candidate.is_file():
            return candidate
    raise ConfigError(f"{name} not found in {settings.data_dir}")


def build_federation(config: ExperimentConfig, seed: int, settings: Settings) -> Tuple[FederationDataset, ModelSpec]:
    """Silos and OOD set for one seed, plus the model that fits them"""
    start_time = time.time()
    if config.dataset == DatasetKind.SYNTH_SPURIOUS:
        fed_data = make_synth_spurious(config.n_per_silo, config.d_inv, config.flip_probs, config.ood_flip, seed,
                                       n_ood=config.n_ood, val_fraction=config.val_fraction)
    elif config.dataset == DatasetKind.COLOR_DIGITS:
        base = load_mnist(_data_file(config.mnist_images, settings, MNIST_FILES[0]),
                          _data_file(config.mnist_labels, settings, MNIST_FILES[1]))
        fed_data = make_color_digits(base, config.flip_probs, config.ood_flip, config.ood_label_flip, seed,
                                     val_fraction=config.val_fraction)
    elif config.dataset == DatasetKind.ROTATED:
        if config.cifar_batches:
            paths = [_data_file(path, settings, path) for path in config.cifar_batches]
        else:
            paths = [_data_file(None, settings, name) for name in CIFAR_FILES]
        base = load_cifar_binary(paths)
        fed_data = make_rotated_silos(base, config.silo_degrees, tuple(config.ood_range), seed,
                                      val_fraction=config.val_fraction)
    elif config.dataset == DatasetKind.SYNTH_CLINICAL:
        fed_data, _ = make_synth_clinical(config.n_hospitals, config.n_features, config.positive_rate, seed,
                                          n_patients=config.n_patients, val_fraction=config.val_fraction)
    else:
        fed_data = load_clinical_federation(_data_file(config.clinical_csv, settings, "clinical.csv"),
                                            val_fraction=config.val_fraction, seed=seed)
    logger.info(f"Built {config.dataset.value} federation ({len(fed_data.silos)} silos, "
                f"{fed_data.n_features} features) in {time.time() - start_time:.2f}s")
    return fed_data, default_model(config, fed_data.n_features)


def _stem(config: ExperimentConfig) -> str:
    return f"{config.dataset.value}_{config.mode.value}_lam{config.fishr_lambda:g}"


def run_seed(config: ExperimentConfig, seed: int, settings: Settings) -> RoundLog:
    """Train one seed and write its round CSV"""
    set_round(0)
    fed_data, spec = build_federation(config, seed, settings)
    log = run_experiment(fed_data, config.round_config(seed), spec)
    write_round_csv(config, seed, log)
    return log


def write_round_csv(config: ExperimentConfig, seed: int, log: RoundLog) -> Path:
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{_stem(config)}_seed{seed}.csv"
    path.write_text(round_log_csv(log))
    logger.info(f"Wrote {path}")
    return path


def _metric(values: Sequence[Optional[float]]) -> MetricSummary:
    if not values or any(value is None for value in values):
        return MetricSummary(formatted="n/a")
    if len(values) == 1:
        return MetricSummary(mean=values[0], std=0.0, formatted=format_summary(values[0], 0.0))
    mean, std = seed_summary(values)
    return MetricSummary(mean=mean, std=std, formatted=format_summary(mean, std))


def _fairness(accuracies: Sequence[Sequence[float]]) -> Tuple[List[Optional[float]], List[Optional[float]]]:
    variances, kls = [], []
    for acc in accuracies:
        if len(acc) < 2 or sum(acc) <= 0:
            variances.append(None)
            kls.append(None)
            continue
        variance, kl = fairness_stats(acc)
        variances.append(variance)
        kls.append(kl)
    return variances, kls


def summarize(config: ExperimentConfig, logs: Sequence[RoundLog]) -> SummaryReport:
    """Seed mean±std of the OOD metrics at each seed's min-OOD-loss round"""
    reports = [log.best_report for log in logs]
    silo_acc = [report.per_silo_accuracy for report in reports]
    variances, kls = _fairness(silo_acc)
    entropies = [accuracy_entropy(acc) if sum(acc) > 0 else None for acc in silo_acc]

    subenv_variance, subenv_kl = None, None
    if all(report.per_subenv_accuracy for report in reports):
        sub_var, sub_kl = _fairness([list(report.per_subenv_accuracy.values()) for report in reports])
        subenv_variance, subenv_kl = _metric(sub_var), _metric(sub_kl)

    return SummaryReport(
        dataset=config.dataset,
        mode=config.mode,
        fishr_lambda=config.fishr_lambda,
        seeds=config.seeds,
        rounds=config.rounds,
        best_rounds=[log.best_round for log in logs],
        ood_loss=_metric([report.loss for report in reports]),
        ood_acc=_metric([report.accuracy for report in reports]),
        ood_auroc=_metric([report.auroc for report in reports]),
        ood_auprc=_metric([report.auprc for report in reports]),
        fairness_variance=_metric(variances),
        fairness_kl=_metric(kls),
        accuracy_entropy=_metric(entropies),
        subenv_fairness_variance=subenv_variance,
        subenv_fairness_kl=subenv_kl,
    )


async def run_seeds(config: ExperimentConfig, settings: Settings) -> List[RoundLog]:
    """Seeds side by side on executor threads; results come back in seed order"""
    loop = asyncio.get_running_loop()
    tasks = [loop.run_in_executor(None, partial(run_seed, config, seed, settings)) for seed in config.seeds]
    return list(await asyncio.gather(*tasks))


def write_summary(config: ExperimentConfig, summary: SummaryReport) -> Path:
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{_stem(config)}_summary.json"
    path.write_text(summary.model_dump_json(indent=2))
    schema_path = out_dir / "summary.schema.json"
    schema_path.write_text(json.dumps(SummaryReport.model_json_schema(), indent=2, sort_keys=True))
    logger.info(f"Wrote {path}")
    return path


async def run(config: ExperimentConfig, settings: Settings) -> SummaryReport:
    """Every seed, its CSV, and the summary JSON"""
    start_time = time.time()
    logs = await run_seeds(config, settings)
    summary = summarize(config, logs)
    write_summary(config, summary)
    logger.info(f"{config.mode.value} on {config.dataset.value}: OOD loss {summary.ood_loss.formatted}, "
                f"accuracy {summary.ood_acc.formatted} ({time.time() - start_time:.2f}s)")
    return summary


async def sweep_lambda(config: ExperimentConfig, lambdas: Sequence[float], settings: Settings) -> List[SweepRow]:
    """One row of min-OOD-loss mean±std per lambda, same seeds throughout"""
    if not lambdas:
        raise ConfigError("lambda sweep needs at least one value")
    if len(set(lambdas)) != len(lambdas):
        raise ConfigError(f"lambda values must be unique, got {list(lambdas)}")
    if any(value < 0 or not math.isfinite(value) for value in lambdas):
        raise ConfigError(f"lambda values must be finite and non-negative, got {list(lambdas)}")

    rows = []
    for value in lambdas:
        swept = config.model_copy(update={"fishr_lambda": value})
        logs = await run_seeds(swept, settings)
        metric = _metric([min(record.ood_loss for record in log.records) for log in logs])
        rows.append(SweepRow(fishr_lambda=value, ood_loss_mean=metric.mean, ood_loss_std=metric.std,
                             formatted=metric.formatted))
        logger.info(f"lambda={value:g}: min OOD loss {metric.formatted}")

    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{config.dataset.value}_{config.mode.value}_lambda_sweep.csv"
    frame = pd.DataFrame([row.model_dump() for row in rows])
    path.write_text(frame.to_csv(index=False, float_format="%.17g", lineterminator="\n"))
    logger.info(f"Wrote {path}")
    return rows


async def serve(config: ExperimentConfig, settings: Settings) -> RoundLog:
    """Write one silo file per client, then run the first seed over HTTP"""
    seed = config.seeds[0]
    fed_data, spec = build_federation(config, seed, settings)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for silo_index, silo in enumerate(fed_data.silos):
        path = out_dir / f"silo_{silo_index}.npz"
        save_silo(path, silo_index, silo.train)
        logger.info(f"Silo {silo_index} -> {path}")

    coordinator = FederationCoordinator(fed_data, config.round_config(seed), spec,
                                        on_finished=partial(write_round_csv, config, seed))
    await serve_until_done(coordinator, settings.host, settings.port, settings.poll_seconds)
    return coordinator.log


def client(server_url: str, silo_path: str, settings: Settings) -> int:
    """Run one silo process until the server is done"""
    if not Path(silo_path).is_file():
        raise ConfigError(f"silo file not found: {silo_path}")
    silo_index, silo = load_silo(silo_path)
    with httpx.Client(base_url=server_url, timeout=60.0) as http:
        return SiloClient(http, silo, silo_index, poll_seconds=settings.poll_seconds).run()


def main(argv: Optional[Sequence[str]] = None) -> int:
    settings = Settings.from_env()
    setup_logging(settings.log_level)
    args = parse_args(argv)

    try:
        if args.connect:
            if not args.silo:
                raise ConfigError("--connect needs --silo")
            config = None
        else:
            config = load_config(args)
        lambdas = [float(value) for value in _split_list(args.sweep)] if args.sweep else None
    except (ConfigError, ValidationError, ValueError) as e:
        logger.error(f"Invalid configuration: {e}")
        return 2

    try:
        if args.connect:
            client(args.connect, args.silo, settings)
        elif args.serve:
            asyncio.run(serve(config, settings))
        elif lambdas is not None:
            asyncio.run(sweep_lambda(config, lambdas, settings))
        else:
            asyncio.run(run(config, settings))
    except ConfigError as e:
        logger.error(f"Invalid configuration: {e}")
        return 2
    except Exception as e:
        logger.error(f"Run failed: {e}", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
