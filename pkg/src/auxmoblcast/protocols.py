"""Benchmark configuration and the experiment protocols built on it.

A benchmark is a set of synthetic cities. Each city is generated, windowed
and split once; models are then trained per seed. Protocols:

* ``standard``: prompt model plus every numeric baseline per city.
* ``aux_ablation``: Prompt C with the auxiliary loss at its preset vs. off.
* ``date_ablation``: Prompt C with and without calendar clauses.
* ``zero_shot``: train on one city, evaluate on every other city's test split.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np
import torch

from . import baselines as bl
from .errors import ConfigError, RuntimeFailure
from .evaluation import (
    EvalReport,
    RunMetrics,
    evaluate_model,
    history_mean_forecast,
    mae,
    rmse,
    write_reports,
)
from .mobility_data import (
    CategoryProfile,
    DatasetSplit,
    SyntheticSpec,
    VisitSeries,
    generate_synthetic,
    split_dataset,
    windows_for,
)
from .model import MobilityModel, ModelConfig, init_params, parameter_checksum
from .prompting import PromptVariant, render_corpus
from .tokenizer import Vocabulary, build_vocab
from .training import TrainReport, TrainingConfig, save_run, train

log = logging.getLogger(__name__)

PROTOCOLS = ("standard", "aux_ablation", "date_ablation", "zero_shot")
NUMERIC_MODELS = ("lr", "gru", "gru_att", "transformer", "transformer_temporal")

# Weekly shapes loosely follow typical category patterns: weekend peaks for
# leisure and lodging, weekday peaks for banking and fitness.
CATEGORY_LIBRARY = (
    CategoryProfile("Hotel", 20.0, (0.8, 0.8, 0.8, 0.9, 1.1, 1.6, 1.5)),
    CategoryProfile("Commercial Banking", 12.0, (1.2, 1.1, 1.1, 1.1, 1.3, 0.5, 0.2)),
    CategoryProfile("Limited-Service Restaurant", 9.0, (0.8, 0.9, 1.0, 1.0, 1.2, 1.3, 0.9)),
    CategoryProfile("Grocery Store", 30.0, (0.9, 0.85, 0.9, 0.95, 1.1, 1.35, 1.05)),
    CategoryProfile("Fitness Center", 6.0, (1.3, 1.25, 1.2, 1.1, 0.9, 0.7, 0.5)),
    CategoryProfile("Museum", 4.0, (0.3, 1.0, 1.0, 1.0, 1.1, 1.6, 1.3)),
    CategoryProfile("Gasoline Station", 16.0, (1.05, 1.0, 1.0, 1.05, 1.15, 0.95, 0.8)),
)


@dataclass(frozen=True)
class CitySetup:
    name: str
    num_pois: int
    num_categories: int
    lambda_ce: float = 0.8
    lambda_poi: float = 0.2
    data_seed: int = 0
    first_poi_id: int = 0


DEFAULT_CITIES = (
    CitySetup("nyc", 60, 5, 0.8, 0.2, data_seed=101, first_poi_id=10_000),
    CitySetup("dallas", 40, 7, 0.9, 0.1, data_seed=202, first_poi_id=20_000),
    CitySetup("miami", 50, 6, 0.8, 0.2, data_seed=303, first_poi_id=30_000),
)


@dataclass(frozen=True)
class ModelSettings:
    d_model: int = 128
    num_heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    ffn_dim: Optional[int] = None
    max_len: int = 128
    dropout: float = 0.1


# Desk-scale presets: the full benchmark (3 cities x 5 seeds) must finish on
# a single CPU core within budget, which allows about six prompt-model epochs.
DESK_TRAINING = TrainingConfig(learning_rate=5e-4, epochs=6)
DESK_BASELINE = bl.BaselineConfig(epochs=20, batch_size=256)


@dataclass(frozen=True)
class BenchmarkConfig:
    cities: tuple = DEFAULT_CITIES
    categories: tuple = CATEGORY_LIBRARY
    start_date: dt.date = dt.date(2020, 6, 15)
    num_days: int = 147
    history: int = 15
    noise: float = 0.05
    ratios: tuple = (0.7, 0.1, 0.2)
    prompt_kind: str = "C"
    model: ModelSettings = ModelSettings()
    training: TrainingConfig = DESK_TRAINING
    baseline: bl.BaselineConfig = DESK_BASELINE
    seeds: tuple = (0, 1, 2, 3, 4)

    def city(self, name: str) -> CitySetup:
        for c in self.cities:
            if c.name == name:
                return c
        raise ConfigError("cities", f"unknown city {name!r}")


# ---------------------------------------------------------------------------
# Config from plain mappings (YAML files, CLI overrides)

def _build(cls, data: Mapping[str, Any], prefix: str):
    if not isinstance(data, Mapping):
        raise ConfigError(prefix, "expected a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"{prefix}{key}", "unknown key")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(prefix.rstrip(".") or cls.__name__, str(exc)) from exc


def config_from_dict(data: Mapping[str, Any]) -> BenchmarkConfig:
    """Build a BenchmarkConfig, naming the offending key on any error."""
    data = dict(data or {})
    top = {f.name for f in dataclasses.fields(BenchmarkConfig)}
    for key in data:
        if key not in top:
            raise ConfigError(key, "unknown key")
    kwargs: dict[str, Any] = {}
    if "cities" in data:
        if not isinstance(data["cities"], (list, tuple)) or not data["cities"]:
            raise ConfigError("cities", "expected a non-empty list")
        kwargs["cities"] = tuple(_build(CitySetup, c, f"cities[{i}].") for i, c in enumerate(data["cities"]))
    if "categories" in data:
        cats = []
        for i, c in enumerate(data["categories"]):
            c = dict(c)
            if "weekly_profile" in c:
                c["weekly_profile"] = tuple(float(v) for v in c["weekly_profile"])
            cats.append(_build(CategoryProfile, c, f"categories[{i}]."))
        kwargs["categories"] = tuple(cats)
    if "start_date" in data:
        value = data["start_date"]
        try:
            kwargs["start_date"] = value if isinstance(value, dt.date) else dt.date.fromisoformat(str(value))
        except ValueError as exc:
            raise ConfigError("start_date", str(exc)) from exc
    for key in ("num_days", "history"):
        if key in data:
            if not isinstance(data[key], int) or data[key] <= 0:
                raise ConfigError(key, "expected a positive integer")
            kwargs[key] = data[key]
    if "noise" in data:
        if not isinstance(data["noise"], (int, float)) or data["noise"] < 0:
            raise ConfigError("noise", "expected a non-negative number")
        kwargs["noise"] = float(data["noise"])
    if "ratios" in data:
        kwargs["ratios"] = tuple(data["ratios"])
    if "prompt_kind" in data:
        if data["prompt_kind"] not in ("A", "B", "C"):
            raise ConfigError("prompt_kind", "expected one of A, B, C")
        kwargs["prompt_kind"] = data["prompt_kind"]
    if "seeds" in data:
        seeds = data["seeds"]
        if not isinstance(seeds, (list, tuple)) or not seeds or not all(isinstance(s, int) for s in seeds):
            raise ConfigError("seeds", "expected a non-empty list of integers")
        kwargs["seeds"] = tuple(seeds)
    for key, cls in (("model", ModelSettings), ("training", TrainingConfig), ("baseline", bl.BaselineConfig)):
        if key in data:
            kwargs[key] = _build(cls, data[key], f"{key}.")
    cfg = BenchmarkConfig(**kwargs)
    for city in cfg.cities:
        if city.num_categories > len(cfg.categories):
            raise ConfigError("cities", f"{city.name} needs {city.num_categories} categories, "
                                        f"library has {len(cfg.categories)}")
    return cfg


def config_to_dict(cfg: BenchmarkConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["start_date"] = cfg.start_date.isoformat()
    return out


# ---------------------------------------------------------------------------
# Data

@dataclass
class CityData:
    setup: CitySetup
    series: list[VisitSeries]
    split: DatasetSplit
    categories: list[str]

    @property
    def name(self) -> str:
        return self.setup.name


def synthetic_spec(cfg: BenchmarkConfig, city: CitySetup) -> SyntheticSpec:
    return SyntheticSpec(
        num_pois=city.num_pois,
        categories=tuple(cfg.categories[: city.num_categories]),
        start_date=cfg.start_date,
        num_days=cfg.num_days,
        noise=cfg.noise,
        seed=city.data_seed,
        city=city.name,
        first_poi_id=city.first_poi_id,
    )


def build_city(cfg: BenchmarkConfig, city: CitySetup) -> CityData:
    series = generate_synthetic(synthetic_spec(cfg, city))
    split = split_dataset(windows_for(series, cfg.history), cfg.ratios, seed=city.data_seed)
    cats = sorted({c.label for c in cfg.categories[: city.num_categories]})
    return CityData(city, series, split, cats)


def build_cities(cfg: BenchmarkConfig) -> dict[str, CityData]:
    return {c.name: build_city(cfg, c) for c in cfg.cities}


# ---------------------------------------------------------------------------
# Prompt model runs

@dataclass
class PromptRun:
    city: str
    variant: PromptVariant
    seed: int
    model: MobilityModel
    vocab: Vocabulary
    report: TrainReport
    metrics: RunMetrics
    diagnostics: dict = field(default_factory=dict)


def prompt_training_config(cfg: BenchmarkConfig, city: CitySetup, variant: PromptVariant,
                           seed: int, auxiliary: bool = True) -> TrainingConfig:
    if variant.kind == "C" and auxiliary:
        lam = (city.lambda_ce, city.lambda_poi)
    else:
        lam = (1.0, 0.0)
    return dataclasses.replace(cfg.training, lambda_ce=lam[0], lambda_poi=lam[1], seed=seed)


def fit_prompt_model(data: CityData, variant: PromptVariant, seed: int, cfg: BenchmarkConfig,
                     auxiliary: bool = True, out_dir: Optional[Path] = None) -> PromptRun:
    split = data.split
    train_pairs = render_corpus(split.train, variant)
    val_pairs = render_corpus(split.validation, variant)
    test_pairs = render_corpus(split.test, variant)
    vocab = build_vocab([p.input_text for p in train_pairs] + [p.target_text for p in train_pairs],
                        max_len=cfg.model.max_len)
    tcfg = prompt_training_config(cfg, data.setup, variant, seed, auxiliary)
    use_categories = tcfg.lambda_poi > 0
    mcfg = ModelConfig(vocab_size=vocab.size, num_categories=len(data.categories),
                       **dataclasses.asdict(cfg.model))
    model = init_params(mcfg, seed)
    started = time.perf_counter()
    model, report = train(model, vocab, train_pairs, val_pairs, tcfg, variant,
                          data.categories if use_categories else None)
    elapsed = time.perf_counter() - started
    metrics = evaluate_model(model, vocab, test_pairs, variant, seed=seed)
    best = report.best
    diagnostics = {
        "epoch1_train_total": report.epochs[0].total,
        "best_val_total": best.val_total,
        "loss_ratio": best.val_total / report.epochs[0].total,
        "val_category_accuracy": best.val_category_accuracy,
        "chance_accuracy": 1.0 / len(data.categories),
        "best_epoch": report.best_epoch,
        "epochs_run": len(report.epochs),
        "stopped_early": report.stopped_early,
        "train_seconds": elapsed,
    }
    log.info("%s %s seed=%d rmse=%.3f ratio=%.3f acc=%.3f (%.0fs)", data.name, variant.label, seed,
             metrics.rmse, diagnostics["loss_ratio"], diagnostics["val_category_accuracy"], elapsed)
    if out_dir is not None:
        save_run(out_dir, model, vocab, report,
                 {"city": data.name, "variant": variant.label, "seed": seed, "auxiliary": use_categories})
    return PromptRun(data.name, variant, seed, model, vocab, report, metrics, diagnostics)


def _prompt_report(name: str, runs: Sequence[PromptRun], city_test: Optional[str] = None) -> EvalReport:
    first = runs[0]
    return EvalReport(
        model_name=name,
        variant=first.variant.label,
        city_train=first.city,
        city_test=city_test or first.city,
        runs=[r.metrics for r in runs],
        extras={"training": [dict(seed=r.seed, **r.diagnostics) for r in runs]},
    )


# ---------------------------------------------------------------------------
# Numeric baselines

def _windows(instances):
    return bl.numeric_windows(instances)


def fit_baseline(name: str, data: CityData, seed: int, cfg: BenchmarkConfig):
    if name not in bl.BASELINES:
        raise ConfigError("models", f"unknown baseline {name!r}")
    return bl.BASELINES[name](_windows(data.split.train), _windows(data.split.validation), seed, cfg.baseline)


def _numeric_metrics(forecaster, test_windows, seed: int) -> RunMetrics:
    pred = forecaster.predict(test_windows)
    truth = [w.target for w in test_windows]
    return RunMetrics(seed, rmse(pred, truth), mae(pred, truth))


def history_mean_report(data: CityData, seeds: Sequence[int], city_test: Optional[CityData] = None) -> EvalReport:
    test = (city_test or data).split.test
    pred = [history_mean_forecast(i.history_counts) for i in test]
    truth = [i.target_count for i in test]
    metrics = [RunMetrics(s, rmse(pred, truth), mae(pred, truth)) for s in seeds]
    return EvalReport("history_mean", "numeric", data.name, (city_test or data).name, metrics)


# ---------------------------------------------------------------------------
# Protocols

def _run_dir(out_dir, *parts) -> Optional[Path]:
    return None if out_dir is None else Path(out_dir).joinpath(*map(str, parts))


def _standard_cell(cfg, seeds, models, out_dir, data: CityData, cities) -> list[EvalReport]:
    variant = PromptVariant(cfg.prompt_kind, True)
    reports = [history_mean_report(data, seeds)]
    if "prompt" in models:
        runs = [fit_prompt_model(data, variant, s, cfg,
                                 out_dir=_run_dir(out_dir, "runs", data.name, variant.label, f"seed{s}"))
                for s in seeds]
        reports.append(_prompt_report("prompt", runs))
    test_windows = _windows(data.split.test)
    for name in models:
        if name != "prompt":
            runs = [_numeric_metrics(fit_baseline(name, data, s, cfg), test_windows, s) for s in seeds]
            reports.append(EvalReport(name, "numeric", data.name, data.name, runs))
    return reports


def _aux_cell(cfg, seeds, models, out_dir, data: CityData, cities) -> list[EvalReport]:
    variant = PromptVariant("C", True)
    reports = []
    for aux, name in ((True, "prompt_aux"), (False, "prompt_no_aux")):
        runs = [fit_prompt_model(data, variant, s, cfg, auxiliary=aux,
                                 out_dir=_run_dir(out_dir, "runs", data.name, name, f"seed{s}"))
                for s in seeds]
        reports.append(_prompt_report(name, runs))
    return reports


def _date_cell(cfg, seeds, models, out_dir, data: CityData, cities) -> list[EvalReport]:
    reports = []
    for dates in (True, False):
        variant = PromptVariant(cfg.prompt_kind, dates)
        runs = [fit_prompt_model(data, variant, s, cfg,
                                 out_dir=_run_dir(out_dir, "runs", data.name, variant.label, f"seed{s}"))
                for s in seeds]
        reports.append(_prompt_report("prompt", runs))
    return reports


def _zero_shot_cell(cfg, seeds, models, out_dir, source: CityData, cities) -> list[EvalReport]:
    """Train on ``source`` and evaluate, unchanged, on every other city."""
    variant = PromptVariant(cfg.prompt_kind, True)
    targets = [c for c in cities.values() if c.name != source.name]
    reports = [history_mean_report(source, seeds, tgt) for tgt in targets]
    if "prompt" in models:
        per_target = {t.name: [] for t in targets}
        checksums = {t.name: [] for t in targets}
        for s in seeds:
            run = fit_prompt_model(source, variant, s, cfg,
                                   out_dir=_run_dir(out_dir, "runs", source.name, variant.label, f"seed{s}"))
            for tgt in targets:
                before = parameter_checksum(run.model)
                pairs = render_corpus(tgt.split.test, variant)
                per_target[tgt.name].append(evaluate_model(run.model, run.vocab, pairs, variant, seed=s))
                after = parameter_checksum(run.model)
                if after != before:
                    raise RuntimeFailure(f"parameters changed while evaluating {source.name} -> {tgt.name}")
                checksums[tgt.name].append((before, after))
        for tgt in targets:
            reports.append(EvalReport("prompt", variant.label, source.name, tgt.name, per_target[tgt.name],
                                      extras={"checksums": checksums[tgt.name]}))
    for name in models:
        if name == "prompt":
            continue
        per_target = {t.name: [] for t in targets}
        for s in seeds:
            forecaster = fit_baseline(name, source, s, cfg)
            for tgt in targets:
                per_target[tgt.name].append(_numeric_metrics(forecaster, _windows(tgt.split.test), s))
        for tgt in targets:
            reports.append(EvalReport(name, "numeric", source.name, tgt.name, per_target[tgt.name]))
    return reports


def run_prompt_benchmark(cfg: BenchmarkConfig = BenchmarkConfig(), include_dates: bool = True, seeds=None,
                         out_dir=None, cities: Optional[dict] = None) -> list[EvalReport]:
    """Prompt model and history-mean reference on every city, one run per seed."""
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    cities = cities or build_cities(cfg)
    variant = PromptVariant(cfg.prompt_kind, include_dates)
    reports = []
    for data in cities.values():
        reports.append(history_mean_report(data, seeds))
        runs = [fit_prompt_model(data, variant, s, cfg,
                                 out_dir=_run_dir(out_dir, "runs", data.name, variant.label, f"seed{s}"))
                for s in seeds]
        reports.append(_prompt_report("prompt", runs))
    if out_dir is not None:
        write_reports(reports, out_dir, stem="prompt_benchmark")
    return reports


_CELLS = {
    "standard": _standard_cell,
    "aux_ablation": _aux_cell,
    "date_ablation": _date_cell,
    "zero_shot": _zero_shot_cell,
}


def _run_cell(args):
    name, cfg, seeds, models, out_dir, city, cities = args
    torch.set_num_threads(1)
    return _CELLS[name](cfg, seeds, models, out_dir, cities[city], cities)


def run_protocol(name: str, cfg: BenchmarkConfig = BenchmarkConfig(), seeds=None, out_dir=None,
                 models=None, jobs: int = 1, cities: Optional[dict] = None) -> list[EvalReport]:
    """Run one protocol; one cell per (training) city, optionally in parallel.

    Every cell seeds itself, so results do not depend on ``jobs``.
    """
    if name not in _CELLS:
        raise ConfigError("protocol", f"unknown protocol {name!r}; expected one of {', '.join(PROTOCOLS)}")
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    if not seeds:
        raise ConfigError("seeds", "at least one seed is required")
    models = tuple(models or ("prompt",) + NUMERIC_MODELS)
    for m in models:
        if m != "prompt" and m not in bl.BASELINES:
            raise ConfigError("models", f"unknown model {m!r}")
    cities = cities or build_cities(cfg)
    tasks = [(name, cfg, seeds, models, out_dir, c, cities) for c in cities]
    if jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            results = list(pool.map(_run_cell, tasks))
    else:
        results = [_CELLS[name](cfg, seeds, models, out_dir, cities[c], cities) for c in cities]
    reports = [rep for cell in results for rep in cell]
    if out_dir is not None:
        write_reports(reports, out_dir, stem=name)
    return reports


def mean_rmse(reports: Sequence[EvalReport]) -> float:
    return float(np.mean([r.rmse for rep in reports for r in rep.runs]))
