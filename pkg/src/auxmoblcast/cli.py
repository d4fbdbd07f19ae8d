"""Command-line entry point: ``auxmoblcast <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime error.
Configuration files are YAML mappings; command-line flags override file values.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import json
import logging
import shutil
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Optional

import yaml

from . import baselines as bl
from .errors import CheckpointError, ConfigError, DataError, EmptyInputError, MobilityError
from .evaluation import EvalReport, RunMetrics, evaluate_model, mae, rmse, write_reports
from .mobility_data import (
    CategoryProfile,
    SyntheticSpec,
    generate_synthetic,
    ingest_csv,
    split_dataset,
    windows_for,
    write_csv,
)
from .model import ModelConfig, init_params, load_checkpoint
from .prompting import PromptVariant, render_corpus, write_corpus
from .protocols import PROTOCOLS, ModelSettings, config_from_dict, config_to_dict, run_protocol
from .tokenizer import Vocabulary, build_vocab
from .training import TrainingConfig, save_run, train

log = logging.getLogger("auxmoblcast")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# Config handling

def load_yaml(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("--config", f"invalid YAML: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("--config", "top level must be a mapping")
    return data


def _dataclass_from(cls, data: Any, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(prefix.rstrip("."), "expected a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{prefix}{key}", "unknown key")
    try:
        return cls(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(prefix.rstrip("."), str(exc)) from exc


def synthetic_spec_from(data: dict, seed: Optional[int] = None) -> SyntheticSpec:
    data = dict(data)
    required = ("num_pois", "categories", "start_date", "num_days")
    for key in required:
        if key not in data:
            raise ConfigError(key, "missing required key")
    known = {f.name for f in dataclasses.fields(SyntheticSpec)}
    for key in data:
        if key not in known:
            raise ConfigError(key, "unknown key")
    if not isinstance(data["categories"], list) or not data["categories"]:
        raise ConfigError("categories", "expected a non-empty list")
    cats = []
    for i, c in enumerate(data["categories"]):
        prefix = f"categories[{i}]."
        if not isinstance(c, dict):
            raise ConfigError(prefix.rstrip("."), "expected a mapping")
        for key in ("label", "base_rate", "weekly_profile"):
            if key not in c:
                raise ConfigError(prefix + key, "missing required key")
        try:
            c = dict(c, base_rate=float(c["base_rate"]),
                     weekly_profile=tuple(float(v) for v in c["weekly_profile"]))
        except (TypeError, ValueError) as exc:
            raise ConfigError(prefix.rstrip("."), str(exc)) from exc
        cats.append(_dataclass_from(CategoryProfile, c, prefix))
    data["categories"] = tuple(cats)
    try:
        if not isinstance(data["start_date"], dt.date):
            data["start_date"] = dt.date.fromisoformat(str(data["start_date"]))
    except ValueError as exc:
        raise ConfigError("start_date", str(exc)) from exc
    for key in ("num_pois", "num_days", "seed", "first_poi_id"):
        if key in data and (not isinstance(data[key], int) or isinstance(data[key], bool)):
            raise ConfigError(key, "expected an integer")
    if "noise" in data and not isinstance(data["noise"], (int, float)):
        raise ConfigError("noise", "expected a number")
    if seed is not None:
        data["seed"] = seed
    spec = SyntheticSpec(**data)
    spec.validate()
    return spec


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Everything ``train`` needs; every field has a default."""

    data: Optional[str] = None
    synthetic: Optional[dict] = None
    variant: str = "C"
    ratios: tuple = (0.7, 0.1, 0.2)
    split_mode: str = "chronological"
    model: ModelSettings = ModelSettings()
    training: TrainingConfig = TrainingConfig()
    seed: int = 0


def run_config_from(data: dict, args: argparse.Namespace) -> RunConfig:
    data = dict(data)
    known = {f.name for f in dataclasses.fields(RunConfig)}
    for key in data:
        if key not in known:
            raise ConfigError(key, "unknown key")
    if "model" in data:
        data["model"] = _dataclass_from(ModelSettings, data["model"], "model.")
    if "training" in data:
        data["training"] = _dataclass_from(TrainingConfig, data["training"], "training.")
    if "ratios" in data:
        data["ratios"] = tuple(data["ratios"])
    if getattr(args, "data", None):
        data["data"] = args.data
    if getattr(args, "variant", None):
        data["variant"] = _variant_label(args.variant, not getattr(args, "no_dates", False))
    if args.seed is not None:
        data["seed"] = args.seed
    cfg = RunConfig(**data)
    try:
        PromptVariant.parse(cfg.variant)
    except ValueError as exc:
        raise ConfigError("variant", str(exc)) from exc
    if cfg.data is None and cfg.synthetic is None:
        raise ConfigError("data", "either data or synthetic must be given")
    return cfg


def _variant_label(kind: str, dates: bool) -> str:
    kind = kind.upper()
    if kind not in ("A", "B", "C"):
        raise ConfigError("--variant", f"expected a, b or c, got {kind!r}")
    return kind if dates else f"{kind}-nodates"


# ---------------------------------------------------------------------------
# Output bookkeeping

@contextmanager
def owned_output(path: Optional[str]):
    """Remove ``path`` if the command fails and the path did not exist before."""
    p = Path(path) if path else None
    existed = p is not None and p.exists()
    try:
        yield p
    except BaseException:
        if p is not None and not existed and p.exists():
            if p.is_dir():
                shutil.rmtree(p)
            else:
                p.unlink()
        raise


def _require_out(args) -> str:
    if not args.out:
        raise ConfigError("--out", "an output path is required")
    return args.out


def _load_series(path: Optional[str]):
    if not path:
        raise ConfigError("--data", "a dataset path is required")
    series = ingest_csv(path)
    if not series:
        raise EmptyInputError(f"{path} contains no rows")
    return series


# ---------------------------------------------------------------------------
# Subcommands

def cmd_synth(args) -> int:
    cfg = load_yaml(args.config)
    spec = synthetic_spec_from(cfg, args.seed)
    with owned_output(_require_out(args)) as out:
        if out.parent != Path(""):
            out.parent.mkdir(parents=True, exist_ok=True)
        write_csv(generate_synthetic(spec), out)
    print(f"wrote {spec.num_pois * spec.num_days} rows to {out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    series = _load_series(args.data)
    summary = {
        "num_pois": len(series),
        "num_rows": sum(len(s.counts) for s in series),
        "categories": sorted({s.category for s in series}),
        "cities": sorted({s.city for s in series}),
        "first_date": min(s.start_date for s in series).isoformat(),
        "last_date": max(s.dates[-1] for s in series).isoformat(),
    }
    if args.out:
        with owned_output(args.out) as out:
            write_csv(series, out)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_prompt(args) -> int:
    series = _load_series(args.data)
    variant = PromptVariant.parse(_variant_label(args.variant, not args.no_dates))
    instances = windows_for(series)
    if not instances:
        raise EmptyInputError("no forecast windows: every series is shorter than the history length")
    if args.split != "all":
        split = split_dataset(instances, seed=args.seed or 0)
        instances = getattr(split, args.split)
    with owned_output(_require_out(args)) as out:
        write_corpus(render_corpus(instances, variant), out)
    print(f"wrote {len(instances)} prompt pairs ({variant.label}) to {out}")
    return EXIT_OK


def _split_for(cfg: RunConfig):
    if cfg.data is not None:
        series = _load_series(cfg.data)
    else:
        series = generate_synthetic(synthetic_spec_from(cfg.synthetic))
    return series, split_dataset(windows_for(series), cfg.ratios, seed=cfg.seed, mode=cfg.split_mode)


def cmd_train(args) -> int:
    cfg = run_config_from(load_yaml(args.config), args)
    variant = PromptVariant.parse(cfg.variant)
    series, split = _split_for(cfg)
    train_pairs = render_corpus(split.train, variant)
    val_pairs = render_corpus(split.validation, variant)
    vocab = build_vocab([p.input_text for p in train_pairs] + [p.target_text for p in train_pairs],
                        max_len=cfg.model.max_len)
    categories = sorted({s.category for s in series})
    tcfg = dataclasses.replace(cfg.training, seed=cfg.seed)
    if variant.kind != "C" and tcfg.lambda_poi > 0:
        tcfg = dataclasses.replace(tcfg, lambda_ce=1.0, lambda_poi=0.0)
    model = init_params(ModelConfig(vocab.size, len(categories), **dataclasses.asdict(cfg.model)), cfg.seed)
    with owned_output(_require_out(args)) as out:
        model, report = train(model, vocab, train_pairs, val_pairs, tcfg, variant,
                              categories if tcfg.lambda_poi > 0 else None)
        meta = {"variant": variant.label, "seed": cfg.seed, "categories": categories,
                "training": dataclasses.asdict(tcfg), "model": dataclasses.asdict(cfg.model),
                "ratios": list(cfg.ratios), "split_mode": cfg.split_mode, "data": cfg.data}
        save_run(out, model, vocab, report, meta)
        metrics = evaluate_model(model, vocab, render_corpus(split.test, variant), variant, seed=cfg.seed)
        _write_metrics(out / "test_metrics.json", metrics)
    print(f"best epoch {report.best_epoch}: val_total={report.best.val_total:.4f}; "
          f"test rmse={metrics.rmse:.4f} mae={metrics.mae:.4f}")
    return EXIT_OK


def _write_metrics(path: Path, metrics: RunMetrics) -> None:
    path.write_text(json.dumps(dataclasses.asdict(metrics), indent=2, sort_keys=True) + "\n")


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise ConfigError("--checkpoint", "a checkpoint path is required")
    ckpt = Path(args.checkpoint)
    model, _, extra = load_checkpoint(ckpt)
    meta = extra.get("metadata", {})
    vocab_path = Path(args.vocab) if args.vocab else ckpt.with_name("vocab.txt")
    try:
        vocab = Vocabulary.load(vocab_path)
    except OSError as exc:
        raise CheckpointError(f"cannot read vocabulary {vocab_path}: {exc.strerror}") from exc
    label = _variant_label(args.variant, not args.no_dates) if args.variant else meta.get("variant", "C")
    variant = PromptVariant.parse(label)
    instances = windows_for(_load_series(args.data))
    if args.split != "all":
        split = split_dataset(instances, tuple(meta.get("ratios", (0.7, 0.1, 0.2))),
                              seed=meta.get("seed", 0), mode=meta.get("split_mode", "chronological"))
        instances = getattr(split, args.split)
    if not instances:
        raise EmptyInputError("no instances to evaluate")
    city = instances[0].city
    seed = meta.get("seed", 0) if args.seed is None else args.seed
    metrics = evaluate_model(model, vocab, render_corpus(instances, variant), variant, seed=seed)
    with owned_output(_require_out(args)) as out:
        out.mkdir(parents=True, exist_ok=True)
        _write_metrics(out / "metrics.json", metrics)
        write_reports([EvalReport("prompt", variant.label, meta.get("city", city), city, [metrics])], out)
    print(f"rmse={metrics.rmse:.4f} mae={metrics.mae:.4f} parse_fail={metrics.parse_fail:.4f}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    file_cfg = load_yaml(args.config)
    bcfg = _dataclass_from(bl.BaselineConfig, file_cfg.get("baseline", {}), "baseline.")
    if args.name not in bl.BASELINES:
        raise ConfigError("name", f"unknown baseline {args.name!r}; expected one of {', '.join(bl.BASELINES)}")
    series = _load_series(args.data)
    seed = args.seed or 0
    split = split_dataset(windows_for(series), seed=seed)
    train_w, val_w, test_w = (bl.numeric_windows(s) for s in (split.train, split.validation, split.test))
    model = bl.BASELINES[args.name](train_w, val_w, seed, bcfg)
    pred = model.predict(test_w)
    truth = [w.target for w in test_w]
    metrics = RunMetrics(seed, rmse(pred, truth), mae(pred, truth))
    city = series[0].city
    with owned_output(_require_out(args)) as out:
        out.mkdir(parents=True, exist_ok=True)
        _write_metrics(out / "metrics.json", metrics)
        write_reports([EvalReport(args.name, "numeric", city, city, [metrics])], out)
    print(f"{args.name}: rmse={metrics.rmse:.6g} mae={metrics.mae:.6g}")
    return EXIT_OK


def cmd_protocol(args) -> int:
    cfg = config_from_dict(load_yaml(args.config))
    seeds = tuple(int(s) for s in args.seeds.split(",")) if args.seeds else None
    if seeds is None and args.seed is not None:
        seeds = (args.seed,)
    models = tuple(args.models.split(",")) if args.models else None
    with owned_output(_require_out(args)) as out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "benchmark_config.json").write_text(
            json.dumps(config_to_dict(cfg), indent=2, sort_keys=True, default=str) + "\n")
        reports = run_protocol(args.name, cfg, seeds, out, models, jobs=args.jobs)
    for rep in reports:
        print(f"{rep.model_name:22s} {rep.variant:10s} {rep.city_train:>8s} -> {rep.city_test:<8s} "
              f"rmse={rep.mean('rmse'):.4f}±{rep.std('rmse'):.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser

def build_parser() -> argparse.ArgumentParser:
    def global_flags(defaults: bool) -> argparse.ArgumentParser:
        # Subcommand copies suppress their defaults so flags given before the
        # subcommand name are not overwritten.
        g = argparse.ArgumentParser(add_help=False)
        d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
        g.add_argument("--seed", type=int, default=d(None), help="seed overriding the config file")
        g.add_argument("--config", default=d(None), help="YAML configuration file")
        g.add_argument("--out", default=d(None), help="output file or directory")
        g.add_argument("--jobs", type=int, default=d(1), help="worker processes for protocol cells")
        g.add_argument("-v", "--verbose", action="store_true", default=d(False), help="log training progress")
        return g

    common = global_flags(False)
    parser = argparse.ArgumentParser(prog="auxmoblcast", parents=[global_flags(True)],
                                     description="Prompt-based POI visit forecasting pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset CSV from a spec file")

    p = sub.add_parser("ingest", parents=[common], help="validate a visit CSV and print a summary")
    p.add_argument("data")

    def variant_flags(p, default):
        p.add_argument("--variant", type=str.lower, choices=("a", "b", "c"), default=default)
        p.add_argument("--no-dates", action="store_true", help="drop the calendar clauses")

    p = sub.add_parser("prompt", parents=[common], help="render a dataset into a prompt corpus (JSONL)")
    p.add_argument("data")
    variant_flags(p, "c")
    p.add_argument("--split", choices=("all", "train", "validation", "test"), default="all")

    p = sub.add_parser("train", parents=[common], help="train the prompt model")
    p.add_argument("--data", default=None)
    variant_flags(p, None)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", default=None, help="vocabulary file (default: next to the checkpoint)")
    p.add_argument("--split", choices=("all", "train", "validation", "test"), default="test")
    variant_flags(p, None)

    p = sub.add_parser("baseline", parents=[common], help="fit and evaluate a numeric baseline")
    p.add_argument("name", help=", ".join(bl.BASELINES))
    p.add_argument("--data", required=True)

    p = sub.add_parser("protocol", parents=[common], help="run an experiment protocol")
    p.add_argument("name", choices=PROTOCOLS)
    p.add_argument("--seeds", default=None, help="comma-separated seed list")
    p.add_argument("--models", default=None, help="comma-separated model list")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "prompt": cmd_prompt,
    "train": cmd_train,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "protocol": cmd_protocol,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.jobs < 1:
        print("error: --jobs: must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (MobilityError, RuntimeError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
