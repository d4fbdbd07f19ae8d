"""Forecast metrics, model evaluation and report aggregation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import EmptyInputError, IncompatibleVocabularyError, LengthMismatchError, ParseFailure
from .prompting import PromptPair, PromptVariant, extract_history, parse_mobility_target
from .tokenizer import Vocabulary, decode, encode, oov_count

REPORT_COLUMNS = ("model", "variant", "train_city", "test_city", "seed",
                  "rmse", "mae", "parse_fail", "oov_rate")


def _check(pred, truth):
    p = np.asarray(pred, dtype=float)
    t = np.asarray(truth, dtype=float)
    if p.shape != t.shape:
        raise LengthMismatchError(f"{p.shape} predictions vs {t.shape} targets")
    if p.size == 0:
        raise EmptyInputError("metrics need at least one prediction")
    return p, t


def rmse(pred: Sequence[float], truth: Sequence[float]) -> float:
    p, t = _check(pred, truth)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def mae(pred: Sequence[float], truth: Sequence[float]) -> float:
    p, t = _check(pred, truth)
    return float(np.mean(np.abs(p - t)))


def history_mean_forecast(history: Sequence[int]) -> int:
    """Mean of the history, rounded half up to an integer count."""
    return int(math.floor(sum(history) / len(history) + 0.5))


def default_decode_steps(variant: PromptVariant) -> int:
    return 4 if variant.kind == "C" else 16


@dataclass
class Predictions:
    values: list[int]
    truth: list[int]
    parse_failures: int
    oov_rate: float
    texts: list[str] = field(default_factory=list)

    @property
    def parse_failure_rate(self) -> float:
        return self.parse_failures / len(self.values) if self.values else 0.0


@torch.no_grad()
def predict(
    model,
    vocab: Vocabulary,
    pairs: Sequence[PromptPair],
    variant: PromptVariant,
    batch_size: int = 256,
    max_steps: Optional[int] = None,
) -> Predictions:
    """Greedy-decode every pair and parse the visit count.

    Generations that do not parse fall back to the rounded history mean and
    are counted in ``parse_failures``.
    """
    if model.config.vocab_size != vocab.size:
        raise IncompatibleVocabularyError(
            f"model expects {model.config.vocab_size} tokens, vocabulary has {vocab.size}"
        )
    from .model import pad_batch

    was_training = model.training
    model.eval()
    steps = max_steps or default_decode_steps(variant)
    values, texts = [], []
    failures = unknown = total = 0
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        ids = []
        for pair in chunk:
            ids.append(encode(vocab, pair.input_text, add_cls=True).ids)
            u, n = oov_count(vocab, pair.input_text)
            unknown += u
            total += n
        enc = model.encode(pad_batch(ids))
        for pair, seq in zip(chunk, model.greedy_decode(enc, steps)):
            text = decode(vocab, seq)
            texts.append(text)
            try:
                values.append(parse_mobility_target(text, variant))
            except ParseFailure:
                failures += 1
                values.append(history_mean_forecast(extract_history(pair.input_text)))
    model.train(was_training)
    return Predictions(
        values=values,
        truth=[p.mobility_target for p in pairs],
        parse_failures=failures,
        oov_rate=unknown / total if total else 0.0,
        texts=texts,
    )


@dataclass(frozen=True)
class RunMetrics:
    seed: int
    rmse: float
    mae: float
    parse_fail: float = 0.0
    oov_rate: float = 0.0


def evaluate_model(
    model,
    vocab: Vocabulary,
    test: Sequence[PromptPair],
    variant: PromptVariant,
    fallback: str = "history_mean",
    seed: int = 0,
) -> RunMetrics:
    if fallback != "history_mean":
        raise ValueError(f"unsupported fallback policy {fallback!r}")
    preds = predict(model, vocab, test, variant)
    return RunMetrics(
        seed=seed,
        rmse=rmse(preds.values, preds.truth),
        mae=mae(preds.values, preds.truth),
        parse_fail=preds.parse_failure_rate,
        oov_rate=preds.oov_rate,
    )


@dataclass
class EvalReport:
    model_name: str
    variant: str  # prompt variant label or "numeric"
    city_train: str
    city_test: str
    runs: list[RunMetrics] = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    @property
    def num_seeds(self) -> int:
        return len(self.runs)

    def _values(self, attr: str) -> np.ndarray:
        return np.array([getattr(r, attr) for r in sorted(self.runs, key=lambda r: r.seed)])

    def mean(self, attr: str) -> float:
        return float(np.mean(self._values(attr)))

    def std(self, attr: str) -> float:
        """Population standard deviation over seeds (0 for a single seed)."""
        return float(np.std(self._values(attr)))

    def rows(self) -> list[tuple]:
        return [
            (self.model_name, self.variant, self.city_train, self.city_test, r.seed,
             _fmt(r.rmse), _fmt(r.mae), _fmt(r.parse_fail), _fmt(r.oov_rate))
            for r in sorted(self.runs, key=lambda r: r.seed)
        ]


def _fmt(x: float) -> str:
    return repr(float(x))


def write_reports(reports: Sequence[EvalReport], out_dir: str | Path, stem: str = "report") -> dict:
    """Write per-seed, aggregate and long-format CSVs; return their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "per_seed": out / f"{stem}.csv",
        "aggregate": out / f"{stem}_aggregate.csv",
        "long": out / f"{stem}_long.csv",
    }
    with open(paths["per_seed"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for rep in reports:
            w.writerows(rep.rows())
    metrics = ("rmse", "mae", "parse_fail", "oov_rate")
    with open(paths["aggregate"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "variant", "train_city", "test_city", "num_seeds"]
                   + [f"{m}_{s}" for m in metrics for s in ("mean", "std")])
        for rep in reports:
            w.writerow([rep.model_name, rep.variant, rep.city_train, rep.city_test, rep.num_seeds]
                       + [_fmt(f(m)) for m in metrics for f in (rep.mean, rep.std)])
    with open(paths["long"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "variant", "train_city", "test_city", "seed", "metric", "value"])
        for rep in reports:
            for r in sorted(rep.runs, key=lambda r: r.seed):
                for m in metrics:
                    w.writerow([rep.model_name, rep.variant, rep.city_train, rep.city_test,
                                r.seed, m, _fmt(getattr(r, m))])
    return paths
