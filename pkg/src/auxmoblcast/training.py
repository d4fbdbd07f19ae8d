"""Fine-tuning loop for the prompt model.

The objective is ``lambda_ce * CE(generation) + lambda_poi * CE(category)``.
Optimisation uses AdamW with a plateau learning-rate schedule, early stopping
on validation total loss, and returns the best-validation parameters.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, EmptyCorpusError, LengthMismatchError, NonFiniteLossError
from .evaluation import predict, rmse
from .model import MobilityModel, pad_batch, save_checkpoint
from .prompting import PromptPair, PromptVariant
from .tokenizer import BOS_ID, PAD_ID, Vocabulary, encode

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "total", "ce", "poi", "val_total", "val_rmse", "lr")


@dataclass(frozen=True)
class TrainingConfig:
    lambda_ce: float = 0.8
    lambda_poi: float = 0.2
    learning_rate: float = 5e-5
    weight_decay: float = 5e-4
    epochs: int = 50
    early_stop_patience: int = 10
    plateau_patience: int = 6
    plateau_cooldown: int = 2
    plateau_factor: float = 0.1
    batch_size: int = 32
    seed: int = 0
    grad_clip: Optional[float] = 1.0
    eval_batch_size: int = 256

    def __post_init__(self):
        for name in ("lambda_ce", "lambda_poi"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(name, "must lie in [0, 1]")
        if abs(self.lambda_ce + self.lambda_poi - 1.0) > 1e-9:
            raise ConfigError("lambda_poi", "lambda_ce + lambda_poi must equal 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate", "must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be non-negative")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigError("plateau_factor", "must lie in (0, 1)")
        for name in ("epochs", "batch_size", "early_stop_patience", "eval_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        for name in ("plateau_patience", "plateau_cooldown"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")


# ---------------------------------------------------------------------------
# Losses

def sequence_ce_loss(logits: torch.Tensor, target_ids: torch.Tensor) -> torch.Tensor:
    """Mean token negative log-likelihood over non-PAD target positions."""
    if logits.shape[:-1] != target_ids.shape:
        raise LengthMismatchError(f"logits {tuple(logits.shape)} vs targets {tuple(target_ids.shape)}")
    return F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), target_ids.reshape(-1), ignore_index=PAD_ID
    )


def poi_ce_loss(probabilities, true_category: int) -> float:
    probs = np.asarray(probabilities, dtype=float)
    if not 0 <= true_category < probs.shape[-1]:
        raise IndexError(f"category {true_category} outside 0..{probs.shape[-1] - 1}")
    return float(-np.log(probs[true_category]))


def combined_loss(ce, poi, cfg: TrainingConfig):
    return cfg.lambda_ce * ce + cfg.lambda_poi * poi


# ---------------------------------------------------------------------------
# Scheduler

class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without
    improvement, then ignore ``cooldown`` epochs before counting again.

    A cut happens as soon as the bad-epoch counter *reaches* ``patience``.
    """

    def __init__(self, lr: float, patience: int = 6, cooldown: int = 2,
                 factor: float = 0.1, threshold: float = 1e-4, min_lr: float = 0.0):
        self.lr = lr
        self.patience = patience
        self.cooldown = cooldown
        self.factor = factor
        self.threshold = threshold
        self.min_lr = min_lr
        self.best = math.inf
        self.num_bad = 0
        self.cooldown_left = 0

    def step(self, metric: float) -> float:
        if metric < self.best * (1.0 - self.threshold):
            self.best = metric
            self.num_bad = 0
        else:
            self.num_bad += 1
        if self.cooldown_left > 0:
            self.cooldown_left -= 1
            self.num_bad = 0
        if self.num_bad >= max(self.patience, 1):
            self.lr = max(self.lr * self.factor, self.min_lr)
            self.cooldown_left = self.cooldown
            self.num_bad = 0
        return self.lr


# ---------------------------------------------------------------------------
# Corpus encoding

@dataclass
class EncodedCorpus:
    inputs: list[tuple[int, ...]]
    targets: list[tuple[int, ...]]          # target tokens followed by EOS
    categories: Optional[list[int]]

    def __len__(self):
        return len(self.inputs)

    def batch(self, idx: Sequence[int]):
        x = pad_batch([self.inputs[i] for i in idx])
        tgt = [self.targets[i] for i in idx]
        y_out = pad_batch(tgt)
        y_in = pad_batch([(BOS_ID,) + t[:-1] for t in tgt])
        cat = torch.tensor([self.categories[i] for i in idx]) if self.categories is not None else None
        return x, y_in, y_out, cat


def encode_corpus(
    vocab: Vocabulary, pairs: Sequence[PromptPair], categories: Optional[Sequence[str]] = None
) -> EncodedCorpus:
    index = {c: i for i, c in enumerate(categories)} if categories else None
    cats = None
    if index is not None and all(p.category_target is not None for p in pairs):
        cats = [index[p.category_target] for p in pairs]
    return EncodedCorpus(
        inputs=[encode(vocab, p.input_text, add_cls=True).ids for p in pairs],
        targets=[encode(vocab, p.target_text, add_eos=True).ids for p in pairs],
        categories=cats,
    )


def batch_losses(model: MobilityModel, batch, cfg: TrainingConfig):
    x, y_in, y_out, cat = batch
    enc = model.encode(x)
    ce = sequence_ce_loss(model.decode_logits(y_in, enc), y_out)
    if cat is not None:
        poi = F.cross_entropy(model.category_logits(enc.cls_embedding), cat)
    else:
        poi = torch.zeros((), dtype=ce.dtype)
    return combined_loss(ce, poi, cfg), ce, poi, enc


# ---------------------------------------------------------------------------
# Training loop

@dataclass
class EpochRecord:
    epoch: int
    total: float
    ce: float
    poi: float
    val_total: float
    val_rmse: float
    lr: float
    val_category_accuracy: float = float("nan")


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    batch_totals: list[tuple[float, float, float]] = field(default_factory=list)

    @property
    def best(self) -> EpochRecord:
        return self.epochs[self.best_epoch - 1]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRIC_COLUMNS)
            for r in self.epochs:
                w.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in METRIC_COLUMNS[1:]])


@torch.no_grad()
def _validate(model, vocab, data: EncodedCorpus, pairs, variant, cfg):
    model.eval()
    totals, n_tok, correct = 0.0, 0, 0
    for start in range(0, len(data), cfg.eval_batch_size):
        idx = range(start, min(start + cfg.eval_batch_size, len(data)))
        batch = data.batch(idx)
        total, _, _, enc = batch_losses(model, batch, cfg)
        totals += float(total) * len(idx)
        n_tok += len(idx)
        if batch[3] is not None:
            pred = model.category_logits(enc.cls_embedding).argmax(-1)
            correct += int((pred == batch[3]).sum())
    preds = predict(model, vocab, pairs, variant, batch_size=cfg.eval_batch_size)
    acc = correct / len(data) if data.categories is not None else float("nan")
    return totals / n_tok, rmse(preds.values, preds.truth), acc


def train(
    model: MobilityModel,
    vocab: Vocabulary,
    train_pairs: Sequence[PromptPair],
    val_pairs: Sequence[PromptPair],
    cfg: TrainingConfig,
    variant: PromptVariant,
    categories: Optional[Sequence[str]] = None,
) -> tuple[MobilityModel, TrainReport]:
    """Fit ``model`` in place and return it loaded with its best-validation weights."""
    if not train_pairs:
        raise EmptyCorpusError("training corpus is empty")
    if not val_pairs:
        raise EmptyCorpusError("validation corpus is empty")
    train_data = encode_corpus(vocab, train_pairs, categories)
    val_data = encode_corpus(vocab, val_pairs, categories)
    if cfg.lambda_poi > 0 and train_data.categories is None:
        raise ConfigError("lambda_poi", "category targets are required when lambda_poi > 0")

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    sched = PlateauScheduler(cfg.learning_rate, cfg.plateau_patience, cfg.plateau_cooldown,
                             cfg.plateau_factor)
    report = TrainReport()
    best_val, best_state, stale = math.inf, None, 0

    for epoch in range(1, cfg.epochs + 1):
        lr = sched.lr
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        order = rng.permutation(len(train_data))
        sums = np.zeros(3)
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            total, ce, poi, _ = batch_losses(model, train_data.batch(idx), cfg)
            if not torch.isfinite(total):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch}, batch {b}: ce={ce.item()}, poi={poi.item()}, lr={lr}"
                )
            opt.zero_grad(set_to_none=True)
            total.backward()
            if cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            vals = (total.item(), ce.item(), poi.item())
            report.batch_totals.append(vals)
            sums += np.array(vals) * len(idx)
        means = sums / len(order)

        val_total, val_rmse, val_acc = _validate(model, vocab, val_data, val_pairs, variant, cfg)
        report.epochs.append(EpochRecord(epoch, *map(float, means), val_total, val_rmse, lr, val_acc))
        log.info("epoch %d total=%.4f val=%.4f val_rmse=%.3f acc=%.3f lr=%.2e",
                 epoch, means[0], val_total, val_rmse, val_acc, lr)

        if val_total < best_val:
            best_val, stale = val_total, 0
            report.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
        sched.step(val_total)
        if stale >= cfg.early_stop_patience:
            report.stopped_early = epoch < cfg.epochs
            break

    model.load_state_dict(best_state)
    model.eval()
    return model, report


def save_run(out_dir: str | Path, model, vocab, report: TrainReport, meta: dict) -> None:
    """Write the run directory: config snapshot, metrics CSV, vocabulary, best checkpoint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")
    report.write_csv(out / "metrics.csv")
    vocab.save(out / "vocab.txt")
    save_checkpoint(model, out / "best.ckpt", extra={"metadata": meta})


def training_config_dict(cfg: TrainingConfig) -> dict:
    return asdict(cfg)
