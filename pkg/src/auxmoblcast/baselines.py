"""Numerical-paradigm forecasters operating on raw count windows.

Every forecaster maps a 15-day history (optionally with calendar features for
the history days and the target day) to one real-valued next-day count.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .errors import DataError, EmptyInputError, NonFiniteLossError
from .mobility_data import ForecastInstance
from .training import PlateauScheduler

RIDGE = 1e-6


class DegenerateDesignError(DataError):
    pass


@dataclass(frozen=True)
class NumericWindow:
    history: np.ndarray                      # (n,)
    target: float
    temporal_features: Optional[np.ndarray] = None  # (n + 1, 8): weekday one-hot, month 1..12


def calendar_features(dates) -> np.ndarray:
    feats = np.zeros((len(dates), 8))
    for i, d in enumerate(dates):
        feats[i, d.weekday()] = 1.0
        feats[i, 7] = d.month
    return feats


def numeric_windows(instances: Sequence[ForecastInstance]) -> list[NumericWindow]:
    return [
        NumericWindow(
            history=np.asarray(inst.history_counts, dtype=float),
            target=float(inst.target_count),
            temporal_features=calendar_features(list(inst.history_dates) + [inst.target_date]),
        )
        for inst in instances
    ]


def _stack(windows: Sequence[NumericWindow]):
    if not windows:
        raise EmptyInputError("no windows")
    x = np.stack([w.history for w in windows]).astype(float)
    y = np.array([w.target for w in windows], dtype=float)
    return x, y


# ---------------------------------------------------------------------------
# Linear regression

@dataclass
class LinearForecaster:
    coef: np.ndarray
    intercept: float

    @classmethod
    def fit(cls, train: Sequence[NumericWindow], ridge: float = RIDGE) -> "LinearForecaster":
        x, y = _stack(train)
        if not (np.isfinite(x).all() and np.isfinite(y).all()):
            raise DegenerateDesignError("non-finite values in training windows")
        n = x.shape[1]
        # Ridge rows on the slope coefficients only; the intercept is unpenalised.
        design = np.vstack([np.hstack([x, np.ones((len(x), 1))]),
                            np.hstack([math.sqrt(ridge) * np.eye(n), np.zeros((n, 1))])])
        rhs = np.concatenate([y, np.zeros(n)])
        sol, *_ = np.linalg.lstsq(design, rhs, rcond=None)
        return cls(sol[:n], float(sol[n]))

    def predict(self, windows: Sequence[NumericWindow]) -> np.ndarray:
        x, _ = _stack(windows)
        return x @ self.coef + self.intercept


def lr_forecast(train: Sequence[NumericWindow], query: NumericWindow) -> float:
    return float(LinearForecaster.fit(train).predict([query])[0])


# ---------------------------------------------------------------------------
# Neural baselines

@dataclass(frozen=True)
class BaselineConfig:
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    dropout: float = 0.1
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    early_stop_patience: int = 10
    plateau_patience: int = 6
    plateau_cooldown: int = 2
    plateau_factor: float = 0.1
    grad_clip: Optional[float] = 1.0


class GRURegressor(nn.Module):
    """Stacked GRU; optional additive attention pooling over hidden states.

    The attention block adds ``hidden*hidden + 2*hidden`` parameters
    (score projection weight and bias, plus the scoring vector).
    """

    def __init__(self, cfg: BaselineConfig, use_attention: bool):
        super().__init__()
        h = cfg.hidden
        self.gru = nn.GRU(1, h, num_layers=cfg.layers, batch_first=True,
                          dropout=cfg.dropout if cfg.layers > 1 else 0.0)
        self.use_attention = use_attention
        if use_attention:
            self.att_proj = nn.Linear(h, h)
            self.att_score = nn.Parameter(torch.zeros(h))
        self.head = nn.Linear(h, 1)

    def forward(self, x, feats=None):
        states, _ = self.gru(x.unsqueeze(-1))
        if self.use_attention:
            scores = torch.tanh(self.att_proj(states)) @ self.att_score
            weights = torch.softmax(scores, dim=1)
            pooled = (weights.unsqueeze(-1) * states).sum(1)
        else:
            pooled = states[:, -1]
        return self.head(pooled).squeeze(-1)


def attention_parameter_count(hidden: int) -> int:
    return hidden * hidden + 2 * hidden


class NumericTransformer(nn.Module):
    """Encoder-only transformer over the history plus a target-day query slot.

    Slot embeddings are a value projection (a learned query vector for the
    target slot) plus learned positions; with ``use_temporal_embedding`` the
    weekday and month embeddings of each slot's date are added as well.
    Output is a linear head on the mean-pooled slots.
    """

    def __init__(self, cfg: BaselineConfig, n: int, use_temporal_embedding: bool):
        super().__init__()
        d = cfg.hidden
        self.value_proj = nn.Linear(1, d)
        self.query = nn.Parameter(torch.zeros(d))
        self.positions = nn.Parameter(torch.randn(n + 1, d) * 0.02)
        self.use_temporal = use_temporal_embedding
        if use_temporal_embedding:
            # Zero init: a calendar value never seen in training (e.g. a test
            # month under a chronological split) then adds nothing.
            self.weekday = nn.Embedding(7, d)
            self.month = nn.Embedding(12, d)
            nn.init.zeros_(self.weekday.weight)
            nn.init.zeros_(self.month.weight)
        layer = nn.TransformerEncoderLayer(d, cfg.heads, 2 * d, cfg.dropout,
                                           batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(layer, cfg.layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, 1)

    def forward(self, x, feats=None):
        slots = torch.cat([self.value_proj(x.unsqueeze(-1)),
                           self.query.expand(x.shape[0], 1, -1)], dim=1)
        slots = slots + self.positions
        if self.use_temporal:
            weekday = feats[..., :7].argmax(-1)
            month = feats[..., 7].long() - 1
            slots = slots + self.weekday(weekday) + self.month(month)
        return self.head(self.norm(self.encoder(slots)).mean(1)).squeeze(-1)


class NeuralForecaster:
    """Fit/predict wrapper shared by the GRU and transformer baselines."""

    def __init__(self, net: nn.Module, mean: float, scale: float):
        self.net = net
        self.mean = mean
        self.scale = scale

    def _tensors(self, windows):
        x, y = _stack(windows)
        feats = None
        if windows[0].temporal_features is not None:
            feats = torch.tensor(np.stack([w.temporal_features for w in windows]), dtype=torch.float32)
        xt = torch.tensor((x - self.mean) / self.scale, dtype=torch.float32)
        return xt, feats, torch.tensor(y, dtype=torch.float32)

    @torch.no_grad()
    def predict(self, windows: Sequence[NumericWindow]) -> np.ndarray:
        self.net.eval()
        x, f, _ = self._tensors(windows)
        out = self.net(x, f).double().numpy()
        return out * self.scale + self.mean


def _fit(make_net, train, val, cfg: BaselineConfig, seed: int) -> NeuralForecaster:
    if not train:
        raise EmptyInputError("baseline training set is empty")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    x_all, _ = _stack(train)
    mean = float(x_all.mean())
    scale = float(x_all.std()) or 1.0
    model = NeuralForecaster(make_net(), mean, scale)
    if not val:
        cut = max(1, len(train) // 10)
        train, val = train[:-cut], train[-cut:]
    x, f, y = model._tensors(train)
    y_norm = (y - mean) / scale
    opt = torch.optim.AdamW(model.net.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    sched = PlateauScheduler(cfg.learning_rate, cfg.plateau_patience, cfg.plateau_cooldown, cfg.plateau_factor)
    val_y = np.array([w.target for w in val])
    best, best_state, stale = math.inf, None, 0
    for epoch in range(cfg.epochs):
        for group in opt.param_groups:
            group["lr"] = sched.lr
        model.net.train()
        order = torch.from_numpy(rng.permutation(len(y)))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            pred = model.net(x[idx], None if f is None else f[idx])
            loss = torch.mean((pred - y_norm[idx]) ** 2)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(f"baseline loss diverged at epoch {epoch + 1}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip is not None:
                nn.utils.clip_grad_norm_(model.net.parameters(), cfg.grad_clip)
            opt.step()
        val_rmse = float(np.sqrt(np.mean((model.predict(val) - val_y) ** 2)))
        sched.step(val_rmse)
        if val_rmse < best:
            best, stale = val_rmse, 0
            best_state = copy.deepcopy(model.net.state_dict())
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    model.net.load_state_dict(best_state)
    model.net.eval()
    return model


def fit_recurrent(train, val=(), use_attention: bool = False, seed: int = 0,
                  cfg: BaselineConfig = BaselineConfig()) -> NeuralForecaster:
    return _fit(lambda: GRURegressor(cfg, use_attention), list(train), list(val), cfg, seed)


def fit_numeric_transformer(train, val=(), use_temporal_embedding: bool = False, seed: int = 0,
                            cfg: BaselineConfig = BaselineConfig()) -> NeuralForecaster:
    n = len(train[0].history)
    return _fit(lambda: NumericTransformer(cfg, n, use_temporal_embedding),
                list(train), list(val), cfg, seed)


def recurrent_forecast(train, query: NumericWindow, use_attention: bool = False, seed: int = 0,
                       cfg: BaselineConfig = BaselineConfig()) -> float:
    return float(fit_recurrent(train, (), use_attention, seed, cfg).predict([query])[0])


def numeric_transformer_forecast(train, query: NumericWindow, use_temporal_embedding: bool = False,
                                 seed: int = 0, cfg: BaselineConfig = BaselineConfig()) -> float:
    model = fit_numeric_transformer(train, (), use_temporal_embedding, seed, cfg)
    return float(model.predict([query])[0])


BASELINES = {
    "lr": lambda train, val, seed, cfg: LinearForecaster.fit(train),
    "gru": lambda train, val, seed, cfg: fit_recurrent(train, val, False, seed, cfg),
    "gru_att": lambda train, val, seed, cfg: fit_recurrent(train, val, True, seed, cfg),
    "transformer": lambda train, val, seed, cfg: fit_numeric_transformer(train, val, False, seed, cfg),
    "transformer_temporal": lambda train, val, seed, cfg: fit_numeric_transformer(train, val, True, seed, cfg),
}
