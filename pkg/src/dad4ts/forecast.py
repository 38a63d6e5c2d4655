"""Forecaster interface, four reference models, and the training protocol.

Models map a batch of input windows (B x L_in) to forecasts (B x L_out).
All reference models share the protocol: AdamW, early stopping on the full
validation split, parameters restored from the best epoch.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .common import DTYPE, to_tensor
from .errors import ConfigurationError, ContractError, RegistryError
from .metrics import dtw, rmse


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 0.1
    max_epochs: int = 100
    patience: int = 10
    batch_size: int = 4
    seed: int = 2025

    def __post_init__(self):
        if min(self.lr, self.weight_decay + 1, self.max_epochs, self.patience, self.batch_size) <= 0:
            raise ConfigurationError("training configuration values must be positive")


class Forecaster(nn.Module):
    """Base class: subclasses implement forward(B x L_in) -> B x L_out."""

    def __init__(self, input_len: int, forecast_len: int, **kwargs):
        super().__init__()
        self.input_len = input_len
        self.forecast_len = forecast_len
        self._config = {"input_len": input_len, "forecast_len": forecast_len, **kwargs}

    def predict(self, inputs) -> np.ndarray:
        x = to_tensor(np.atleast_2d(np.asarray(inputs, dtype=float)))
        was_training = self.training
        self.eval()
        with torch.no_grad():
            out = self(x)
        if was_training:
            self.train()
        return out.numpy()

    def train_batch(self, inputs, targets, opt: torch.optim.Optimizer) -> float:
        x = to_tensor(np.atleast_2d(np.asarray(inputs, dtype=float)))
        y = to_tensor(np.atleast_2d(np.asarray(targets, dtype=float)))
        pred = self(x)
        loss = torch.mean((pred - y) ** 2)
        opt.zero_grad()
        loss.backward()
        opt.step()
        return float(loss.detach())

    def reinitialize(self, seed: int) -> None:
        """Rebuild all parameters deterministically from the seed."""
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            fresh = type(self)(**self._config)
        self.load_state_dict(fresh.state_dict())

    def make_optimizer(self, cfg: TrainConfig) -> torch.optim.Optimizer:
        return torch.optim.AdamW(self.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


class LinearForecaster(Forecaster):
    def __init__(self, input_len: int, forecast_len: int):
        super().__init__(input_len, forecast_len)
        self.linear = nn.Linear(input_len, forecast_len, dtype=DTYPE)

    def forward(self, x):
        return self.linear(x)


class RecurrentForecaster(Forecaster):
    def __init__(self, input_len: int, forecast_len: int, hidden: int = 64, layers: int = 2):
        super().__init__(input_len, forecast_len, hidden=hidden, layers=layers)
        self.rnn = nn.RNN(1, hidden, num_layers=layers, batch_first=True, dtype=DTYPE)
        self.head = nn.Linear(hidden, forecast_len, dtype=DTYPE)

    def forward(self, x):
        out, _ = self.rnn(x.unsqueeze(-1))
        return self.head(out[:, -1])


class GatedRecurrentForecaster(Forecaster):
    def __init__(self, input_len: int, forecast_len: int, hidden: int = 64, layers: int = 2):
        super().__init__(input_len, forecast_len, hidden=hidden, layers=layers)
        self.rnn = nn.GRU(1, hidden, num_layers=layers, batch_first=True, dtype=DTYPE)
        self.head = nn.Linear(hidden, forecast_len, dtype=DTYPE)

    def forward(self, x):
        out, _ = self.rnn(x.unsqueeze(-1))
        return self.head(out[:, -1])


class AttentionForecaster(Forecaster):
    """Encoder over input tokens, learned queries cross-attend for outputs."""

    def __init__(
        self,
        input_len: int,
        forecast_len: int,
        d_model: int = 64,
        n_heads: int = 4,
        n_layers: int = 2,
    ):
        super().__init__(input_len, forecast_len, d_model=d_model, n_heads=n_heads, n_layers=n_layers)
        self.embed = nn.Linear(1, d_model, dtype=DTYPE)
        self.pos = nn.Parameter(0.02 * torch.randn(input_len, d_model, dtype=DTYPE))
        enc_layer = nn.TransformerEncoderLayer(
            d_model, n_heads, dim_feedforward=2 * d_model, dropout=0.0,
            batch_first=True, dtype=DTYPE,
        )
        self.encoder = nn.TransformerEncoder(enc_layer, num_layers=n_layers)
        self.queries = nn.Parameter(0.02 * torch.randn(forecast_len, d_model, dtype=DTYPE))
        self.cross = nn.MultiheadAttention(d_model, n_heads, batch_first=True, dtype=DTYPE)
        self.head = nn.Linear(d_model, 1, dtype=DTYPE)

    def forward(self, x):
        tokens = self.embed(x.unsqueeze(-1)) + self.pos.unsqueeze(0)
        memory = self.encoder(tokens)
        queries = self.queries.unsqueeze(0).expand(x.shape[0], -1, -1)
        attended, _ = self.cross(queries, memory, memory)
        return self.head(attended).squeeze(-1)


FORECASTERS = {
    "linear": LinearForecaster,
    "rnn": RecurrentForecaster,
    "gru": GatedRecurrentForecaster,
    "attention": AttentionForecaster,
}


def make_forecaster(name: str, input_len: int, forecast_len: int, seed: int = 2025, **kwargs) -> Forecaster:
    try:
        cls = FORECASTERS[name]
    except KeyError:
        raise RegistryError(f"unknown forecaster {name!r}; known: {sorted(FORECASTERS)}") from None
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = cls(input_len=input_len, forecast_len=forecast_len, **kwargs)
    return model


def mse_over_windows(model: Forecaster, windows: np.ndarray, input_len: int) -> float:
    pred = model.predict(windows[:, :input_len])
    return float(np.mean((pred - windows[:, input_len:]) ** 2))


def train_with_early_stopping(
    model: Forecaster,
    train_windows: np.ndarray,
    val_windows: np.ndarray,
    cfg: TrainConfig,
) -> dict:
    """Epoch loop with validation-MSE early stopping.

    Shuffles training windows each epoch, evaluates the full validation split
    after every epoch, stops after ``patience`` epochs without improvement,
    and restores the best parameters. Returns the training history.
    """
    if len(train_windows) == 0 or len(val_windows) == 0:
        raise ContractError("training and validation splits must be nonempty")
    opt = model.make_optimizer(cfg)
    rng = np.random.default_rng(cfg.seed)
    input_len = model.input_len
    best_val = float("inf")
    best_state = copy.deepcopy(model.state_dict())
    best_epoch = 0
    epochs_since_best = 0
    history = {"train_loss": [], "val_loss": []}
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_windows))
        epoch_losses = []
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            batch = train_windows[idx]
            epoch_losses.append(model.train_batch(batch[:, :input_len], batch[:, input_len:], opt))
        val_loss = mse_over_windows(model, val_windows, input_len)
        history["train_loss"].append(float(np.mean(epoch_losses)))
        history["val_loss"].append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_state = copy.deepcopy(model.state_dict())
            best_epoch = epoch
            epochs_since_best = 0
        else:
            epochs_since_best += 1
        if epochs_since_best >= cfg.patience:
            break
    model.load_state_dict(best_state)
    history["best_epoch"] = best_epoch
    history["best_val_loss"] = best_val
    history["stopped_after"] = epoch
    return history


def evaluate_split(model: Forecaster, windows: np.ndarray, horizon: int) -> dict:
    """Per-window RMSE and DTW on the normalized scale, plus their means."""
    windows = np.asarray(windows, dtype=float)
    if windows.shape[1] != model.input_len + horizon:
        raise ContractError(
            f"windows of width {windows.shape[1]} do not match input_len "
            f"{model.input_len} + horizon {horizon}"
        )
    preds = model.predict(windows[:, : model.input_len])
    targets = windows[:, model.input_len :]
    per_rmse = [rmse(t, p) for t, p in zip(targets, preds)]
    per_dtw = [dtw(t, p) for t, p in zip(targets, preds)]
    return {
        "rmse": per_rmse,
        "dtw": per_dtw,
        "rmse_mean": float(np.mean(per_rmse)),
        "dtw_mean": float(np.mean(per_dtw)),
    }
