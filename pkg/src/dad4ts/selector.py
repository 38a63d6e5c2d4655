"""Sample valuation: transformer scorer, Bernoulli selection, reward, update.

Each generated window is scored independently: the concatenated input and
forecast segments pass through a small transformer encoder and are pooled;
summary statistics (mean, variance, the forecaster's loss on the sample)
enter through a separate projection; the classifier head turns the fused
features into a selection probability via a temperature-scaled sigmoid.

The scorer learns with REINFORCE: the reward is the drop of the latter-half
validation loss against the warm-up baseline, normalized by the selection
ratio and centered with an exponential moving average.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .common import DTYPE, to_tensor
from .errors import ContractError

EPS = 1e-8
EMA_DECAY = 0.9


@dataclass
class RewardState:
    base_loss: float
    ema: float = 0.0

    def center(self, reward_mean: float) -> float:
        """Subtract the moving baseline, then fold the new value into it."""
        centered = reward_mean - self.ema
        self.ema = EMA_DECAY * self.ema + (1.0 - EMA_DECAY) * reward_mean
        return centered


@dataclass(frozen=True)
class SelectionDecision:
    probs: torch.Tensor  # (B,), attached to the scorer graph
    mask: torch.Tensor  # (B,) of {0., 1.}
    log_prob: torch.Tensor  # (B,)

    @property
    def mask_mean(self) -> float:
        return float(self.mask.mean())

    def selected_indices(self) -> np.ndarray:
        return np.flatnonzero(self.mask.detach().numpy() > 0.5)


class SelectorParams(nn.Module):
    """Transformer encoder over window values plus a statistics projector."""

    def __init__(
        self,
        d_model: int = 64,
        n_heads: int = 4,
        n_layers: int = 2,
        ffn_dim: int = 128,
        dropout: float = 0.1,
        temperature: float = 0.7,
        max_len: int = 512,
    ):
        super().__init__()
        self.temperature = temperature
        self.value_embed = nn.Linear(1, d_model, dtype=DTYPE)
        self.register_buffer("pos_encoding", _positional_encoding(max_len, d_model))
        layer = nn.TransformerEncoderLayer(
            d_model=d_model,
            nhead=n_heads,
            dim_feedforward=ffn_dim,
            dropout=dropout,
            activation="gelu",
            batch_first=True,
            dtype=DTYPE,
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=n_layers)
        self.stats_proj = nn.Linear(3, d_model, dtype=DTYPE)
        self.head = nn.Sequential(
            nn.Linear(2 * d_model, 64, dtype=DTYPE),
            nn.ReLU(),
            nn.Linear(64, 1, dtype=DTYPE),
        )

    def forward(self, sequences: torch.Tensor, stats: torch.Tensor) -> torch.Tensor:
        tokens = self.value_embed(sequences.unsqueeze(-1))
        tokens = tokens + self.pos_encoding[: tokens.shape[1]].unsqueeze(0)
        encoded = self.encoder(tokens)
        pooled = encoded.mean(dim=1)  # adaptive average over time
        fused = torch.cat([pooled, self.stats_proj(stats)], dim=-1)
        logit = self.head(fused).squeeze(-1)
        return torch.sigmoid(logit / self.temperature)


def _positional_encoding(max_len: int, d_model: int) -> torch.Tensor:
    position = torch.arange(max_len, dtype=DTYPE).unsqueeze(1)
    div = torch.exp(torch.arange(0, d_model, 2, dtype=DTYPE) * (-math.log(10000.0) / d_model))
    pe = torch.zeros(max_len, d_model, dtype=DTYPE)
    pe[:, 0::2] = torch.sin(position * div)
    pe[:, 1::2] = torch.cos(position * div)
    return pe


def score_samples(params: SelectorParams, x_gen, y_gen, losses) -> torch.Tensor:
    """Selection probabilities for one batch of generated samples."""
    x = to_tensor(np.atleast_2d(np.asarray(x_gen, dtype=float)))
    y = to_tensor(np.atleast_2d(np.asarray(y_gen, dtype=float)))
    loss_t = to_tensor(np.asarray(losses, dtype=float)).reshape(-1)
    if x.shape[0] != y.shape[0] or x.shape[0] != loss_t.shape[0]:
        raise ContractError("inputs must be batch-aligned")
    if not (torch.isfinite(x).all() and torch.isfinite(y).all() and torch.isfinite(loss_t).all()):
        raise ContractError("scorer inputs must be finite")
    seq = torch.cat([x, y], dim=1)
    stats = torch.stack([seq.mean(dim=1), seq.var(dim=1, unbiased=False), loss_t], dim=1)
    return params(seq, stats)


def draw_mask(probs: torch.Tensor, rng: np.random.Generator) -> SelectionDecision:
    """Independent Bernoulli draws with the exact log-probability identity."""
    p = probs.reshape(-1)
    draws = to_tensor(rng.random(p.shape[0]))
    mask = (draws < p.detach()).to(DTYPE)
    log_prob = mask * torch.log(p + EPS) + (1.0 - mask) * torch.log(1.0 - p + EPS)
    return SelectionDecision(probs=p, mask=mask, log_prob=log_prob)


def compute_reward(state: RewardState, val_losses, mask_mean: float) -> float:
    """Centered scalar reward from one sweep of the latter-half validation split.

    Per-batch rewards base_loss - loss are normalized by the sweep length and
    the selection ratio, averaged, and centered against the moving baseline
    (which is updated with the uncentered mean).
    """
    losses = np.asarray(val_losses, dtype=float)
    if losses.size == 0:
        raise ContractError("reward needs at least one validation loss")
    raw = state.base_loss - losses
    normalized = raw / (losses.size * (mask_mean + EPS))
    return state.center(float(np.mean(normalized)))


def per_sample_quality(reward: float, gen_losses) -> torch.Tensor:
    """Standardized product of the scalar reward and the negated losses.

    Zero mean and unit standard deviation over the batch with a floored
    denominator, so a size-one or constant batch yields all-zero quality
    (and therefore no update).
    """
    q = reward * -to_tensor(np.asarray(gen_losses, dtype=float)).reshape(-1)
    centered = q - q.mean()
    return centered / torch.clamp(q.std(unbiased=False), min=EPS)


def selector_loss(decision: SelectionDecision, quality: torch.Tensor) -> torch.Tensor:
    return torch.mean(-quality * decision.log_prob)


def selector_update(
    params: SelectorParams,
    decision: SelectionDecision,
    reward: float,
    gen_losses,
    opt: torch.optim.Optimizer,
) -> float:
    """One REINFORCE step; returns the scalar loss value.

    A degenerate batch (all-zero quality) is a no-op: stepping the optimizer
    anyway would still move parameters through stale momentum.
    """
    quality = per_sample_quality(reward, gen_losses).detach()
    if torch.all(quality == 0):
        return 0.0
    loss = selector_loss(decision, quality)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss.detach())


def make_selector_optimizer(params: SelectorParams, lr: float = 1e-3) -> torch.optim.Optimizer:
    return torch.optim.Adam(params.parameters(), lr=lr)
