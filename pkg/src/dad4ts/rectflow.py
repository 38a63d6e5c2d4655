"""Rectified-flow velocity model, training loss, and ODE sampling.

Training regresses the straight-path velocity (x1 - x0) at interpolated
states; sampling integrates the learned field from Gaussian noise with one
Heun step followed by a two-step Adams-Bashforth predictor and trapezoidal
Adams-Moulton corrector, reusing the corrector's velocity evaluation as the
next step's history. Guidance combines the conditional and unconditional
endpoints once, at the end of the trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .common import DTYPE, to_tensor
from .conditioner import CONDITION_DIM, Condition, cfg_dropout, null_condition
from .errors import ConfigurationError, ContractError, DivergenceError
from .geometry import GeometricSample, PcaState, decode_sample

STATE_DIM = 4  # flattened 2x2 geometric state

DIVERGENCE_GUARD = 1e6


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 20
    guidance_weight: float = 1.0
    t_start: float = 0.0
    per_step_guidance: bool = False  # ablation: blend velocities, not endpoints

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigurationError("sampler needs at least one step")
        if not 0.0 <= self.t_start < 1.0:
            raise ConfigurationError("t_start must lie in [0, 1)")

    def grid(self) -> np.ndarray:
        return np.linspace(self.t_start, 1.0, self.steps + 1)

    def to_json(self) -> dict:
        return {
            "steps": self.steps,
            "guidance_weight": self.guidance_weight,
            "t_start": self.t_start,
            "per_step_guidance": self.per_step_guidance,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "SamplerConfig":
        return cls(**payload)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos positional features of a scalar time in [0, 1]."""
    half = dim // 2
    freqs = torch.exp(
        torch.arange(half, dtype=DTYPE) * (-math.log(10000.0) / max(half - 1, 1))
    )
    angles = t.reshape(-1, 1) * freqs.reshape(1, -1) * 1000.0
    emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros(emb.shape[0], 1, dtype=DTYPE)], dim=-1)
    return emb


@dataclass(frozen=True)
class VelocityModelConfig:
    hidden: int = 128
    depth: int = 2
    time_embed_dim: int = 256
    cond_dim: int = CONDITION_DIM
    injection: str = "film"  # "film" or "concat"

    def __post_init__(self):
        if self.injection not in ("film", "concat"):
            raise ConfigurationError(f"unknown conditioning injection {self.injection!r}")


class VelocityModel(nn.Module):
    """Residual MLP over the flattened state.

    Time enters through a sinusoidal embedding projected into the hidden
    width; the condition modulates every block either via a feature-wise
    affine (film) or by concatenation to the block input.
    """

    def __init__(self, config: VelocityModelConfig | None = None):
        super().__init__()
        self.config = config or VelocityModelConfig()
        cfg = self.config
        self.in_proj = nn.Linear(STATE_DIM, cfg.hidden, dtype=DTYPE)
        self.time_proj = nn.Sequential(
            nn.Linear(cfg.time_embed_dim, cfg.hidden, dtype=DTYPE),
            nn.SiLU(),
            nn.Linear(cfg.hidden, cfg.hidden, dtype=DTYPE),
        )
        block_in = cfg.hidden + (cfg.cond_dim if cfg.injection == "concat" else 0)
        self.blocks = nn.ModuleList(
            nn.Sequential(
                nn.Linear(block_in, cfg.hidden, dtype=DTYPE),
                nn.SiLU(),
                nn.Linear(cfg.hidden, cfg.hidden, dtype=DTYPE),
            )
            for _ in range(cfg.depth)
        )
        if cfg.injection == "film":
            self.films = nn.ModuleList(
                nn.Linear(cfg.cond_dim, 2 * cfg.hidden, dtype=DTYPE) for _ in range(cfg.depth)
            )
        self.out_proj = nn.Linear(cfg.hidden, STATE_DIM, dtype=DTYPE)

    def forward(self, state: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        squeeze = state.dim() == 1
        if squeeze:
            state = state.unsqueeze(0)
            cond = cond.unsqueeze(0) if cond.dim() == 1 else cond
        t = t.reshape(-1).to(DTYPE)
        if t.numel() == 1 and state.shape[0] > 1:
            t = t.expand(state.shape[0])
        h = self.in_proj(state)
        h = h + self.time_proj(sinusoidal_embedding(t, self.config.time_embed_dim))
        for i, block in enumerate(self.blocks):
            u = h
            if self.config.injection == "film":
                scale, shift = self.films[i](cond).chunk(2, dim=-1)
                u = u * (1.0 + scale) + shift
            else:
                u = torch.cat([u, cond], dim=-1)
            h = h + block(u)
        out = self.out_proj(h)
        return out.squeeze(0) if squeeze else out


def make_optimizer(model: nn.Module, lr: float = 3e-3, weight_decay: float = 0.1) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)


def _condition_tensor(conditions: list[Condition]) -> torch.Tensor:
    return torch.stack([c.as_tensor() for c in conditions])


def rf_loss(
    model: nn.Module,
    samples: list[GeometricSample],
    conditions: list[Condition],
    rng: np.random.Generator,
    dropout_p: float = 0.1,
) -> torch.Tensor:
    """Velocity-matching loss over one batch of geometric samples.

    Per sample: t ~ U[0,1], x0 ~ N(0, I); the model sees the interpolated
    state t*x + (1-t)*x0 and is regressed onto x - x0. The condition is
    dropped to the null condition with probability dropout_p.
    """
    if len(samples) != len(conditions):
        raise ContractError(
            f"{len(samples)} samples vs {len(conditions)} conditions: inputs must align"
        )
    if not samples:
        raise ContractError("rf_loss needs at least one sample")
    x1 = torch.stack([to_tensor(s.state_vector) for s in samples])
    t = to_tensor(rng.random(len(samples)))
    x0 = to_tensor(rng.standard_normal((len(samples), STATE_DIM)))
    dropped = [cfg_dropout(c, dropout_p, rng) for c in conditions]
    cond = _condition_tensor(dropped)
    x_t = t.unsqueeze(-1) * x1 + (1.0 - t).unsqueeze(-1) * x0
    v = model(x_t, t, cond)
    return torch.mean(((x1 - x0) - v) ** 2)


def sample_trajectory(
    model: nn.Module,
    condition: Condition,
    cfg: SamplerConfig,
    rng: np.random.Generator | None = None,
    x0: torch.Tensor | None = None,
) -> torch.Tensor:
    """Integrate the velocity field from noise at t_start to the data end.

    The first grid interval is one Heun step; every later interval advances
    with the two-step Adams-Bashforth predictor and the trapezoidal
    Adams-Moulton corrector, whose single model evaluation (at the predicted
    state) is cached as the next interval's current velocity. Exactly
    2 + (steps - 1) model evaluations in total.
    """
    if x0 is None:
        if rng is None:
            raise ContractError("sample_trajectory needs an rng when x0 is not given")
        x0 = to_tensor(rng.standard_normal(STATE_DIM))
    x0 = x0.reshape(STATE_DIM)
    cond = condition.as_tensor()
    grid = cfg.grid()

    def velocity(state: torch.Tensor, t_value: float) -> torch.Tensor:
        return model(state, torch.tensor([t_value], dtype=DTYPE), cond)

    def guard(state: torch.Tensor, step: int) -> None:
        if not torch.isfinite(state).all() or torch.any(torch.abs(state) > DIVERGENCE_GUARD):
            raise DivergenceError(f"trajectory diverged at grid step {step}", step=step)

    h = float(grid[1] - grid[0])
    v_prev = velocity(x0, float(grid[0]))
    probe = x0 + h * v_prev
    v_cur = velocity(probe, float(grid[1]))
    x = x0 + (h / 2.0) * (v_prev + v_cur)
    guard(x, 1)
    for k in range(1, cfg.steps):
        h = float(grid[k + 1] - grid[k])
        x_pred = x + h * (1.5 * v_cur - 0.5 * v_prev)
        v_next = velocity(x_pred, float(grid[k + 1]))
        x = x + (h / 2.0) * (v_cur + v_next)
        guard(x, k + 1)
        v_prev, v_cur = v_cur, v_next
    return x.reshape(2, 2)


class _GuidedField(nn.Module):
    """Velocity field blended per evaluation: (1 + w) v_c - w v_null."""

    def __init__(self, model: nn.Module, cond: torch.Tensor, null: torch.Tensor, w: float):
        super().__init__()
        self.model = model
        self.cond = cond
        self.null = null
        self.w = w

    def forward(self, state, t, _cond):
        v_c = self.model(state, t, self.cond)
        v_n = self.model(state, t, self.null)
        return (1.0 + self.w) * v_c - self.w * v_n


def cfg_sample_state(
    model: nn.Module,
    condition: Condition,
    cfg: SamplerConfig,
    rng: np.random.Generator | None = None,
    x0: torch.Tensor | None = None,
) -> torch.Tensor:
    """Run the conditional and unconditional trajectories from one shared
    noise draw and blend the endpoints: (1 + w) * X_c - w * X_null.

    With per_step_guidance the blend moves inside the integrator instead:
    one trajectory whose velocity is guided at every evaluation.
    """
    if condition.is_null:
        raise ContractError("guided generation needs a non-null condition")
    if x0 is None:
        if rng is None:
            raise ContractError("cfg_sample_state needs an rng when x0 is not given")
        x0 = to_tensor(rng.standard_normal(STATE_DIM))
    w = cfg.guidance_weight
    if cfg.per_step_guidance:
        field = _GuidedField(model, condition.as_tensor(), null_condition().as_tensor(), w)
        return sample_trajectory(field, condition, cfg, x0=x0.clone())
    x_c = sample_trajectory(model, condition, cfg, x0=x0.clone())
    x_n = sample_trajectory(model, null_condition(), cfg, x0=x0.clone())
    return (1.0 + w) * x_c - w * x_n


def cfg_generate(
    model: nn.Module,
    condition: Condition,
    state: PcaState,
    cfg: SamplerConfig,
    rng: np.random.Generator | None = None,
    policy: str = "paired",
    paired: np.ndarray | None = None,
    x0: torch.Tensor | None = None,
):
    """Guided sampling plus geometric decoding; returns a window of length D.

    Returns numpy when no gradient is requested from the caller's side
    (x0 without grad), otherwise keeps the torch graph alive.
    """
    blended = cfg_sample_state(model, condition, cfg, rng=rng, x0=x0)
    window = decode_sample(blended, state, policy=policy, paired=paired)
    if isinstance(window, torch.Tensor) and not window.requires_grad:
        return window.detach().numpy()
    return window
