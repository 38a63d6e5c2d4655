"""Conditioning vectors for the generative model.

Embedding providers map a normalized input window to a 512-dimensional
vector. A small learnable gate scores the registered providers and routes
each window to exactly one of them (hard top-1); classifier-free-guidance
dropout occasionally swaps the condition for the all-zero null condition so
the generator also learns the unconditional field.
"""

from __future__ import annotations

import hashlib
import os
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .common import DTYPE
from .errors import ConfigurationError, ContractError, RegistryError

CONDITION_DIM = 512
CACHE_ENV_VAR = "DAD4TS_PROVIDER_CACHE"


@dataclass(frozen=True)
class Condition:
    vector: np.ndarray
    provider_id: str
    is_null: bool = False
    # Optional differentiable view of the same values, populated when the
    # gate's straight-through path should receive gradients.
    grad_vector: torch.Tensor | None = field(default=None, compare=False)

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=float)
        if vec.shape != (CONDITION_DIM,):
            raise ContractError(f"condition vector must have {CONDITION_DIM} entries")
        if not np.isfinite(vec).all():
            raise ContractError("condition vector must be finite")
        if self.is_null and np.any(vec != 0.0):
            raise ContractError("null condition must be all zeros")
        object.__setattr__(self, "vector", vec)

    def as_tensor(self) -> torch.Tensor:
        if self.grad_vector is not None:
            return self.grad_vector
        return torch.as_tensor(self.vector, dtype=DTYPE)


def null_condition() -> Condition:
    return Condition(vector=np.zeros(CONDITION_DIM), provider_id="null", is_null=True)


class EmbeddingProvider:
    """Interface: deterministic map from an input window to 512 floats."""

    provider_id: str

    def embed(self, window: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class RandomProjectionProvider(EmbeddingProvider):
    """Built-in offline embedder.

    Projects (window, lag-1 differences, mean, std) through a fixed seeded
    Gaussian matrix onto 512 dimensions; purely a function of the window and
    the frozen projection weights.
    """

    def __init__(self, input_len: int, provider_id: str = "builtin", seed: int = 7):
        if input_len < 2:
            raise ConfigurationError("provider needs input_len >= 2")
        self.provider_id = provider_id
        self.input_len = input_len
        feat_dim = 2 * input_len + 1
        rng = np.random.default_rng(seed)
        self._projection = rng.standard_normal((CONDITION_DIM, feat_dim)) / np.sqrt(feat_dim)

    def embed(self, window: np.ndarray) -> np.ndarray:
        w = np.asarray(window, dtype=float)
        if w.shape != (self.input_len,):
            raise ContractError(f"expected window of length {self.input_len}, got {w.shape}")
        features = np.concatenate([w, np.diff(w), [np.mean(w), np.std(w)]])
        return self._projection @ features


class ExecutableProvider(EmbeddingProvider):
    """Adapter for an out-of-process embedder.

    Wire format: the window is written to the child's stdin one float per
    line; the child prints 512 floats, one per line. Results are cached on
    disk when a cache directory is configured (argument or environment).
    """

    def __init__(self, provider_id: str, executable: str | Path, cache_dir: str | Path | None = None):
        self.provider_id = provider_id
        self.executable = Path(executable)
        if not self.executable.exists():
            raise ConfigurationError(f"provider executable not found: {self.executable}")
        env_dir = os.environ.get(CACHE_ENV_VAR)
        self.cache_dir = Path(cache_dir) if cache_dir else (Path(env_dir) if env_dir else None)

    def _cache_path(self, window: np.ndarray) -> Path | None:
        if self.cache_dir is None:
            return None
        digest = hashlib.sha256(np.ascontiguousarray(window, dtype=float).tobytes()).hexdigest()
        return self.cache_dir / f"{self.provider_id}_{digest}.npy"

    def embed(self, window: np.ndarray) -> np.ndarray:
        window = np.asarray(window, dtype=float)
        cached = self._cache_path(window)
        if cached is not None and cached.exists():
            return np.load(cached)
        payload = "\n".join(repr(float(v)) for v in window) + "\n"
        result = subprocess.run(
            [str(self.executable)], input=payload, capture_output=True, text=True, check=True
        )
        values = [float(line) for line in result.stdout.split()]
        if len(values) != CONDITION_DIM:
            raise ContractError(
                f"provider {self.provider_id!r} returned {len(values)} values, expected {CONDITION_DIM}"
            )
        vector = np.asarray(values)
        if cached is not None:
            cached.parent.mkdir(parents=True, exist_ok=True)
            np.save(cached, vector)
        return vector


class ProviderRegistry:
    def __init__(self, providers: list[EmbeddingProvider] | None = None):
        self._providers: dict[str, EmbeddingProvider] = {}
        self._order: list[str] = []
        for p in providers or []:
            self.register(p)

    def register(self, provider: EmbeddingProvider) -> None:
        if provider.provider_id in self._providers:
            raise ConfigurationError(f"provider {provider.provider_id!r} already registered")
        self._providers[provider.provider_id] = provider
        self._order.append(provider.provider_id)

    def get(self, provider_id: str) -> EmbeddingProvider:
        try:
            return self._providers[provider_id]
        except KeyError:
            raise RegistryError(f"unknown provider {provider_id!r}") from None

    def ordered(self) -> list[EmbeddingProvider]:
        return [self._providers[name] for name in self._order]

    def __len__(self) -> int:
        return len(self._order)


def embed(window: np.ndarray, provider_id: str, registry: ProviderRegistry) -> np.ndarray:
    return registry.get(provider_id).embed(window)


class MoeGate(nn.Module):
    """Two affine maps with a ReLU between, scoring each provider."""

    def __init__(self, input_len: int, n_providers: int, hidden: int = 64):
        super().__init__()
        if n_providers < 1:
            raise ConfigurationError("gate needs at least one provider output")
        self.input_len = input_len
        self.net = nn.Sequential(
            nn.Linear(input_len, hidden, dtype=DTYPE),
            nn.ReLU(),
            nn.Linear(hidden, n_providers, dtype=DTYPE),
        )

    def forward(self, window: torch.Tensor) -> torch.Tensor:
        return self.net(window)


def moe_gate(window: np.ndarray, gate: MoeGate, registry: ProviderRegistry) -> Condition:
    """Route one window to its top-scoring provider.

    The returned condition carries the selected provider's embedding; its
    differentiable view scales the (frozen) embedding by score/score.detach()
    so the hard route still passes a gradient to the gate parameters.
    Ties resolve to the lowest provider index.
    """
    providers = registry.ordered()
    if not providers:
        raise ConfigurationError("no providers registered")
    w = torch.as_tensor(np.asarray(window, dtype=float), dtype=DTYPE)
    logits = gate(w)
    scores = torch.softmax(logits, dim=-1)
    pick = int(np.argmax(logits.detach().numpy()))
    provider = providers[pick]
    vector = provider.embed(np.asarray(window, dtype=float))
    frozen = torch.as_tensor(vector, dtype=DTYPE)
    grad_vector = frozen * (scores[pick] / scores[pick].detach())
    return Condition(
        vector=vector, provider_id=provider.provider_id, is_null=False, grad_vector=grad_vector
    )


def cfg_dropout(condition: Condition, p: float, rng: np.random.Generator) -> Condition:
    """Replace the condition by the null condition with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ContractError("dropout probability must lie in [0, 1]")
    if p > 0 and rng.random() < p:
        return null_condition()
    return condition
