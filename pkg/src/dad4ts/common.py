"""Shared numerics: default dtype, deterministic seeding, parameter archives."""

from __future__ import annotations

import json
import zlib
from typing import Iterable

import numpy as np
import torch

# All models run in float64 on CPU: the state spaces are tiny (2x2 matrices,
# width-64 encoders) and double precision keeps the finite-difference gradient
# checks and the encode/decode round trips well inside their tolerances.
DTYPE = torch.float64

ARCHIVE_VERSION = 1


def stable_hash(*parts: object) -> int:
    """Map a tuple of strings/ints to a stable 32-bit integer.

    Python's builtin hash() is salted per process, which would break
    run-to-run reproducibility of derived seeds.
    """
    payload = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return zlib.crc32(payload)


def derive_rng(seed: int, *scope: object) -> np.random.Generator:
    """Independent generator for one (seed, scope...) slot."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, stable_hash(*scope)]))


def seed_torch(seed: int, *scope: object) -> None:
    torch.manual_seed((int(seed) & 0xFFFFFFFF) * 0x10000 + stable_hash(*scope) % 0x10000)


def to_tensor(x, dtype: torch.dtype = DTYPE) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def save_params(path, modules: dict[str, torch.nn.Module], meta: dict | None = None) -> None:
    """Write named parameters of one or more modules to a flat .npz archive.

    Arrays are stored under ``<module>/<parameter>`` keys; metadata (JSON) and
    the archive format version ride along as zero-dimensional string arrays.
    """
    arrays: dict[str, np.ndarray] = {}
    for name, module in modules.items():
        for pname, tensor in module.state_dict().items():
            arrays[f"{name}/{pname}"] = tensor.detach().cpu().numpy()
    arrays["__meta__"] = np.array(json.dumps(meta or {}, sort_keys=True))
    arrays["__version__"] = np.array(ARCHIVE_VERSION)
    np.savez(path, **arrays)


def load_params(path, modules: dict[str, torch.nn.Module]) -> dict:
    """Restore modules saved with save_params; returns the metadata dict."""
    with np.load(path, allow_pickle=False) as archive:
        version = int(archive["__version__"])
        if version != ARCHIVE_VERSION:
            raise ValueError(f"unsupported archive version {version}")
        meta = json.loads(str(archive["__meta__"]))
        for name, module in modules.items():
            prefix = f"{name}/"
            state = {
                key[len(prefix):]: torch.as_tensor(archive[key])
                for key in archive.files
                if key.startswith(prefix)
            }
            module.load_state_dict(state)
    return meta


def assert_finite(array: np.ndarray | torch.Tensor, what: str) -> None:
    if isinstance(array, torch.Tensor):
        ok = bool(torch.isfinite(array).all())
    else:
        ok = bool(np.isfinite(array).all())
    if not ok:
        from .errors import ContractError

        raise ContractError(f"{what} contains non-finite values")


def batched(items: Iterable, size: int):
    """Yield lists of up to ``size`` consecutive items."""
    chunk = []
    for item in items:
        chunk.append(item)
        if len(chunk) == size:
            yield chunk
            chunk = []
    if chunk:
        yield chunk
