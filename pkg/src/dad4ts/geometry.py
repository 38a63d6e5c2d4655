"""Codec between window batches and the 2x2 geometric state space.

Encoding: each window's Gram matrix (outer product) is flattened, a two
component PCA is fit per mini-batch, and each projection z becomes the
matrix diag(z1^2, z2^2) with off-diagonals forced to zero. Squaring loses
the signs, so they are carried next to the matrix together with the index
of the real window the sample was encoded from.

Decoding inverts the chain: singular values of the (symmetrized,
re-diagonalized) matrix are rooted back to |z|, signs are restored by the
active policy, the inverse PCA map rebuilds a Gram matrix, and the square
roots of its clamped diagonal produce the window magnitudes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .common import DTYPE
from .errors import BatchTooSmallError, ConfigurationError, ContractError

SIGN_POLICIES = ("paired", "paper")


@dataclass(frozen=True)
class PcaState:
    mean: np.ndarray  # (D^2,)
    components: np.ndarray  # (2, D^2), orthonormal rows
    source_batch_id: str = ""

    def __post_init__(self):
        gram = self.components @ self.components.T
        if not np.allclose(gram, np.eye(2), atol=1e-8):
            raise ContractError("PCA components must be orthonormal")

    @property
    def dim(self) -> int:
        return int(round(np.sqrt(self.mean.size)))

    def to_json(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "components": self.components.tolist(),
            "source_batch_id": self.source_batch_id,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "PcaState":
        return cls(
            mean=np.asarray(payload["mean"], dtype=float),
            components=np.asarray(payload["components"], dtype=float),
            source_batch_id=payload.get("source_batch_id", ""),
        )


@dataclass(frozen=True)
class GeometricSample:
    matrix: np.ndarray  # 2x2, diagonal, nonnegative diagonal
    signs: tuple  # (+-1, +-1), signs of the projection before squaring
    paired_window_index: int

    @property
    def state_vector(self) -> np.ndarray:
        return self.matrix.reshape(-1)


def gram_matrix(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not np.isfinite(x).all():
        raise ContractError("gram_matrix input must be finite")
    return np.outer(x, x)


def fit_pca(flattened: np.ndarray, source_batch_id: str = "") -> PcaState:
    """Top-2 PCA of a B x D^2 matrix of flattened Gram matrices.

    Components are the leading right singular directions of the centered
    matrix; each one is flipped so its largest-magnitude entry is positive,
    which makes the fit invariant to row order.
    """
    rows = np.asarray(flattened, dtype=float)
    if rows.ndim != 2 or rows.shape[0] < 2:
        raise BatchTooSmallError("per-batch PCA needs at least 2 samples")
    mean = rows.mean(axis=0)
    centered = rows - mean
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:2].copy()
    for row in components:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1.0
    return PcaState(mean=mean, components=components, source_batch_id=source_batch_id)


def project(state: PcaState, flat_gram: np.ndarray) -> np.ndarray:
    return state.components @ (np.asarray(flat_gram, dtype=float) - state.mean)


def encode_batch(windows: np.ndarray, source_batch_id: str = "") -> tuple[PcaState, list[GeometricSample]]:
    """Encode a B x D window batch into per-sample geometric states."""
    windows = np.asarray(windows, dtype=float)
    if windows.ndim != 2 or windows.shape[0] < 2:
        raise BatchTooSmallError("encode_batch needs at least 2 windows")
    flat = np.stack([gram_matrix(w).reshape(-1) for w in windows])
    state = fit_pca(flat, source_batch_id=source_batch_id)
    samples = []
    for i in range(windows.shape[0]):
        z = project(state, flat[i])
        signs = tuple(1.0 if v >= 0 else -1.0 for v in z)
        samples.append(
            GeometricSample(
                matrix=np.diag(z**2),
                signs=signs,
                paired_window_index=i,
            )
        )
    return state, samples


def _window_signs(state: PcaState, window: np.ndarray) -> np.ndarray:
    z = project(state, gram_matrix(window).reshape(-1))
    return np.where(z >= 0, 1.0, -1.0)


def decode_sample(
    matrix,
    state: PcaState,
    policy: str = "paired",
    paired: np.ndarray | None = None,
):
    """Map a generated 2x2 matrix back to a window of length D.

    The square roots destroy two layers of signs. The projection signs are
    recovered from the paired real window whenever one is given (under either
    policy; without it they default to +1, the fully unsigned inverse). The
    policy governs the window signs: ``paired`` copies the elementwise signs
    of the paired window, ``paper`` leaves the magnitudes unsigned.

    Accepts a numpy array or a torch tensor; a tensor input keeps the
    gradient path through the singular values, the inverse projection and
    the final square root (the clamp and the sign choices act as constants).
    """
    if policy not in SIGN_POLICIES:
        raise ConfigurationError(f"unknown sign policy {policy!r}")
    if policy == "paired" and paired is None:
        raise ConfigurationError("sign policy 'paired' needs the paired real window")

    is_torch = isinstance(matrix, torch.Tensor)
    m = matrix.to(DTYPE) if is_torch else torch.as_tensor(np.asarray(matrix, dtype=float), dtype=DTYPE)
    if m.shape != (2, 2):
        raise ContractError(f"expected a 2x2 matrix, got shape {tuple(m.shape)}")

    m = 0.5 * (m + m.T)
    diag = torch.diagonal(m)
    # The matrix is diagonal once off-diagonals are dropped, so its singular
    # values aligned to the coordinate axes are exactly |diag|.
    sigma = torch.abs(diag)

    if paired is not None:
        z_signs = torch.as_tensor(_window_signs(state, np.asarray(paired, dtype=float)), dtype=DTYPE)
    else:
        z_signs = torch.ones(2, dtype=DTYPE)
    if policy == "paired":
        t_signs = torch.as_tensor(
            np.where(np.asarray(paired, dtype=float) >= 0, 1.0, -1.0), dtype=DTYPE
        )
    else:
        t_signs = None

    z_hat = z_signs * torch.sqrt(sigma)
    mean = torch.as_tensor(state.mean, dtype=DTYPE)
    components = torch.as_tensor(state.components, dtype=DTYPE)
    flat_gram = mean + z_hat @ components
    d = state.dim
    gram = flat_gram.reshape(d, d)
    window = torch.sqrt(torch.clamp(torch.diagonal(gram), min=0.0))
    if t_signs is not None:
        window = t_signs * window
    if is_torch:
        return window
    return window.detach().numpy()
