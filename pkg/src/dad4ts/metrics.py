"""Forecast-quality metrics and benchmark-table aggregation.

RMSE measures pointwise accuracy; DTW measures structural similarity under
monotone time warping. improvement_stats turns two grids of metric values
into the relative-change summary used by the experiment tables.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class ResultCell:
    dataset: str
    forecaster: str
    horizon: int
    mode: str
    rmse: float
    dtw: float

    def __post_init__(self):
        if self.rmse < 0 or self.dtw < 0:
            raise ContractError("metric values must be nonnegative")


def rmse(y, y_hat) -> float:
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape or y.size == 0:
        raise ContractError(f"rmse needs equal nonempty shapes, got {y.shape} vs {y_hat.shape}")
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def dtw(y, y_hat) -> float:
    """Cumulative absolute-difference DTW distance.

    First row and column accumulate along the edge; interior cells take the
    local cost plus the minimum of the three predecessors. Returns D(n, m).
    """
    a = np.asarray(y, dtype=float).ravel()
    b = np.asarray(y_hat, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ContractError("dtw needs nonempty sequences")
    n, m = a.size, b.size
    cost = np.abs(a[:, None] - b[None, :])
    acc = np.empty((n, m), dtype=float)
    acc[0, 0] = cost[0, 0]
    for j in range(1, m):
        acc[0, j] = cost[0, j] + acc[0, j - 1]
    for i in range(1, n):
        acc[i, 0] = cost[i, 0] + acc[i - 1, 0]
        for j in range(1, m):
            acc[i, j] = cost[i, j] + min(acc[i - 1, j - 1], acc[i, j - 1], acc[i - 1, j])
    return float(acc[n - 1, m - 1])


def improvement_stats(baseline, method) -> dict:
    """Per-cell relative change (%) of ``method`` against ``baseline``.

    Negative change means improvement (metrics are losses). Ties count as
    non-improvements. Returns the per-cell grid plus the improved-cell rate
    and the mean change, both in percent.
    """
    base = np.asarray(baseline, dtype=float)
    meth = np.asarray(method, dtype=float)
    if base.shape != meth.shape or base.size == 0:
        raise ContractError(f"grids must share a nonempty shape, got {base.shape} vs {meth.shape}")
    if np.any(base == 0):
        raise ContractError("baseline grid contains a zero cell; relative change undefined")
    delta = 100.0 * (meth - base) / base
    return {
        "delta_pct": delta,
        "imp_rate": float(100.0 * np.mean(delta < 0)),
        "imp_mean": float(np.mean(delta)),
    }
