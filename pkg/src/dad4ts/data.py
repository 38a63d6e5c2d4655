"""Series ingestion, chronological splits, window batching, noise augmentation.

Splits are 6:2:2 by floor policy with z-score normalization from the training
statistics only. Validation and test sequences carry an input-length prefix
copied from the preceding partition so their first windows can look backward
without leaking targets.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from statsmodels.tsa.seasonal import seasonal_decompose

from .errors import (
    ConfigurationError,
    ContractError,
    DegenerateSeriesError,
    EmptyStreamError,
    IngestionError,
)


@dataclass(frozen=True)
class TimeSeriesDataset:
    values: np.ndarray
    name: str = "series"
    frequency: str = "unknown"
    period: int | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1 or values.size == 0:
            raise ContractError("series must be a nonempty 1-d sequence")
        if not np.isfinite(values).all():
            raise ContractError("series contains non-finite values")
        if self.period is not None and self.period < 2:
            raise ConfigurationError("seasonal period must be >= 2")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True)
class SplitDataset:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    norm_mean: float
    norm_std: float
    input_len: int

    @property
    def val_proper(self) -> np.ndarray:
        """Validation points without the borrowed train prefix."""
        return self.val[self.input_len:]

    @property
    def test_proper(self) -> np.ndarray:
        return self.test[self.input_len:]

    def val_half(self) -> np.ndarray:
        """Latter half of the validation partition, with its own backward
        extension of input_len points (drawn from the earlier half)."""
        half_start = len(self.val_proper) // 2
        return self.val[half_start:]

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) * self.norm_std + self.norm_mean


@dataclass(frozen=True)
class WindowBatch:
    windows: np.ndarray  # B x (input_len + forecast_len)
    input_len: int
    split: str = "train"
    starts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.windows.ndim != 2 or self.windows.shape[0] < 1:
            raise ContractError("window batch must be a nonempty 2-d array")
        if self.starts is None:
            object.__setattr__(self, "starts", np.arange(self.windows.shape[0]))

    @property
    def inputs(self) -> np.ndarray:
        return self.windows[:, : self.input_len]

    @property
    def targets(self) -> np.ndarray:
        return self.windows[:, self.input_len:]

    def __len__(self) -> int:
        return int(self.windows.shape[0])


def load_series(
    path: str | Path,
    name: str | None = None,
    frequency: str = "unknown",
    period: int | None = None,
    column: str | int | None = None,
) -> TimeSeriesDataset:
    """Read one numeric column from a CSV file, in temporal order.

    The header row is optional and detected by attempting to parse the
    selected field of the first row. ``column`` selects by name (requires a
    header) or position; default is the only/first column.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    rows = [row for row in csv.reader(text.splitlines()) if row and any(f.strip() for f in row)]
    if not rows:
        raise IngestionError(f"{path}: file holds no records")

    col_idx = 0
    header_names = [f.strip() for f in rows[0]]
    has_header = False
    if isinstance(column, str):
        if column not in header_names:
            raise IngestionError(f"{path}: no column named {column!r} in header {header_names}")
        col_idx = header_names.index(column)
        has_header = True
    else:
        if isinstance(column, int):
            col_idx = column
        try:
            float(rows[0][col_idx])
        except (ValueError, IndexError):
            has_header = True

    values = []
    for line_no, row in enumerate(rows[1:] if has_header else rows, start=2 if has_header else 1):
        try:
            values.append(float(row[col_idx].strip()))
        except (ValueError, IndexError) as exc:
            raise IngestionError(f"{path}: non-numeric record on line {line_no}: {row!r}") from exc
    if not values:
        raise IngestionError(f"{path}: no numeric records after header")
    return TimeSeriesDataset(
        np.asarray(values), name=name or path.stem, frequency=frequency, period=period
    )


def split_normalize(ds: TimeSeriesDataset, input_len: int) -> SplitDataset:
    """6:2:2 chronological split, normalized by train mean/population std."""
    if input_len < 1:
        raise ConfigurationError("input_len must be positive")
    n = len(ds)
    n_train = int(np.floor(0.6 * n))
    n_val = int(np.floor(0.2 * n))
    n_test = n - n_train - n_val
    if n_train <= input_len or n_val < 1 or n_test < 1:
        raise ConfigurationError(
            f"series of length {n} too short to split 6:2:2 with input_len={input_len}"
        )
    mean = float(np.mean(ds.values[:n_train]))
    std = float(np.std(ds.values[:n_train]))
    if std <= 0.0:
        raise DegenerateSeriesError("training split has zero variance")
    z = (ds.values - mean) / std
    train = z[:n_train]
    val = z[n_train - input_len : n_train + n_val]
    test = z[n_train + n_val - input_len :]
    return SplitDataset(
        train=train, val=val, test=test, norm_mean=mean, norm_std=std, input_len=input_len
    )


def window_count(length: int, window_len: int) -> int:
    return max(0, length - window_len + 1)


def window_batches(
    split: np.ndarray,
    input_len: int,
    forecast_len: int,
    batch: int,
    split_name: str = "train",
) -> Iterator[WindowBatch]:
    """Stride-1 windows of length input_len + forecast_len, grouped by batch.

    A trailing partial batch is emitted only when it holds at least two
    windows (per-batch PCA downstream needs >= 2 samples); a lone leftover
    window is merged into the preceding batch instead.
    """
    if batch < 2:
        raise ConfigurationError("batch size must be >= 2")
    series = np.asarray(split, dtype=float)
    total = input_len + forecast_len
    n_windows = window_count(series.size, total)
    if n_windows < 2:
        raise EmptyStreamError(
            f"split of length {series.size} yields {n_windows} window(s) of length {total}"
        )
    windows = np.lib.stride_tricks.sliding_window_view(series, total).copy()
    bounds = list(range(0, n_windows, batch))
    if n_windows - bounds[-1] == 1 and len(bounds) > 1:
        bounds.pop()  # merge the lone trailing window into the previous batch
    for i, lo in enumerate(bounds):
        hi = n_windows if i == len(bounds) - 1 else bounds[i + 1]
        yield WindowBatch(
            windows=windows[lo:hi],
            input_len=input_len,
            split=split_name,
            starts=np.arange(lo, hi),
        )


def stl_gaussian_augment(
    series: np.ndarray,
    period: int,
    noise_scale: float = 1.0,
    seed: int = 0,
) -> np.ndarray:
    """Seasonal decomposition with Gaussian noise re-injected into residuals.

    Trend comes from a centered moving average, seasonality from periodic
    means; the residual is perturbed with noise of scale
    noise_scale * std(residual) and the three parts are re-summed.
    """
    values = np.asarray(series, dtype=float)
    if period is None:
        raise ConfigurationError("seasonal period is required for this augmentation")
    if period < 2:
        raise ConfigurationError("seasonal period must be >= 2")
    if values.size < 2 * period:
        raise ConfigurationError(
            f"series of length {values.size} too short for period {period} (need >= {2 * period})"
        )
    parts = seasonal_decompose(values, model="additive", period=period, extrapolate_trend="freq")
    resid = np.asarray(parts.resid, dtype=float)
    sigma = noise_scale * float(np.std(resid))
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=values.size) if sigma > 0 else np.zeros(values.size)
    return np.asarray(parts.trend) + np.asarray(parts.seasonal) + resid + noise
