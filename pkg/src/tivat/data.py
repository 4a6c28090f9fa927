"""CSV ingestion, chronological splits, sliding windows and instance normalisation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

STD_FLOOR = 1e-8

# (train, val, test) lengths of the standard long-horizon benchmarks.
DATASET_SPLITS = {
    "ETTh1": (8545, 2881, 2881),
    "ETTh2": (8545, 2881, 2881),
    "ETTm1": (34465, 11521, 11521),
    "ETTm2": (34465, 11521, 11521),
    "Exchange": (5120, 665, 1422),
    "Weather": (36792, 5271, 10540),
    "ECL": (18317, 2633, 5261),
    "Traffic": (12185, 1757, 3509),
}

DATASET_DIMS = {
    "ETTh1": 7, "ETTh2": 7, "ETTm1": 7, "ETTm2": 7,
    "Exchange": 8, "Weather": 21, "ECL": 321, "Traffic": 862,
}


class DataError(ValueError):
    """Malformed input data or an unsatisfiable split/window request."""


@dataclass
class SeriesFrame:
    variate_names: list[str]
    values: np.ndarray
    timestamps: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError(f"values must be 2-d (time x variates), got shape {self.values.shape}")
        if self.values.shape[1] != len(self.variate_names):
            raise DataError(
                f"{len(self.variate_names)} variate names for {self.values.shape[1]} columns")
        if not self.timestamps:
            self.timestamps = [str(i) for i in range(self.values.shape[0])]
        if len(self.timestamps) != self.values.shape[0]:
            raise DataError("timestamp count does not match row count")
        if not np.isfinite(self.values).all():
            raise DataError("series contains NaN or Inf")

    @property
    def n_vars(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.values.shape[0]

    def slice(self, start: int, stop: int) -> "SeriesFrame":
        return SeriesFrame(list(self.variate_names), self.values[start:stop].copy(),
                           self.timestamps[start:stop])


@dataclass(frozen=True)
class SplitSpec:
    train_len: int
    val_len: int
    test_len: int

    def __post_init__(self):
        for name in ("train_len", "val_len", "test_len"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be positive")

    @classmethod
    def for_dataset(cls, name: str) -> "SplitSpec":
        try:
            return cls(*DATASET_SPLITS[name])
        except KeyError:
            raise DataError(f"no default split for dataset {name!r}") from None


@dataclass
class WindowBatch:
    """Input/target windows plus the per-window normalisation statistics."""

    inputs: np.ndarray  # B x L_H x V
    targets: np.ndarray  # B x L_F x V
    norm_stats: tuple | None = None  # (mean, std), each B x 1 x V

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx) -> "WindowBatch":
        stats = None
        if self.norm_stats is not None:
            stats = (self.norm_stats[0][idx], self.norm_stats[1][idx])
        return WindowBatch(self.inputs[idx], self.targets[idx], stats)


def load_csv(path) -> SeriesFrame:
    """Read a ``date,var1,var2,...`` CSV. The first column is kept as opaque text."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(header) < 2:
            raise DataError(f"{path}: need a timestamp column and at least one value column")
        names = [h.strip() for h in header[1:]]
        stamps, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(row)} cells, expected {len(header)}")
            vals = []
            for col, cell in enumerate(row[1:], start=1):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(
                        f"{path}: non-numeric cell {cell!r} at row {lineno}, column {col} ({header[col]})"
                    ) from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: non-finite cell at row {lineno}, column {col}")
                vals.append(v)
            stamps.append(row[0])
            rows.append(vals)
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    return SeriesFrame(names, values, stamps)


def write_csv(frame: SeriesFrame, path, time_header: str = "date") -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([time_header, *frame.variate_names])
        for stamp, row in zip(frame.timestamps, frame.values):
            writer.writerow([stamp, *(repr(float(v)) for v in row)])


def chronological_split(frame: SeriesFrame, spec: SplitSpec):
    """Return contiguous (train, val, test) frames taken from the start of ``frame``."""
    total = spec.train_len + spec.val_len + spec.test_len
    if total > len(frame):
        raise DataError(f"split lengths sum to {total} but the series has {len(frame)} rows")
    a = spec.train_len
    b = a + spec.val_len
    return frame.slice(0, a), frame.slice(a, b), frame.slice(b, total)


def standardize(train: SeriesFrame, *others: SeriesFrame):
    """Z-score every frame with the train frame's per-variate mean/std."""
    mu = train.values.mean(axis=0)
    sd = np.maximum(train.values.std(axis=0), STD_FLOOR)
    out = []
    for f in (train, *others):
        out.append(SeriesFrame(list(f.variate_names), (f.values - mu) / sd, list(f.timestamps)))
    return out


def window_count(length: int, lookback: int, horizon: int) -> int:
    return length - lookback - horizon + 1


def make_windows(frame: SeriesFrame, lookback: int, horizon: int) -> WindowBatch:
    """All stride-1 (input, target) pairs lying wholly inside ``frame``."""
    if lookback < 1 or horizon < 1:
        raise DataError("lookback and horizon must be positive")
    n = window_count(len(frame), lookback, horizon)
    if n < 1:
        raise DataError(
            f"segment of length {len(frame)} is shorter than lookback+horizon={lookback + horizon}")
    span = np.lib.stride_tricks.sliding_window_view(frame.values, lookback + horizon, axis=0)
    span = np.ascontiguousarray(np.swapaxes(span, 1, 2))  # n x (L_H+L_F) x V
    return WindowBatch(span[:, :lookback].copy(), span[:, lookback:].copy())


def instance_normalize(window: np.ndarray):
    """Per-variate z-score over the time axis (axis -2). Returns ``(normed, (mean, std))``."""
    window = np.asarray(window, dtype=np.float64)
    mu = window.mean(axis=-2, keepdims=True)
    sd = np.maximum(window.std(axis=-2, keepdims=True), STD_FLOOR)
    return (window - mu) / sd, (mu, sd)


def denormalize(pred: np.ndarray, stats) -> np.ndarray:
    mu, sd = stats
    return np.asarray(pred) * sd + mu


def iterate_batches(batch: WindowBatch, batch_size: int, rng: np.random.Generator | None = None
                    ) -> Iterator[WindowBatch]:
    """Mini-batches in order, or shuffled when ``rng`` is given."""
    if batch_size < 1:
        raise DataError("batch_size must be positive")
    order = np.arange(len(batch)) if rng is None else rng.permutation(len(batch))
    for start in range(0, len(batch), batch_size):
        yield batch.subset(order[start:start + batch_size])


def synth_leadlag(n_vars: int, length: int, lag: int, coupling: float, noise_std: float,
                  seed: int, periods: tuple = (24.0, 67.0)) -> SeriesFrame:
    """Driver plus lagged copies.

    Variate 0 is ``sin(2 pi t/P1) + 0.5 sin(2 pi t/P2) + noise``. Variate ``v >= 1``
    equals ``coupling * driver(t - v*lag)`` plus its own independent noise. The
    driver is simulated from ``t = -lag*(V-1)`` so every lagged value exists.
    """
    if n_vars < 2:
        raise DataError("synth_leadlag needs at least 2 variates")
    if lag < 1:
        raise DataError("lag must be at least 1")
    if length < 1 or lag * (n_vars - 1) >= length:
        raise DataError(f"lag*(V-1)={lag * (n_vars - 1)} must be smaller than length={length}")
    if noise_std < 0:
        raise DataError("noise_std must be non-negative")
    rng = np.random.default_rng(seed)
    pre = lag * (n_vars - 1)
    t = np.arange(-pre, length, dtype=np.float64)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=2)
    driver = (np.sin(2.0 * np.pi * t / periods[0] + phase[0])
              + 0.5 * np.sin(2.0 * np.pi * t / periods[1] + phase[1]))
    driver = driver + noise_std * rng.standard_normal(t.size)
    values = np.empty((length, n_vars))
    values[:, 0] = driver[pre:]
    for v in range(1, n_vars):
        shift = v * lag
        values[:, v] = coupling * driver[pre - shift:pre - shift + length]
        values[:, v] += noise_std * rng.standard_normal(length)
    names = [f"x{v}" for v in range(n_vars)]
    return SeriesFrame(names, values, [str(i) for i in range(length)])
