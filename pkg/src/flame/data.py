"""CSV ingestion, chronological splits, windowing and synthetic series."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .tokenizer import SeriesWindow


class CSVParseError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


@dataclass
class Dataset:
    channels: dict[str, np.ndarray]
    frequency: str = ""
    split_ratios: tuple[float, ...] = (0.6, 0.2, 0.2)
    timestamps: list[str] | None = field(default=None, repr=False)

    def __post_init__(self):
        lengths = {v.shape[0] for v in self.channels.values()}
        if len(lengths) > 1:
            raise ValueError(f"channels have unequal lengths: {sorted(lengths)}")

    def __len__(self) -> int:
        return next(iter(self.channels.values())).shape[0] if self.channels else 0

    @property
    def names(self) -> list[str]:
        return list(self.channels)

    def slice(self, start: int, stop: int) -> "Dataset":
        ts = self.timestamps[start:stop] if self.timestamps is not None else None
        return Dataset({k: v[start:stop] for k, v in self.channels.items()}, self.frequency, self.split_ratios, ts)


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_csv(path) -> Dataset:
    """One channel per numeric column.

    A leading column whose header is non-numeric and whose first data cell is
    not a number is taken as a timestamp column.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if any(c.strip() for c in r)]
    if not rows:
        raise CSVParseError(path, 1, "empty file")
    header = [c.strip() for c in rows[0]]
    body = rows[1:]
    if not body:
        raise CSVParseError(path, 2, "no data rows after header")
    has_ts = len(header) > 1 and not _is_number(header[0]) and not _is_number(body[0][0])
    first = 1 if has_ts else 0
    names = header[first:]
    values = np.empty((len(body), len(names)))
    stamps = [] if has_ts else None
    for i, row in enumerate(body):
        line = i + 2
        if len(row) != len(header):
            raise CSVParseError(path, line, f"expected {len(header)} cells, got {len(row)}")
        if has_ts:
            stamps.append(row[0])
        for j, cell in enumerate(row[first:]):
            try:
                v = float(cell)
            except ValueError:
                raise CSVParseError(path, line, f"non-numeric value {cell!r} in column {names[j]!r}") from None
            if not np.isfinite(v):
                raise CSVParseError(path, line, f"missing or non-finite value in column {names[j]!r}")
            values[i, j] = v
    return Dataset({n: values[:, j].copy() for j, n in enumerate(names)}, timestamps=stamps)


def split(dataset: Dataset, ratios=(0.6, 0.2, 0.2), min_len: int = 1) -> tuple[Dataset, Dataset, Dataset]:
    """Chronological train/val/test segments with boundaries at ``floor(ratio * T)``."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    T = len(dataset)
    b1 = int(np.floor(ratios[0] * T))
    b2 = b1 + int(np.floor(ratios[1] * T))
    parts = (dataset.slice(0, b1), dataset.slice(b1, b2), dataset.slice(b2, T))
    for name, part in zip(("train", "val", "test"), parts):
        if len(part) < max(min_len, 1):
            raise ValueError(f"{name} split has {len(part)} samples, fewer than one window of {min_len}")
    return parts


def num_windows(T: int, window_len: int, stride: int) -> int:
    return (T - window_len) // stride + 1


def windows(channel, window_len: int, stride: int = 1) -> Iterator[SeriesWindow]:
    """All full windows; the count is ``floor((T - window_len) / stride) + 1``."""
    x = np.asarray(channel, dtype=np.float64)
    T = x.shape[0]
    if window_len > T:
        raise ValueError(f"window length {window_len} exceeds series length {T}")
    if window_len < 1 or stride < 1:
        raise ValueError("window length and stride must be positive")
    for start in range(0, T - window_len + 1, stride):
        yield SeriesWindow(x[start : start + window_len], start)


def window_matrix(dataset: Dataset, window_len: int, stride: int = 1) -> np.ndarray:
    """Stack windows from every channel (channel-independent samples)."""
    out = [w.values for ch in dataset.channels.values() for w in windows(ch, window_len, stride)]
    return np.stack(out) if out else np.empty((0, window_len))


def synth(kind: str, T: int, seed: int = 0, **params) -> np.ndarray:
    """Deterministic synthetic channels.

    sine:          amp * sin(2 pi t / period + phase) + noise * eps_t
    sine_mix:      sum_k amps[k] * sin(2 pi t / periods[k]) + noise * eps_t
    ar1:           x_t = phi * x_{t-1} + sigma * eps_t, x_0 = sigma * eps_0
    trend_season:  slope * t + amp * sin(2 pi t / period) + noise * eps_t
    """
    rng = np.random.default_rng(seed)
    t = np.arange(T, dtype=np.float64)
    noise = float(params.get("noise", 0.0))
    if kind == "sine":
        x = params.get("amp", 1.0) * np.sin(2 * np.pi * t / params.get("period", 96) + params.get("phase", 0.0))
    elif kind == "sine_mix":
        periods = params.get("periods", (96, 24))
        amps = params.get("amps", (1.0, 0.2))
        x = sum(a * np.sin(2 * np.pi * t / P) for a, P in zip(amps, periods))
    elif kind == "ar1":
        phi, sigma = float(params.get("phi", 0.8)), float(params.get("sigma", 1.0))
        eps = rng.standard_normal(T) * sigma
        x = np.empty(T)
        x[0] = eps[0]
        for i in range(1, T):
            x[i] = phi * x[i - 1] + eps[i]
        return x
    elif kind == "trend_season":
        x = params.get("slope", 0.01) * t + params.get("amp", 1.0) * np.sin(2 * np.pi * t / params.get("period", 24))
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    return x + noise * rng.standard_normal(T)
