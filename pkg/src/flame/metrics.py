"""Point and distributional forecast scores."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


class UndefinedMetric(ArithmeticError):
    pass


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} does not match truth shape {t.shape}")
    return p, t


def mse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean((p - t) ** 2))


def mae(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


def nmae(pred, truth) -> float:
    p, t = _pair(pred, truth)
    denom = np.abs(t).sum()
    if denom == 0:
        raise UndefinedMetric("NMAE is undefined when the truth is identically zero")
    return float(np.abs(p - t).sum() / denom)


def crps_samples(samples, obs):
    """Empirical-CDF CRPS of ``samples`` (leading axis) against ``obs``.

    Equal to the energy form ``mean|X - y| - mean|X - X'| / 2`` and to
    ``integral (F_hat(z) - 1{y <= z})^2 dz``.  It is evaluated from sorted
    samples in ``O(S log S)`` as

        (2 / S^2) * sum_i (x_(i) - y) * (S * 1{y < x_(i)} - i + 1/2)

    (``i`` one-based), which is exactly 0 when every sample equals ``y`` and
    exactly ``|x - y|`` for a single sample.
    """
    x = np.asarray(samples, dtype=np.float64)
    y = np.asarray(obs, dtype=np.float64)
    S = x.shape[0]
    if S < 1:
        raise ValueError("CRPS needs at least one sample")
    xs = np.sort(x, axis=0)
    rank = (np.arange(1, S + 1) - 0.5).reshape((S,) + (1,) * (x.ndim - 1))
    weight = S * (y < xs) - rank
    out = 2.0 * ((xs - y) * weight).sum(axis=0) / (S * S)
    return float(out) if np.ndim(out) == 0 else out


def crps_integral(samples, obs, grid_points: int = 0) -> float:
    """Direct integration of ``(F_hat(z) - 1{y <= z})^2``.

    The integrand is piecewise constant between the sorted breakpoints
    (samples and observation), so summing over those intervals is exact.
    """
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    y = float(obs)
    knots = np.sort(np.append(x, y))
    total = 0.0
    for a, b in zip(knots[:-1], knots[1:]):
        if b <= a:
            continue
        z = 0.5 * (a + b)
        F = np.searchsorted(x, z, side="right") / x.size
        total += (F - (1.0 if y <= z else 0.0)) ** 2 * (b - a)
    return total


@dataclass
class EvalReport:
    mse: float
    mae: float
    nmae: float
    crps: float
    crps_normalized: float
    n_samples: int
    n_windows: int
    horizon: int
    per_horizon_mse: list[float]
    per_horizon_mae: list[float]
    per_horizon_crps: list[float]

    def to_dict(self) -> dict:
        return asdict(self)


def score(samples, truth) -> EvalReport:
    """Score ``samples`` ``(S, W, L)`` against ``truth`` ``(W, L)``.

    The point forecast is the ensemble mean.  CRPS is averaged over all
    (window, step) pairs; ``crps_normalized`` divides it by mean ``|truth|``.
    """
    s = np.asarray(samples, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if s.shape[1:] != t.shape:
        raise ValueError(f"samples {s.shape} do not match truth {t.shape}")
    # shifted mean: identical samples give their common value exactly
    point = s[0] + (s - s[0]).mean(axis=0)
    crps = crps_samples(s, t)
    err = point - t
    scale = np.abs(t).mean()
    return EvalReport(
        mse=float(np.mean(err**2)),
        mae=float(np.mean(np.abs(err))),
        nmae=nmae(point, t) if scale > 0 else float("nan"),
        crps=float(np.mean(crps)),
        crps_normalized=float(np.mean(crps) / scale) if scale > 0 else float("nan"),
        n_samples=int(s.shape[0]),
        n_windows=int(t.shape[0]),
        horizon=int(t.shape[1]),
        per_horizon_mse=np.mean(err**2, axis=0).tolist(),
        per_horizon_mae=np.mean(np.abs(err), axis=0).tolist(),
        per_horizon_crps=np.mean(crps, axis=0).tolist(),
    )


def evaluate(model, windows, horizon: int, n_samples: int = 100, rng: np.random.Generator | None = None,
             batch_size: int = 256) -> EvalReport:
    """Forecast every window (none dropped) and score the denormalized samples.

    ``windows`` is ``(W, input_len + horizon)``: history followed by truth.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    w = np.atleast_2d(np.asarray(windows, dtype=np.float64))
    c = model.config
    n_in = c.input_len
    if w.shape[1] != n_in + horizon:
        raise ValueError(f"windows have length {w.shape[1]}, expected {n_in} + {horizon}")
    # noise is drawn per window up front, so batching cannot change the result
    noise = rng.standard_normal((w.shape[0], n_samples, c.future_tokens, c.patch_size))
    parts = []
    for start in range(0, w.shape[0], batch_size):
        chunk = w[start : start + batch_size]
        eps = np.moveaxis(noise[start : start + batch_size], 1, 0)
        parts.append(model.forecast(chunk[:, :n_in], horizon, n_samples, rng, noise=eps).samples)
    samples = np.concatenate(parts, axis=1)
    return score(samples, w[:, n_in:])
