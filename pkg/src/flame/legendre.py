"""Legendre memory operators (LegT and LegS).

LegT compresses a sliding window ``[t - theta, t]`` into ``d`` Legendre
coefficients; LegS compresses the whole history ``[0, t]`` with time-varying
``1/t`` dynamics.  Both are linear ODEs ``m' = -A m + B f`` (LegS with an extra
``1/t`` factor), discretized here into recurrent steppers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from math import comb
from typing import Callable, Literal, Union

import numpy as np
from scipy.linalg import expm

Variant = Literal["legt", "legs"]
Method = Literal["euler", "bilinear", "exact"]
METHODS = ("euler", "bilinear", "exact")

# Largest order evaluated from the closed-form binomial sum; higher orders use
# the three-term recurrence.
EXACT_MAX_ORDER = 30


class NumericalFailure(ArithmeticError):
    """A discretization needed to invert an (effectively) singular matrix."""


@dataclass(frozen=True)
class LegendreOperator:
    variant: Variant
    order: int
    A: np.ndarray
    B: np.ndarray
    theta: float | None = None

    @property
    def steady_state_gain(self) -> np.ndarray:
        """``A^{-1} B``: the memory reached under a constant unit input (LegT)."""
        return np.linalg.solve(self.A, self.B)


def _legt_unit(d: int) -> tuple[np.ndarray, np.ndarray]:
    n = np.arange(d)[:, None]
    k = np.arange(d)[None, :]
    # (2n+1) on and above the diagonal keeps -A stable.
    A = np.where(n > k, (-1.0) ** (n - k), 1.0) * (2 * n + 1)
    B = (2 * np.arange(d) + 1) * (-1.0) ** np.arange(d)
    return A.astype(np.float64), B.astype(np.float64)


def build_legt(d: int, theta: float) -> LegendreOperator:
    """Translated-Legendre operator for a window of length ``theta``.

    Both ``A`` and ``B`` carry the ``1/theta`` factor, so the continuous
    system is ``m' = -A m + B f`` with no further rescaling.
    """
    if int(d) != d or d < 1:
        raise ValueError(f"order d must be a positive integer, got {d!r}")
    if not theta > 0:
        raise ValueError(f"theta must be positive, got {theta!r}")
    A, B = _legt_unit(int(d))
    A.setflags(write=False)
    return LegendreOperator("legt", int(d), A / theta, B / theta, float(theta))


def build_legs(d: int) -> LegendreOperator:
    """Scaled-Legendre operator (uniform measure over all history)."""
    if int(d) != d or d < 1:
        raise ValueError(f"order d must be a positive integer, got {d!r}")
    d = int(d)
    r = np.sqrt(2 * np.arange(d) + 1.0)
    A = np.tril(np.outer(r, r), k=-1) + np.diag(np.arange(1, d + 1, dtype=np.float64))
    return LegendreOperator("legs", d, A, r.copy())


def _discrete_pair(A: np.ndarray, B: np.ndarray, h: float, method: str) -> tuple[np.ndarray, np.ndarray]:
    """Discretize ``m' = -A m + B f`` over a step of length ``h``."""
    d = A.shape[0]
    eye = np.eye(d)
    if method == "euler":
        return eye - h * A, h * B
    if method == "bilinear":
        lhs = eye + (h / 2) * A
        _check_conditioning(lhs, method)
        return np.linalg.solve(lhs, eye - (h / 2) * A), np.linalg.solve(lhs, h * B)
    if method == "exact":
        _check_conditioning(A, method)
        abar = expm(-h * A)
        return abar, np.linalg.solve(A, (eye - abar) @ B)
    raise ValueError(f"unknown discretization method {method!r}; expected one of {METHODS}")


def _check_conditioning(M: np.ndarray, method: str) -> None:
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > 1e14:
        raise NumericalFailure(f"{method} discretization: matrix is singular (condition number {cond:.3g})")


@dataclass
class DiscretizedOperator:
    """Recurrent form of a Legendre operator.

    For LegT ``abar``/``bbar`` are fixed.  For LegS the system is time varying:
    step ``k`` (1-based) integrates ``m' = -(1/t) A m + (1/t) B f`` at
    ``t = k * dt``, which makes the effective step ``dt / t = 1/k``.
    """

    op: LegendreOperator
    dt: float
    method: str
    abar: np.ndarray | None = None
    bbar: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def time_varying(self) -> bool:
        return self.op.variant == "legs"

    @property
    def order(self) -> int:
        return self.op.order

    def matrices(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Transition pair used for the ``k``-th update (``k >= 1``)."""
        if not self.time_varying:
            return self.abar, self.bbar
        if k not in self._cache:
            self._cache[k] = _discrete_pair(self.op.A, self.op.B, 1.0 / k, self.method)
        return self._cache[k]


def discretize(op: LegendreOperator, dt: float, method: Method = "euler") -> DiscretizedOperator:
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt!r}")
    if method not in METHODS:
        raise ValueError(f"unknown discretization method {method!r}; expected one of {METHODS}")
    if op.variant == "legs":
        return DiscretizedOperator(op, float(dt), method)
    if dt > op.theta:
        warnings.warn(f"dt={dt} exceeds the LegT window theta={op.theta}", stacklevel=2)
    abar, bbar = _discrete_pair(op.A, op.B, dt, method)
    abar.setflags(write=False)
    bbar.setflags(write=False)
    return DiscretizedOperator(op, float(dt), method, abar, bbar)


@dataclass(frozen=True)
class MemoryState:
    m: np.ndarray
    steps: int = 0

    @classmethod
    def zeros(cls, d: int) -> "MemoryState":
        return cls(np.zeros(d), 0)


def step(state: MemoryState, disc: DiscretizedOperator, f_t: float) -> MemoryState:
    """One recurrent update ``m <- abar m + bbar f_t``."""
    if state.m.shape != (disc.order,):
        raise ValueError(f"memory has shape {state.m.shape}, operator order is {disc.order}")
    if not np.isfinite(f_t):
        raise ValueError(f"non-finite input f_t={f_t!r} at step {state.steps}")
    abar, bbar = disc.matrices(state.steps + 1)
    return MemoryState(abar @ state.m + bbar * f_t, state.steps + 1)


def compress(op: LegendreOperator, dt: float, series, method: Method = "euler") -> MemoryState:
    """Fold ``step`` over ``series`` starting from the zero memory."""
    x = np.asarray(series, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("cannot compress an empty series")
    if not np.all(np.isfinite(x)):
        raise ValueError("series contains non-finite values")
    disc = discretize(op, dt, method)
    if not disc.time_varying:
        m = np.zeros(op.order)
        abar, bbar = disc.abar, disc.bbar
        for v in x:
            m = abar @ m + bbar * v
        return MemoryState(m, int(x.size))
    state = MemoryState.zeros(op.order)
    for v in x:
        state = step(state, disc, v)
    return state


@lru_cache(maxsize=256)
def compress_kernel(d: int, length: int, dt: float = 1.0, method: Method = "bilinear",
                    warm_start: bool = False) -> np.ndarray:
    """Matrix ``K`` (d x length) with ``compress(legt(d, length), dt, w).m == K @ w``.

    The LegT window equals the series length, so the kernel depends only on
    ``(d, length, dt, method)`` and can be shared across patches.

    With ``warm_start`` the memory starts at the steady state ``w[0] A^-1 B``
    of the first sample instead of zero, as if that value extended into the
    past.  A constant series is then an exact fixed point.
    """
    op = build_legt(d, float(length))
    disc = discretize(op, dt, method)
    K = np.empty((d, length))
    col = disc.bbar.copy()
    for j in range(length - 1, -1, -1):
        K[:, j] = col
        col = disc.abar @ col
    if warm_start:
        # col now holds Abar^length Bbar; the warm state needs Abar^length A^-1 B
        K[:, 0] += np.linalg.matrix_power(disc.abar, length) @ op.steady_state_gain
    K.setflags(write=False)
    return K


@lru_cache(maxsize=None)
def _shifted_coefficients(i: int) -> tuple[int, ...]:
    # P_i(r) = sum_j c_j r^j with c_j = (-1)^(i+j) C(i,j) C(i+j,j)
    return tuple((-1) ** (i + j) * comb(i, j) * comb(i + j, j) for j in range(i + 1))


def _shifted_exact(i: int, r: float) -> float:
    coeffs = _shifted_coefficients(i)
    x = Fraction(r)
    acc = Fraction(0)
    for c in reversed(coeffs):
        acc = acc * x + c
    return float(acc)


def _shifted_recurrence(i: int, r: np.ndarray) -> np.ndarray:
    x = 2.0 * r - 1.0
    p_prev, p = np.ones_like(x), x.copy()
    if i == 0:
        return p_prev
    for k in range(1, i):
        p_prev, p = p, ((2 * k + 1) * x * p - k * p_prev) / (k + 1)
    return p


def shifted_legendre(i: int, r):
    """Shifted Legendre polynomial ``P_i`` on ``[0, 1]``.

    Orders up to ``EXACT_MAX_ORDER`` are evaluated from the integer binomial
    sum in exact rational arithmetic (the float sum cancels catastrophically
    well before i = 30); higher orders use Bonnet's recurrence.
    """
    if int(i) != i or i < 0:
        raise ValueError(f"polynomial index must be a non-negative integer, got {i!r}")
    i = int(i)
    r_arr = np.asarray(r, dtype=np.float64)
    if np.any((r_arr < 0) | (r_arr > 1)):
        raise ValueError("r must lie in [0, 1]")
    if i > EXACT_MAX_ORDER:
        out = _shifted_recurrence(i, r_arr)
    else:
        out = np.array([_shifted_exact(i, float(v)) for v in r_arr.ravel()]).reshape(r_arr.shape)
    return float(out) if out.ndim == 0 else out


def legendre_basis(d: int, r) -> np.ndarray:
    """Matrix with columns ``P_0(r) .. P_{d-1}(r)`` (rows follow ``r``)."""
    r_arr = np.atleast_1d(np.asarray(r, dtype=np.float64))
    return np.stack([np.atleast_1d(shifted_legendre(i, r_arr)) for i in range(d)], axis=-1)


def reconstruct(state: MemoryState, op: LegendreOperator, theta_prime):
    """Estimate ``f(t - theta_prime)`` from a LegT memory taken at time ``t``."""
    if op.variant != "legt":
        raise NotImplementedError("delay reconstruction is only defined for LegT memories")
    tp = np.asarray(theta_prime, dtype=np.float64)
    if np.any((tp < 0) | (tp > op.theta)):
        raise ValueError(f"theta_prime must lie in [0, {op.theta}]")
    vals = legendre_basis(op.order, tp / op.theta) @ state.m
    return float(vals[0]) if tp.ndim == 0 else vals.reshape(tp.shape)


SampledFunction = Union[Callable[[np.ndarray], np.ndarray], np.ndarray]


def reconstruction_error(
    op: LegendreOperator,
    dt: float,
    f: SampledFunction,
    grid,
    method: Method = "euler",
    warmup: float | None = None,
) -> float:
    """RMS error of delay reconstruction over ``grid`` (delays in ``[0, theta]``).

    ``f`` is either a callable of time or an array of samples spaced ``dt``
    apart whose last entry is the current time.  A callable is sampled on
    ``(-warmup, theta]`` and the memory is read at ``t = theta``; the warm-up
    (default ``4 * theta``) lets the zero initial memory decay away.  Array
    input is used as given, with the true values linearly interpolated.
    """
    if op.variant != "legt":
        raise NotImplementedError("reconstruction error is only defined for LegT memories")
    grid = np.asarray(grid, dtype=np.float64)
    if np.any((grid < 0) | (grid > op.theta)):
        raise ValueError(f"delay grid must lie in [0, {op.theta}]")
    if callable(f):
        warm = 4 * op.theta if warmup is None else warmup
        n_steps = int(round((op.theta + warm) / dt))
        times = op.theta - dt * np.arange(n_steps - 1, -1, -1)
        samples = np.asarray(f(times), dtype=np.float64)
        truth = np.asarray(f(op.theta - grid), dtype=np.float64)
    else:
        samples = np.asarray(f, dtype=np.float64).ravel()
        times = dt * np.arange(samples.size)
        t_end = times[-1]
        if t_end < op.theta:
            raise ValueError("sampled history is shorter than the window theta")
        truth = np.interp(t_end - grid, times, samples)
    state = compress(op, dt, samples, method)
    recon = reconstruct(state, op, grid)
    return float(np.sqrt(np.mean((recon - truth) ** 2)))
