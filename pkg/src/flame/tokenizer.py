"""Series tokenization and local-perception encoding.

All array functions treat the last axis as time, so a batch of windows
``(B, T)`` is handled the same way as a single window ``(T,)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .legendre import compress_kernel

NORM_EPS = 1e-5


@dataclass(frozen=True)
class SeriesWindow:
    values: np.ndarray
    sample_index_origin: int = 0

    def __len__(self) -> int:
        return self.values.shape[-1]


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    eps: float = NORM_EPS


def instance_normalize(window, eps: float = NORM_EPS) -> tuple[np.ndarray, NormStats]:
    x = np.asarray(window, dtype=np.float64)
    if x.shape[-1] < 1:
        raise ValueError("cannot normalize an empty window")
    mean = x.mean(axis=-1, keepdims=True)
    std = x.std(axis=-1, keepdims=True)
    return (x - mean) / (std + eps), NormStats(mean, std, eps)


def denormalize(values, stats: NormStats) -> np.ndarray:
    """Invert :func:`instance_normalize`.

    ``values`` may carry extra trailing axes (e.g. samples x horizon); the
    statistics broadcast along the leading batch axes only.
    """
    v = np.asarray(values, dtype=np.float64)
    mean, scale = stats.mean, stats.std + stats.eps
    extra = v.ndim - mean.ndim
    if extra > 0:
        mean = mean.reshape(mean.shape[:-1] + (1,) * (extra + 1))
        scale = scale.reshape(scale.shape[:-1] + (1,) * (extra + 1))
    return v * scale + mean


def _left_pad(x: np.ndarray, count: int) -> np.ndarray:
    """Left-pad along time by repeating the first sample."""
    if count <= 0:
        return x
    first = np.repeat(x[..., :1], count, axis=-1)
    return np.concatenate([first, x], axis=-1)


@dataclass(frozen=True)
class PatchSet:
    patches: np.ndarray  # (..., n, p)
    p: int
    pad: int

    @property
    def n(self) -> int:
        return self.patches.shape[-2]


def patch(window, p: int) -> PatchSet:
    """Split into ``ceil(T/p)`` non-overlapping patches, left-padding as needed."""
    if int(p) != p or p < 1:
        raise ValueError(f"patch size must be a positive integer, got {p!r}")
    x = np.asarray(window, dtype=np.float64)
    T = x.shape[-1]
    n = math.ceil(T / p)
    pad = n * p - T
    xp = _left_pad(x, pad)
    return PatchSet(xp.reshape(x.shape[:-1] + (n, p)), int(p), pad)


def embed(patches, weight: ad.Tensor, bias: ad.Tensor) -> ad.Tensor:
    """Linear patch embedding ``p -> d`` applied row-wise."""
    w_shape = weight.shape
    x = ad.as_tensor(patches)
    if x.shape[-1] != w_shape[0] or bias.shape != (w_shape[1],):
        raise ValueError(f"embed: patches {x.shape} incompatible with weight {w_shape} / bias {bias.shape}")
    return ad.linear(x, weight, bias)


def detect_period(window) -> int:
    """Dominant period from the real FFT amplitude spectrum.

    The DC bin is excluded; ties go to the lowest frequency.  A series with
    no spectral energy outside DC gets period ``T``.
    """
    x = np.asarray(window, dtype=np.float64).ravel()
    T = x.size
    if T < 4:
        raise ValueError(f"period detection needs at least 4 samples, got {T}")
    amp = np.abs(np.fft.rfft(x))[1 : T // 2 + 1]
    scale = np.abs(x).sum() + 1e-300
    if amp.max() <= 1e-10 * scale:
        return T
    freq = int(np.argmax(amp)) + 1
    return int(min(max(math.ceil(T / freq), 2), T))


def align_padding(p: int, P: int) -> int:
    """Smallest ``s >= 0`` with ``p + s`` a multiple of the period ``P``."""
    if p < 1 or P < 1:
        raise ValueError(f"patch size and period must be positive, got p={p}, P={P}")
    return (p + P - 1) // P * P - p


@dataclass(frozen=True)
class EnvPatchSet:
    patches: np.ndarray  # (n, p + s)
    s: int
    period: int


def build_env_patches(window, p: int, s: int, period: int | None = None) -> EnvPatchSet:
    """Windows of length ``p + s`` ending where each patch ends.

    The series is first padded exactly as :func:`patch` does, then padded by a
    further ``s`` samples so the first environmental patch is full length.
    """
    x = np.asarray(window, dtype=np.float64).ravel()
    n = math.ceil(x.size / p)
    xp = _left_pad(x, n * p - x.size + s)
    idx = np.arange(n)[:, None] * p + np.arange(p + s)[None, :]
    return EnvPatchSet(xp[idx], int(s), int(period) if period is not None else int(p + s))


def encode_env(env: EnvPatchSet, d: int, dt: float = 1.0, method: str = "bilinear",
               warm_start: bool = True) -> np.ndarray:
    """Compress each environmental patch into its final LegT memory ``(n, d)``.

    The LegT window is the patch length ``p + s``.  ``A`` and ``B`` are fixed,
    so this is a constant (non-trainable) transform of the patch values.
    The memory is warm-started at the steady state of the patch's first
    value, matching the repeat-first-value padding.
    """
    length = env.patches.shape[-1]
    if d < length:
        warnings.warn(
            f"memory order d={d} is smaller than the environment window {length}; "
            "reconstruction of the window will be coarse",
            stacklevel=2,
        )
    K = compress_kernel(int(d), int(length), float(dt), method, warm_start)
    return env.patches @ K.T


def local_perception(window, p: int, d: int, dt: float = 1.0, method: str = "bilinear") -> np.ndarray:
    """Period-aligned environmental tokens for one (normalized) window."""
    x = np.asarray(window, dtype=np.float64).ravel()
    period = detect_period(x) if x.size >= 4 else x.size
    s = align_padding(p, period)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return encode_env(build_env_patches(x, p, s, period), d, dt, method)


def fuse(tokens, env_tokens) -> ad.Tensor:
    if tuple(np.shape(ad.as_tensor(tokens).data)) != tuple(np.shape(ad.as_tensor(env_tokens).data)):
        raise ValueError(
            f"fuse: token shapes differ: {ad.as_tensor(tokens).shape} vs {ad.as_tensor(env_tokens).shape}"
        )
    return ad.add(tokens, env_tokens)
