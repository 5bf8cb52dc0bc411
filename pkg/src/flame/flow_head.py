"""Conditional autoregressive flow over one forecast patch.

Each coupling layer maps noise ``z`` (p dims) to ``x`` given a condition
token ``o`` (d dims) by the per-dimension affine rule

    x_j = z_j * exp(s_j) + t_j,    s_j = s_max * tanh(s_hat_j / s_max)

where ``(s_hat_j, t_j)`` come from a masked MLP that sees ``o`` and the
already generated outputs ``x_1 .. x_{j-1}`` only.  Density evaluation
(the inverse direction) is therefore a single parallel pass per layer while
sampling runs dimension by dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .layers import Module
from .tokenizer import NormStats, denormalize

LOG_2PI = float(np.log(2 * np.pi))


def build_mask(p: int, d: int) -> np.ndarray:
    """``(p+d) x (p+d)`` connectivity with ``M[n,k] = 0`` iff ``n < k <= p`` (1-based)."""
    if p < 1 or d < 1:
        raise ValueError(f"p and d must be positive, got p={p}, d={d}")
    n = np.arange(1, p + d + 1)[:, None]
    k = np.arange(1, p + d + 1)[None, :]
    return np.where((n < k) & (k <= p), 0, 1).astype(np.int8)


def strict_mask(p: int, d: int) -> np.ndarray:
    """Input-to-output connectivity ``(p+d) x p`` actually used by a conditioner.

    Noise input ``i`` feeds output ``j`` only when ``i < j``; the condition
    rows are always on.  This is the causal direction of ``build_mask``
    (earlier dims visible), with the diagonal removed so the affine
    update of dim ``j`` never depends on itself.
    """
    M = build_mask(p, d).astype(np.int8)
    noise = M[:p, :p].T.copy()
    np.fill_diagonal(noise, 0)
    return np.vstack([noise, M[p:, :p]])


def _degrees(p: int, hidden: int) -> np.ndarray:
    # hidden unit of degree m sees noise dims 1..m; degree 0 sees the condition only
    return np.arange(hidden) % p


class CouplingLayer(Module):
    def __init__(self, rng: np.random.Generator, p: int, d: int, hidden: int, s_max: float = 5.0,
                 order: np.ndarray | None = None):
        self.p, self.d, self.hidden, self.s_max = p, d, hidden, s_max
        # order[j] is the position of noise dim j in the autoregressive order
        self.order = np.arange(p) if order is None else np.asarray(order)
        pos = self.order + 1
        deg = _degrees(p, hidden)
        m_in = np.vstack([pos[:, None] <= deg[None, :], np.ones((d, hidden), dtype=bool)])
        m_out = deg[:, None] < pos[None, :]
        self.mask_in = m_in.astype(np.float64)
        self.mask_out = np.hstack([m_out, m_out]).astype(np.float64)
        self.w1 = ad.parameter(rng.normal(0.0, 1.0 / np.sqrt(p + d), size=(p + d, hidden)))
        self.b1 = ad.parameter(np.zeros(hidden))
        # zero output layer: the layer starts as the identity map
        self.w2 = ad.parameter(np.zeros((hidden, 2 * p)))
        self.b2 = ad.parameter(np.zeros(2 * p))

    def connectivity(self) -> np.ndarray:
        """Binary ``(p+d) x p`` matrix: does input ``n`` reach output ``k``?"""
        return ((self.mask_in @ self.mask_out[:, : self.p]) > 0).astype(np.int8)

    def conditioner(self, x, o) -> tuple[ad.Tensor, ad.Tensor]:
        """Clamped log-scale ``s`` and shift ``t``, each ``(..., p)``."""
        inp = ad.concat([ad.as_tensor(x), ad.as_tensor(o)], axis=-1)
        hid = ad.tanh(ad.masked_linear(inp, self.w1, self.mask_in, self.b1))
        out = ad.masked_linear(hid, self.w2, self.mask_out, self.b2)
        p = self.p
        s_hat = out[..., :p]
        shift = out[..., p:]
        s = ad.mul(ad.tanh(ad.mul(s_hat, 1.0 / self.s_max)), self.s_max)
        return s, shift

    def forward(self, z, o) -> tuple[np.ndarray, np.ndarray]:
        """Noise -> sample (sequential over dims).  Returns ``(x, logdet)``."""
        z = np.asarray(z, dtype=np.float64)
        o = np.asarray(o, dtype=np.float64)
        x = np.zeros_like(z)
        s = np.zeros_like(z)
        for j in np.argsort(self.order):
            s_all, t_all = self.conditioner(x, o)
            s[..., j] = s_all.data[..., j]
            x[..., j] = z[..., j] * np.exp(s[..., j]) + t_all.data[..., j]
        return x, s.sum(axis=-1)

    def inverse(self, x, o) -> tuple[ad.Tensor, ad.Tensor]:
        """Sample -> noise in one pass.  Returns ``(z, logdet)`` with logdet = -sum(s)."""
        x = ad.as_tensor(x)
        s, shift = self.conditioner(x, o)
        z = ad.mul(ad.sub(x, shift), ad.exp(ad.mul(s, -1.0)))
        return z, ad.mul(ad.sum(s, axis=-1), -1.0)


def coupling_forward(layer: CouplingLayer, z, o):
    return layer.forward(z, o)


def coupling_inverse(layer: CouplingLayer, x, o):
    z, logdet = layer.inverse(x, o)
    return z.data, logdet.data


class FlowHead(Module):
    """``f_K o ... o f_1`` applied to Gaussian noise, conditioned per token."""

    def __init__(self, rng: np.random.Generator, p: int, d: int, n_layers: int, hidden: int,
                 s_max: float = 5.0, alternate_order: bool = False):
        if n_layers < 1:
            raise ValueError("flow head needs at least one coupling layer")
        self.p, self.d = p, d
        self.layers = []
        for k in range(n_layers):
            order = np.arange(p)[::-1].copy() if (alternate_order and k % 2) else None
            self.layers.append(CouplingLayer(rng, p, d, hidden, s_max, order))

    def forward(self, z, o) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(z, dtype=np.float64)
        total = np.zeros(x.shape[:-1])
        for layer in self.layers:
            x, ld = layer.forward(x, o)
            total = total + ld
        return x, total

    def inverse(self, x, o) -> tuple[ad.Tensor, ad.Tensor]:
        z = ad.as_tensor(x)
        total = None
        for layer in reversed(self.layers):
            z, ld = layer.inverse(z, o)
            total = ld if total is None else ad.add(total, ld)
        return z, total

    def log_prob(self, x, o) -> ad.Tensor:
        """``log p(x | o)`` per row: base log-density of the inverted noise plus
        the inverse log-determinants (``-sum_k sum_j s``)."""
        z, inv_logdet = self.inverse(x, o)
        return ad.add(ad.sum(ad.gaussian_logpdf(z), axis=-1), inv_logdet)

    def sample(self, o, n_samples: int, rng: np.random.Generator, noise: np.ndarray | None = None) -> np.ndarray:
        """``(n_samples, ..., p)`` draws conditioned on ``o`` of shape ``(..., d)``.

        ``noise`` optionally supplies the base draws (same shape as the output).
        """
        o = np.asarray(o, dtype=np.float64)
        shape = (n_samples,) + o.shape[:-1] + (self.p,)
        if n_samples == 0:
            return np.zeros(shape)
        if noise is None:
            eps = rng.standard_normal(shape)
        else:
            eps = np.asarray(noise, dtype=np.float64)
            if eps.shape != shape:
                raise ValueError(f"noise shape {eps.shape} does not match {shape}")
        cond = np.broadcast_to(o, (n_samples,) + o.shape)
        x, _ = self.forward(eps, cond)
        return x


def sample(head: FlowHead, o, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    return head.sample(o, n_samples, rng)


def log_prob(head: FlowHead, target, o) -> float | np.ndarray:
    lp = head.log_prob(target, o).data
    return float(lp) if lp.ndim == 0 else lp


@dataclass(frozen=True)
class ForecastDistribution:
    samples: np.ndarray  # (S, ..., L) after flattening/truncation
    point: np.ndarray  # (..., L)
    horizon: int

    def quantile(self, q) -> np.ndarray:
        return np.quantile(self.samples, q, axis=0)


def forecast(F_enh, head: FlowHead, n_samples: int, horizon: int, norm_stats: NormStats | None,
             rng: np.random.Generator, noise: np.ndarray | None = None) -> ForecastDistribution:
    """Sample every forecast token independently, flatten, truncate to ``horizon``.

    ``F_enh`` is ``(l, d)`` or ``(B, l, d)``; samples come back as
    ``(S, L)`` or ``(S, B, L)`` in the original (denormalized) scale.
    """
    F = np.asarray(ad.as_tensor(F_enh).data)
    l = F.shape[-2]
    if horizon > l * head.p:
        raise ValueError(f"horizon {horizon} exceeds the {l} forecast tokens x patch size {head.p}")
    if horizon < 1:
        raise ValueError(f"horizon must be positive, got {horizon}")
    draws = head.sample(F, n_samples, rng, noise)  # (S, ..., l, p)
    flat = draws.reshape(draws.shape[:-2] + (l * head.p,))[..., :horizon]
    if norm_stats is not None:
        # move the sample axis behind the batch axes for denormalize, then back
        moved = np.moveaxis(flat, 0, -2) if flat.ndim > 2 else flat
        moved = denormalize(moved, norm_stats)
        flat = np.moveaxis(moved, -2, 0) if flat.ndim > 2 else moved
    point = flat.mean(axis=0) if n_samples > 0 else np.full(flat.shape[1:], np.nan)
    return ForecastDistribution(flat, point, horizon)
