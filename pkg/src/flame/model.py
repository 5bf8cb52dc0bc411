"""FLAME model: tokenization -> encoder -> SSD decoder -> enhancer -> flow head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .backbone import CrossAttentionBlock, Decoder, SelfAttentionBlock, mca_enhance, msa_encode
from .flow_head import FlowHead, ForecastDistribution, forecast
from .layers import LayerNorm, Linear, Module
from .tokenizer import NormStats, fuse, instance_normalize, local_perception, patch


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    patch_size: int = 8
    history_tokens: int = 12
    future_tokens: int = 4
    encoder_layers: int = 1
    decoder_layers: int = 1
    coupling_layers: int = 3
    ffn_dim: int = 64
    heads: int = 4
    state_size: int = 16
    ssd_expand: int = 2
    ssd_heads: int = 4
    flow_hidden: int = 64
    s_max: float = 5.0
    alternate_order: bool = False
    env_dt: float = 1.0
    env_method: str = "bilinear"
    norm_eps: float = 1e-5

    @property
    def input_len(self) -> int:
        return self.history_tokens * self.patch_size

    @property
    def output_len(self) -> int:
        return self.future_tokens * self.patch_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


_FULL_SIZE = dict(d_model=256, ffn_dim=512, patch_size=48, history_tokens=12, future_tokens=4,
              encoder_layers=1, heads=4, state_size=16, ssd_expand=2, ssd_heads=8, flow_hidden=448)

PRESETS: dict[str, ModelConfig] = {
    "desk": ModelConfig(),
    "small": ModelConfig(**_FULL_SIZE, decoder_layers=1, coupling_layers=3),
    "base": ModelConfig(**_FULL_SIZE, decoder_layers=3, coupling_layers=5),
    "large": ModelConfig(**_FULL_SIZE, decoder_layers=6, coupling_layers=7),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None
    return replace(cfg, **overrides)


class FlameModel(Module):
    """Channel-independent forecaster over one univariate window at a time.

    Every decoder layer is paired with one cross-attention enhancer block,
    applied after the full SSD stack.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        self.embed = Linear(rng, c.patch_size, c.d_model)
        self.encoder = [SelfAttentionBlock(rng, c.d_model, c.heads, c.ffn_dim) for _ in range(c.encoder_layers)]
        self.decoder = Decoder(rng, c.d_model, c.future_tokens, c.decoder_layers, c.state_size, c.ssd_expand,
                               c.ssd_heads, c.ffn_dim)
        self.enhancer = [CrossAttentionBlock(rng, c.d_model, c.heads, c.ffn_dim) for _ in range(c.decoder_layers)]
        self.final_norm = LayerNorm(c.d_model)
        self.head = FlowHead(rng, c.patch_size, c.d_model, c.coupling_layers, c.flow_hidden, c.s_max,
                             c.alternate_order)

    # -- pipeline stages ----------------------------------------------------

    def normalize(self, history) -> tuple[np.ndarray, NormStats]:
        return instance_normalize(np.atleast_2d(np.asarray(history, dtype=np.float64)), self.config.norm_eps)

    def env_tokens(self, history_norm: np.ndarray) -> np.ndarray:
        c = self.config
        return np.stack([local_perception(w, c.patch_size, c.d_model, c.env_dt, c.env_method) for w in history_norm])

    def encode(self, history_norm: np.ndarray) -> ad.Tensor:
        c = self.config
        tokens = self.embed(patch(history_norm, c.patch_size).patches)
        H = fuse(tokens, self.env_tokens(history_norm))
        return msa_encode(H, self.encoder)

    def decode(self, H_enc: ad.Tensor) -> ad.Tensor:
        F = self.decoder(H_enc)
        F = mca_enhance(F, H_enc, self.enhancer)
        return self.final_norm(F)

    def condition(self, history_norm: np.ndarray) -> ad.Tensor:
        return self.decode(self.encode(history_norm))

    # -- objectives and inference -------------------------------------------

    def token_log_prob(self, history, future) -> ad.Tensor:
        """``(B, l)`` log-likelihood of each normalized future patch."""
        c = self.config
        hist_n, stats = self.normalize(history)
        fut = np.atleast_2d(np.asarray(future, dtype=np.float64))
        if fut.shape[-1] != c.output_len:
            raise ValueError(f"future window has length {fut.shape[-1]}, expected {c.output_len}")
        target = ((fut - stats.mean) / (stats.std + stats.eps)).reshape(fut.shape[0], c.future_tokens, c.patch_size)
        return self.head.log_prob(target, self.condition(hist_n))

    def nll(self, history, future) -> ad.Tensor:
        """Mean negative log-likelihood per forecast token."""
        return ad.mul(ad.mean(self.token_log_prob(history, future)), -1.0)

    def forecast(self, history, horizon: int | None, n_samples: int, rng: np.random.Generator,
                 noise: np.ndarray | None = None) -> ForecastDistribution:
        c = self.config
        hist_n, stats = self.normalize(history)
        F = self.condition(hist_n)
        return forecast(F, self.head, n_samples, c.output_len if horizon is None else horizon, stats, rng, noise)


def count_parameters(config: ModelConfig) -> int:
    """Trainable parameter count of a model built from ``config``."""
    return FlameModel(config, seed=0).num_parameters()
