"""Likelihood training, AdamW, and checkpoint I/O."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .model import FlameModel, ModelConfig, preset

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
TENSORS = "tensors.bin"


class TrainingDivergence(FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    preset: str = "desk"
    history_tokens: int = 12
    future_tokens: int = 4
    patch_size: int = 8
    lr: float = 1e-3
    lr_step_every: int = 200
    lr_factor: float = 0.5
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 32
    max_steps: int = 500
    eval_every: int = 50
    grad_clip: float = 1.0
    seed: int = 0
    model_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("history_tokens", "future_tokens", "patch_size", "batch_size", "max_steps", "eval_every",
                     "lr_step_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.lr > 0 or not 0 < self.lr_factor <= 1:
            raise ValueError("lr must be positive and lr_factor in (0, 1]")

    def model_config(self) -> ModelConfig:
        return preset(self.preset, history_tokens=self.history_tokens, future_tokens=self.future_tokens,
                      patch_size=self.patch_size, **self.model_overrides)

    @property
    def window_len(self) -> int:
        return (self.history_tokens + self.future_tokens) * self.patch_size

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["betas"] = list(self.betas)
        return out


# -- objective --------------------------------------------------------------


def nll_loss(model: FlameModel, history, future) -> ad.Tensor:
    """Mean over forecast tokens of ``-log p(target | condition)``."""
    return model.nll(history, future)


def split_window(model: FlameModel, windows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = model.config.input_len
    return windows[:, :n], windows[:, n : n + model.config.output_len]


def evaluate_nll(model: FlameModel, windows: np.ndarray, batch_size: int = 256) -> float:
    total, count = 0.0, 0
    for start in range(0, len(windows), batch_size):
        h, f = split_window(model, windows[start : start + batch_size])
        lp = model.token_log_prob(h, f).data
        total += -lp.sum()
        count += lp.size
    return total / count


# -- optimizer --------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
              weight_decay: float = 0.0) -> AdamState:
    """AdamW: bias-corrected Adam plus decoupled weight decay, updating ``params`` in place."""
    b1, b2 = betas
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= lr * weight_decay * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


def step_lr(base: float, step: int, every: int, factor: float) -> float:
    return base * factor ** (step // every)


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(model: FlameModel, directory, step: int = 0, seed: int = 0,
                    train_config: TrainConfig | None = None, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` and ``tensors.bin`` (little-endian float64, manifest order)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    named = list(model.named_parameters())
    manifest = {
        "format": "flame-checkpoint/1",
        "model_config": model.config.to_dict(),
        "train_config": train_config.to_dict() if train_config is not None else None,
        "seed": seed,
        "step": step,
        "parameter_count": int(sum(p.data.size for _, p in named)),
        "tensors": [{"name": n, "shape": list(p.shape)} for n, p in named],
    }
    if extra:
        manifest.update(extra)
    blob = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for _, p in named)
    (directory / TENSORS).write_bytes(blob)
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return directory


def load_checkpoint(directory) -> tuple[FlameModel, dict]:
    directory = Path(directory)
    manifest_path = directory / MANIFEST
    if not manifest_path.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {directory}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    model = FlameModel(ModelConfig.from_dict(manifest["model_config"]), seed=manifest.get("seed", 0))
    flat = np.frombuffer((directory / TENSORS).read_bytes(), dtype="<f8")
    params = dict(model.named_parameters())
    offset = 0
    for entry in manifest["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in params or params[name].shape != shape:
            raise ValueError(f"checkpoint tensor {name} {shape} does not match the model")
        size = int(np.prod(shape))
        params[name].data = flat[offset : offset + size].reshape(shape).astype(np.float64)
        offset += size
    if offset != flat.size:
        raise ValueError(f"{TENSORS} holds {flat.size} values, manifest describes {offset}")
    return model, manifest


# -- loop -------------------------------------------------------------------


@dataclass
class TrainResult:
    model: FlameModel
    losses: list[float]
    val_history: list[tuple[int, float]]
    best_step: int
    best_val: float
    initial_val: float


def train(config: TrainConfig, train_windows: np.ndarray, val_windows: np.ndarray | None = None,
          out_dir=None) -> TrainResult:
    """Minimize token NLL with AdamW, step-decayed learning rate and clipping.

    Batches are drawn with a seeded shuffle over (channel, window) samples.
    The returned model holds the best-by-validation parameters.
    """
    train_windows = np.asarray(train_windows, dtype=np.float64)
    if train_windows.ndim != 2 or train_windows.shape[0] == 0:
        raise ValueError("training needs a non-empty (windows, length) array")
    if train_windows.shape[1] != config.window_len:
        raise ValueError(f"windows have length {train_windows.shape[1]}, expected {config.window_len}")
    val_windows = train_windows if val_windows is None or len(val_windows) == 0 else np.asarray(val_windows)
    model = FlameModel(config.model_config(), seed=config.seed)
    rng = np.random.default_rng(config.seed + 1)
    state = AdamState()
    losses: list[float] = []
    initial_val = evaluate_nll(model, val_windows)
    best_val, best_step = initial_val, 0
    best_params = [p.data.copy() for p in model.parameters()]
    val_history = [(0, initial_val)]
    order = rng.permutation(len(train_windows))
    cursor = 0
    for step in range(1, config.max_steps + 1):
        if cursor + config.batch_size > len(order):
            order, cursor = rng.permutation(len(train_windows)), 0
        batch = train_windows[order[cursor : cursor + config.batch_size]]
        cursor += config.batch_size
        h, f = split_window(model, batch)
        with ad.Tape() as tape:
            loss = nll_loss(model, h, f)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDivergence(step, value)
        params = model.parameters()
        model.zero_grad()
        grads = _aligned_grads(tape, loss, params)
        clip_grad_norm(grads, config.grad_clip)
        lr = step_lr(config.lr, step - 1, config.lr_step_every, config.lr_factor)
        adam_step(params, grads, state, lr, config.betas, config.adam_eps, config.weight_decay)
        losses.append(value)
        if step % config.eval_every == 0 or step == config.max_steps:
            val = evaluate_nll(model, val_windows)
            val_history.append((step, val))
            log.info("step %d loss %.4f val %.4f lr %.2e", step, value, val, lr)
            if val < best_val:
                best_val, best_step = val, step
                best_params = [p.data.copy() for p in params]
    for p, data in zip(model.parameters(), best_params):
        p.data = data
    if out_dir is not None:
        save_checkpoint(model, out_dir, step=best_step, seed=config.seed, train_config=config,
                        extra={"best_val_nll": best_val})
        write_loss_log(Path(out_dir) / "loss.csv", losses, val_history)
    return TrainResult(model, losses, val_history, best_step, best_val, initial_val)


def _aligned_grads(tape: ad.Tape, loss: ad.Tensor, params: list[ad.Tensor]) -> list[np.ndarray]:
    by_id = {id(p): g for p, g in zip(tape.parameters, ad.backward(tape, loss))}
    return [by_id.get(id(p), np.zeros_like(p.data)) for p in params]


def write_loss_log(path: Path, losses: list[float], val_history: list[tuple[int, float]]) -> None:
    val = dict(val_history)
    lines = ["step,train_nll,val_nll"]
    for i, v in enumerate(losses, start=1):
        lines.append(f"{i},{v!r},{val[i]!r}" if i in val else f"{i},{v!r},")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
