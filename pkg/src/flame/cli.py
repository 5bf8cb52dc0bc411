"""Command line entry point: ``flame {train,forecast,eval,legendre-demo,inspect}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import legendre
from .data import load_csv, split, window_matrix
from .metrics import evaluate
from .model import PRESETS, count_parameters
from .training import TrainConfig, load_checkpoint, train

QUANTILES = (0.1, 0.5, 0.9)


@dataclass(frozen=True)
class RunConfig:
    """Schema of the JSON file passed to ``flame train --config``."""

    data: str
    output: str
    columns: list[str] | None = None
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    stride: int = 1
    val_stride: int = 1
    train: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(raw, dict):
            raise ValueError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        missing = {"data", "output"} - set(raw)
        if missing:
            raise ValueError(f"missing config keys: {sorted(missing)}")
        base = Path(path).parent
        raw["data"] = str((base / raw["data"]).resolve()) if not Path(raw["data"]).is_absolute() else raw["data"]
        raw["output"] = str((base / raw["output"]).resolve()) if not Path(raw["output"]).is_absolute() else raw["output"]
        if "split" in raw:
            raw["split"] = tuple(raw["split"])
        cfg = cls(**raw)
        TrainConfig.from_dict(cfg.train)  # validate early
        if cfg.stride < 1 or cfg.val_stride < 1:
            raise ValueError("strides must be positive")
        return cfg


def _select(dataset, columns):
    if columns:
        missing = [c for c in columns if c not in dataset.channels]
        if missing:
            raise ValueError(f"columns not found in data: {missing}")
        dataset.channels = {c: dataset.channels[c] for c in columns}
    return dataset


def cmd_train(args) -> dict:
    cfg = RunConfig.from_file(args.config)
    overrides = dict(cfg.train)
    if args.preset:
        overrides["preset"] = args.preset
    if args.seed is not None:
        overrides["seed"] = args.seed
    tcfg = TrainConfig.from_dict(overrides)
    dataset = _select(load_csv(cfg.data), cfg.columns)
    tr, va, _ = split(dataset, cfg.split, min_len=tcfg.window_len)
    result = train(tcfg, window_matrix(tr, tcfg.window_len, cfg.stride),
                   window_matrix(va, tcfg.window_len, cfg.val_stride), out_dir=cfg.output)
    return {
        "output": cfg.output,
        "best_step": result.best_step,
        "initial_val_nll": result.initial_val,
        "best_val_nll": result.best_val,
        "final_train_nll": result.losses[-1],
    }


def _check_horizon(model, horizon: int) -> None:
    limit = model.config.output_len
    if horizon < 1 or horizon > limit:
        raise ValueError(f"horizon {horizon} outside [1, {limit}] (forecast tokens x patch size)")


def cmd_forecast(args) -> dict:
    model, _ = load_checkpoint(args.model)
    _check_horizon(model, args.horizon)
    dataset = load_csv(args.input)
    n_in = model.config.input_len
    rng = np.random.default_rng(args.seed)
    out = {"horizon": args.horizon, "samples": args.samples, "seed": args.seed, "channels": {}}
    for name, values in dataset.channels.items():
        if values.size < n_in:
            raise ValueError(f"channel {name!r} has {values.size} values; the model needs {n_in}")
        dist = model.forecast(values[-n_in:], args.horizon, args.samples, rng)
        samples = dist.samples[:, 0]
        entry = {
            "point": dist.point[0].tolist(),
            "quantiles": {str(q): np.quantile(samples, q, axis=0).tolist() for q in QUANTILES},
        }
        if args.raw:
            entry["raw_samples"] = samples.tolist()
        out["channels"][name] = entry
    return out


def cmd_eval(args) -> dict:
    model, _ = load_checkpoint(args.model)
    _check_horizon(model, args.horizon)
    dataset = load_csv(args.input)
    if args.split == "test":
        _, _, dataset = split(dataset, tuple(args.ratios), min_len=model.config.input_len + args.horizon)
    windows = window_matrix(dataset, model.config.input_len + args.horizon, args.stride)
    if len(windows) == 0:
        raise ValueError("input is shorter than one evaluation window")
    report = evaluate(model, windows, args.horizon, args.samples, np.random.default_rng(args.seed))
    return report.to_dict()


def cmd_legendre_demo(args) -> dict:
    dataset = load_csv(args.input)
    name = args.column or dataset.names[0]
    if name not in dataset.channels:
        raise ValueError(f"column {name!r} not found")
    series = dataset.channels[name]
    if args.variant == "legs":
        op = legendre.build_legs(args.order)
        state = legendre.compress(op, args.dt, series, args.method)
        return {"variant": "legs", "order": args.order, "steps": state.steps, "memory": state.m.tolist(),
                "reconstruction": None, "note": "delay reconstruction is defined for LegT only"}
    op = legendre.build_legt(args.order, args.theta)
    grid = np.linspace(0.0, args.theta, args.grid)
    state = legendre.compress(op, args.dt, series, args.method)
    times = args.dt * np.arange(series.size)
    if times[-1] < args.theta:
        raise ValueError(f"series spans {times[-1]} time units, shorter than theta={args.theta}")
    truth = np.interp(times[-1] - grid, times, series)
    recon = legendre.reconstruct(state, op, grid)
    rows = [{"delay": float(g), "truth": float(t), "reconstruction": float(r), "abs_error": float(abs(r - t))}
            for g, t, r in zip(grid, truth, recon)]
    rms = legendre.reconstruction_error(op, args.dt, series, grid, args.method)
    return {"variant": "legt", "order": args.order, "theta": args.theta, "dt": args.dt, "method": args.method,
            "rms_error": rms, "table": rows}


def cmd_inspect(args) -> dict:
    if args.preset:
        cfg = PRESETS[args.preset]
        return {"preset": args.preset, "model_config": cfg.to_dict(), "parameter_count": count_parameters(cfg)}
    model, manifest = load_checkpoint(args.model)
    manifest = dict(manifest)
    manifest["parameter_count"] = model.num_parameters()
    return manifest


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flame", description="Legendre-memory flow forecaster")
    parser.add_argument("--output-file", "-o", help="write the JSON result here instead of stdout")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("forecast", help="sample forecasts for the end of each channel")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--raw", action="store_true", help="include raw samples")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("eval", help="score a model on every window of a CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=("all", "test"), default="all")
    p.add_argument("--ratios", type=float, nargs=3, default=(0.6, 0.2, 0.2))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("legendre-demo", help="delay-reconstruction error table for a CSV series")
    p.add_argument("--variant", choices=("legt", "legs"), default="legt")
    p.add_argument("--order", type=int, required=True)
    p.add_argument("--theta", type=float, default=1.0)
    p.add_argument("--dt", type=float, default=1.0)
    p.add_argument("--method", choices=legendre.METHODS, default="euler")
    p.add_argument("--grid", type=int, default=11)
    p.add_argument("--column")
    p.add_argument("--input", required=True)
    p.add_argument("--report", choices=("json",), default="json")
    p.set_defaults(func=cmd_legendre_demo)

    p = sub.add_parser("inspect", help="echo a checkpoint manifest or preset with its parameter count")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--model")
    g.add_argument("--preset", choices=sorted(PRESETS))
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        result = args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    text = json.dumps(result, indent=2)
    if args.output_file:
        Path(args.output_file).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
