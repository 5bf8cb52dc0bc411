"""Train the desk preset on a noisy sine and compare it against persistence.

Writes the checkpoint and loss log to --out and prints a JSON summary.
"""

import argparse
import json
import time

import numpy as np

from flame.data import Dataset, split, synth, window_matrix
from flame.metrics import crps_samples, evaluate
from flame.model import FlameModel
from flame.training import TrainConfig, evaluate_nll, train


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--samples", type=int, default=100)
    ap.add_argument("--length", type=int, default=4800)
    ap.add_argument("--period", type=float, default=96)
    ap.add_argument("--noise", type=float, default=0.1)
    args = ap.parse_args(argv)

    data = Dataset({"sine": synth("sine", args.length, seed=args.seed, period=args.period, noise=args.noise)})
    cfg = TrainConfig(preset="desk", max_steps=args.steps, seed=args.seed)
    tr, va, te = split(data, (0.6, 0.2, 0.2), min_len=cfg.window_len)

    t0 = time.perf_counter()
    res = train(cfg, window_matrix(tr, cfg.window_len, 1), window_matrix(va, cfg.window_len, 4), out_dir=args.out)
    elapsed = time.perf_counter() - t0

    model = res.model
    c = model.config
    tr_w = window_matrix(tr, cfg.window_len, 4)
    te_w = window_matrix(te, cfg.window_len, 1)
    rep = evaluate(model, te_w, c.output_len, args.samples, np.random.default_rng(args.seed))
    last = np.broadcast_to(te_w[:, c.input_len - 1 : c.input_len], te_w[:, c.input_len :].shape)
    summary = {
        "train_seconds": round(elapsed, 1),
        "initial_train_nll": evaluate_nll(FlameModel(c, seed=cfg.seed), tr_w),
        "final_train_nll": evaluate_nll(model, tr_w),
        "test_crps": rep.crps,
        "persistence_crps": float(crps_samples(last[None], te_w[:, c.input_len :]).mean()),
        "test_mse": rep.mse,
        "test_variance": float(te.channels["sine"].var()),
        "parameters": model.num_parameters(),
    }
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
