"""Delay-reconstruction RMS error of the LegT memory as the order grows.

Prints one row per order for a few random-phase sinusoids and each
discretization, so the half-step floor of the held input is visible.
"""

import argparse
import time

import numpy as np

from flame.legendre import METHODS, build_legt, reconstruction_error


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--orders", type=int, nargs="+", default=[4, 8, 16, 32])
    ap.add_argument("--dt", type=float, default=1 / 2000)
    ap.add_argument("--phases", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    grid = np.linspace(0, 1, 201)
    phases = np.random.default_rng(args.seed).uniform(0, 2 * np.pi, args.phases)
    print(f"{'method':>9} " + " ".join(f"d={d:<9}" for d in args.orders))
    for method in METHODS:
        t0 = time.perf_counter()
        rows = np.array([
            [reconstruction_error(build_legt(d, 1.0), args.dt, lambda t, ph=ph: np.sin(2 * np.pi * t + ph), grid, method)
             for d in args.orders]
            for ph in phases
        ])
        cells = " ".join(f"{v:<11.3e}" for v in rows.mean(axis=0))
        print(f"{method:>9} {cells} ({time.perf_counter() - t0:.1f}s)")


if __name__ == "__main__":
    main()
