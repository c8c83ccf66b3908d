"""Serve a predictor over stdin/stdout with the DNFP frame protocol.

    python -m dnfeat.peer --kind analytic --mu 0 --sigma2 1
    python -m dnfeat.peer --kind model --model runs/x/predictor

The ``echo``, ``badshape``, ``exit`` and ``hang`` kinds misbehave on
purpose; they exist to exercise the client's error handling.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from .predictor import (
    AnalyticGaussianPredictor,
    ConstantPredictor,
    NoisePredictor,
    TinyDenoiser,
    serve,
)
from .schedule import DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T, make_linear_schedule


class _Echo(NoisePredictor):
    def predict_noise(self, x, t, schedule):
        return np.asarray(x)


class _BadShape(NoisePredictor):
    def predict_noise(self, x, t, schedule):
        return np.asarray(x).ravel()[:-1] if np.size(x) > 1 else np.zeros(2)


class _Exit(NoisePredictor):
    def predict_noise(self, x, t, schedule):
        sys.stderr.write("peer giving up\n")
        sys.stderr.flush()
        sys.exit(3)


class _Hang(NoisePredictor):
    def predict_noise(self, x, t, schedule):
        time.sleep(3600)


def build(args) -> NoisePredictor:
    if args.kind == "analytic":
        return AnalyticGaussianPredictor(args.mu, args.sigma2)
    if args.kind == "constant":
        return ConstantPredictor(args.value)
    if args.kind == "model":
        if not args.model:
            raise SystemExit("--model is required for --kind model")
        return TinyDenoiser.load(args.model)
    return {"echo": _Echo, "badshape": _BadShape, "exit": _Exit, "hang": _Hang}[args.kind]()


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python -m dnfeat.peer", description=__doc__.splitlines()[0])
    ap.add_argument("--kind", default="analytic",
                    choices=["analytic", "constant", "model", "echo", "badshape", "exit", "hang"])
    ap.add_argument("--mu", type=float, default=0.0)
    ap.add_argument("--sigma2", type=float, default=1.0)
    ap.add_argument("--value", type=float, default=0.0)
    ap.add_argument("--model")
    ap.add_argument("--T", type=int, default=DEFAULT_T)
    ap.add_argument("--beta-start", type=float, default=DEFAULT_BETA_START)
    ap.add_argument("--beta-end", type=float, default=DEFAULT_BETA_END)
    args = ap.parse_args(argv)
    predictor = build(args)
    schedule = make_linear_schedule(args.T, args.beta_start, args.beta_end)
    serve(predictor, schedule, sys.stdin.buffer, sys.stdout.buffer)
    return 0


if __name__ == "__main__":
    sys.exit(main())
