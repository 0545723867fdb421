"""Time the numba kernels against the pure-numpy twin.

Each backend runs in its own interpreter, because the choice is fixed at
import time by ``NGDENOISE_KERNELS``. Every case is warmed up once (so numba
compilation is excluded) and the best of ``--repeat`` runs is reported.

    python3 benchmarks/bench_backends.py [--repeat 3] [--size 64] [--batch 2]
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

BACKENDS = ("numba", "numpy")


def _best(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def worker(repeat, size, batch):
    import numpy as np
    from threadpoolctl import threadpool_limits

    from ngdenoise.nncore import _backend
    from ngdenoise.train import TrainConfig, TrainState, train_step

    k = _backend.kernels
    rng = np.random.default_rng(0)
    n, c, pad = batch, 32, 1
    hp = wp = size + 2 * pad
    region = rng.standard_normal((n * hp * wp, c)).astype(np.float32)
    bias = rng.standard_normal(c).astype(np.float32)
    nhwc = rng.standard_normal((n, size, size, c)).astype(np.float32)
    pooled, arg = k.channel_pool(nhwc)
    gpool = rng.standard_normal(pooled.shape).astype(np.float32)

    cfg = TrainConfig(batch=batch, patch=size, seed=0, validate_every=0)
    state = TrainState(cfg)
    clean = [rng.random((size, size, 3)) for _ in range(batch)]
    img = rng.random((size, size, 3))

    cases = {
        "ring_epilogue": lambda: k.ring_epilogue(region.copy(), bias, 0.2, True, n, hp, wp, pad),
        "ring_leaky_grad": lambda: k.ring_leaky_grad(region.copy(), region, 0.2, n, hp, wp, pad),
        "channel_pool": lambda: k.channel_pool(nhwc),
        "channel_pool_grad": lambda: k.channel_pool_grad(gpool, arg, c),
        "denoise": lambda: state.model.denoise(img),
        "train_step": lambda: train_step(state, clean),
    }
    with threadpool_limits(1):
        out = {name: _best(fn, repeat) for name, fn in cases.items()}
    out["backend"] = _backend.BACKEND
    print(json.dumps(out))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--batch", type=int, default=2)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args(argv)
    if args.worker:
        worker(args.repeat, args.size, args.batch)
        return 0

    results = {}
    for backend in BACKENDS:
        env = dict(os.environ, NGDENOISE_KERNELS=backend)
        proc = subprocess.run([sys.executable, __file__, "--worker", "--repeat", str(args.repeat),
                               "--size", str(args.size), "--batch", str(args.batch)],
                              env=env, capture_output=True, text=True, check=True)
        results[backend] = json.loads(proc.stdout.strip().splitlines()[-1])
        if results[backend]["backend"] != backend:
            print(f"warning: asked for {backend}, got {results[backend]['backend']}", file=sys.stderr)

    print(f"batch {args.batch}, {args.size}x{args.size}, single thread, best of {args.repeat}")
    print(f"{'case':<20} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for name in results["numba"]:
        if name == "backend":
            continue
        a, b = results["numba"][name] * 1e3, results["numpy"][name] * 1e3
        print(f"{name:<20} {a:>10.2f} {b:>10.2f} {b / a:>7.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
