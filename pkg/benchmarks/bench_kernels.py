"""Numba vs numpy timings for every hot kernel, plus an optional end-to-end run.

    python benchmarks/bench_kernels.py            # kernel table
    python benchmarks/bench_kernels.py --e2e      # also a short desk training per backend

The end-to-end part runs each backend in a fresh interpreter, since the
backend is fixed at import time by CDT3_DISABLE_NUMBA.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from cdt3 import kernels as K
from cdt3._accel import NUMBA_OK


def _inputs(rng):
    x = rng.normal(size=(4 * 64, 64))
    y = K.softmax_rows_np(x)
    g = rng.normal(size=x.shape)
    xh = rng.normal(size=(64, 32))
    gain = rng.normal(size=32)
    w = (2 * rng.integers(1, 40, size=25)).astype(np.int64)
    u = rng.random((1000, 7))
    draws = K.sample_without_replacement_np(896, u)
    weight = rng.random(896)
    return {
        "softmax_rows": (x,),
        "softmax_rows_grad": (y, g),
        "layernorm_fwd": (xh, gain, np.zeros(32), 1e-5),
        "layernorm_bwd": (g[:64, :32].copy(), xh, np.ones(64), gain),
        "gelu_fwd": (x,),
        "gelu_bwd": (x, g),
        "sample_without_replacement": (896, u),
        "draw_weight_sums": (draws, weight),
        "signed_rank_null": (w,),
    }


def bench_kernels(repeat: int = 5) -> list[tuple[str, float, float]]:
    rng = np.random.default_rng(0)
    args = _inputs(rng)
    rows = []
    for name, (f_np, f_nb) in K.KERNEL_PAIRS.items():
        a = args[name]
        f_nb(*a)  # compile outside the timed region
        n = 20
        t_np = min(timeit.repeat(lambda: f_np(*a), number=n, repeat=repeat)) / n
        t_nb = min(timeit.repeat(lambda: f_nb(*a), number=n, repeat=repeat)) / n
        rows.append((name, t_np, t_nb))
    return rows


_E2E = """
import time
from cdt3._accel import backend
from cdt3.config import default_config
from cdt3.pipeline import synthesize
from cdt3.training import PhaseConfig, train_stage1
cfg = default_config("desk")
_, data = synthesize(cfg)
phase = PhaseConfig(epochs_max=2, patience=2, lr_map={"vce_n": 3e-3}, batch_size=8)
t = time.perf_counter()
train_stage1(cfg.model, data.split("train"), data.split("val"), phase, 0)
print(backend(), time.perf_counter() - t)
"""


def bench_e2e() -> list[tuple[str, float]]:
    out = []
    for flag in ("1", "0"):
        env = dict(os.environ, CDT3_DISABLE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", _E2E], env=env, capture_output=True, text=True, check=True)
        name, secs = res.stdout.split()[-2:]
        out.append((name, float(secs)))
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--e2e", action="store_true", help="also time two stage-1 epochs per backend")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not NUMBA_OK:
        print("numba unavailable or disabled; both columns time the numpy path", file=sys.stderr)
    print(f"{'kernel':<28}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name, t_np, t_nb in bench_kernels(args.repeat):
        print(f"{name:<28}{t_np * 1e6:>12.1f}{t_nb * 1e6:>12.1f}{t_np / t_nb:>10.2f}")
    if args.e2e:
        print()
        for name, secs in bench_e2e():
            print(f"two stage-1 epochs, {name:<6} backend: {secs:.2f} s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
