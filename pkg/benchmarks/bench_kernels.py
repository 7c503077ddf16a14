"""Compare the numba and numpy kernel implementations.

Times each hot kernel on toy-DiT-sized inputs and one full forward pass per
backend mode, and checks that both backends agree numerically.

    python benchmarks/bench_kernels.py [--repeat 200] [--json out.json]

Each backend mode needs its own process (the env flag is read at import), so
forward passes are timed in subprocesses.
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from rf_transfer.numerics import RngState, get_kernels


def _inputs():
    r = RngState(0)
    tokens, heads, hd, d = 72, 4, 16, 64
    return {
        "softmax_rows": (r.fork(1).normal((tokens, tokens)) * 3,),
        "layer_norm_rows": (r.fork(2).normal((tokens, d)), np.ones(d), np.zeros(d), 1e-6),
        "gelu": (r.fork(3).normal((tokens, 2 * d)),),
        "attention": tuple(r.fork(4 + i).normal((tokens, hd)) for i in range(3)) + (0.25,),
        "attention_expanded": (
            *(r.fork(7 + i).normal((tokens, hd)) for i in range(3)),
            r.fork(10).normal((30, hd)), r.fork(11).normal((30, hd)),
            np.arange(tokens) % 2 == 0, 0.25,
        ),
        "rng_bits": (np.uint64(12345), 0, 4096),
    }


def time_kernels(repeat: int) -> list[dict]:
    rows = []
    np_k, nb_k = get_kernels("numpy"), get_kernels("numba")
    for name, args in _inputs().items():
        a, b = getattr(np_k, name)(*args), getattr(nb_k, name)(*args)  # also warms the JIT
        diff = float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64))))
        t_np = min(timeit.repeat(lambda: getattr(np_k, name)(*args), number=repeat, repeat=3)) / repeat
        t_nb = min(timeit.repeat(lambda: getattr(nb_k, name)(*args), number=repeat, repeat=3)) / repeat
        rows.append({"kernel": name, "numpy_us": t_np * 1e6, "numba_us": t_nb * 1e6,
                     "speedup": t_np / t_nb, "max_abs_diff": diff})
    return rows


_FORWARD = """
import timeit
from rf_transfer.dit import ModelConfig, ModelWeights, ConditionBundle, forward_velocity
from rf_transfer.numerics import RngState
w = ModelWeights.init(ModelConfig(), 0)
z = RngState(1).normal(w.config.latent_shape)
c = ConditionBundle.empty(w.config).at(0.5)
forward_velocity(z, c, w)
print(min(timeit.repeat(lambda: forward_velocity(z, c, w), number={n}, repeat=3)) / {n})
"""


def time_forward(repeat: int) -> dict:
    out = {}
    for mode in ("0", "auto", "1"):
        env = {**os.environ, "RF_TRANSFER_NUMBA": mode}
        res = subprocess.run([sys.executable, "-c", _FORWARD.format(n=repeat)], env=env,
                             capture_output=True, text=True, check=True)
        out[{"0": "numpy", "auto": "auto", "1": "numba"}[mode]] = float(res.stdout.strip()) * 1e3
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--forward-repeat", type=int, default=20)
    ap.add_argument("--json")
    args = ap.parse_args()
    kernels = time_kernels(args.repeat)
    print(f"{'kernel':20s}{'numpy us':>12s}{'numba us':>12s}{'speedup':>10s}{'max diff':>12s}")
    for r in kernels:
        print(f"{r['kernel']:20s}{r['numpy_us']:12.1f}{r['numba_us']:12.1f}{r['speedup']:10.2f}"
              f"{r['max_abs_diff']:12.1e}")
    fwd = time_forward(args.forward_repeat)
    print("forward pass (ms): " + "  ".join(f"{k}={v:.2f}" for k, v in fwd.items()))
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"kernels": kernels, "forward_ms": fwd}, fh, indent=2)


if __name__ == "__main__":
    main()
