"""Compare the compiled kernels with the numpy fallback.

Run ``python3 benchmarks/bench_kernels.py``. Each kernel is timed on both
backends with inputs shaped like the toy-task training step. A full
training step is then timed once per backend, each in a fresh interpreter,
because the backend is fixed at import time.
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from thinkey import _backend

STEP_SNIPPET = """
import timeit
from thinkey.model import ModelConfig, init_model, loss_and_grads
from thinkey.tasks import make_task, generate_batch
task = make_task("{task}")
m = init_model(ModelConfig({layers}, 64, 4, 8, 256, task.model_vocab, task.model_seq_len, seed=1))
b = generate_batch(task, 1, 64)
f = lambda: loss_and_grads(m, b.inputs, b.targets, b.loss_mask)
f()
print(min(timeit.repeat(f, number=1, repeat={repeat})))
"""


def kernel_cases(rng):
    tokens, d_ff, d_model, heads, n = 64 * 18, 256, 64, 4, 18
    x = rng.standard_normal((tokens, d_ff))
    _, t = _backend.python_kernels.gelu_forward(x)
    h = rng.standard_normal((tokens, d_model))
    g = rng.standard_normal(d_model)
    _, xhat, rstd = _backend.python_kernels.layernorm_forward(h, g, 1e-5)
    z = rng.standard_normal((64 * heads, n, n))
    p = _backend.python_kernels.softmax_forward(z, 0.25, True, -1e30)
    mat = rng.standard_normal((64, 64))
    return {
        "splitmix64_fill(65536)": lambda k: k.splitmix64_fill(12345, 65536),
        "jacobi_sweeps(64x64)": lambda k: k.jacobi_sweeps(np.asfortranarray(mat), np.asfortranarray(np.eye(64)), 1e-15, 60),
        "gelu_forward": lambda k: k.gelu_forward(x),
        "gelu_backward": lambda k: k.gelu_backward(x, x, t),
        "layernorm_forward": lambda k: k.layernorm_forward(h, g, 1e-5),
        "layernorm_backward": lambda k: k.layernorm_backward(h, xhat, rstd, g),
        "softmax_forward(causal)": lambda k: k.softmax_forward(z, 0.25, True, -1e30),
        "softmax_backward": lambda k: k.softmax_backward(p, z, 0.25),
    }


def best(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def step_time(backend: str, task: str, layers: int, repeat: int) -> float:
    env = dict(os.environ, THINKEY_BACKEND=backend)
    code = STEP_SNIPPET.format(task=task, layers=layers, repeat=repeat)
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _backend.compiled_kernels is None:
        print("compiled kernels are not built; reinstall with Cython available", file=sys.stderr)
        return 1

    print(f"{'kernel':<26}{'python ms':>12}{'compiled ms':>14}{'speedup':>10}")
    for name, fn in kernel_cases(np.random.default_rng(0)).items():
        tp = best(lambda: fn(_backend.python_kernels), args.repeat) * 1e3
        tc = best(lambda: fn(_backend.compiled_kernels), args.repeat) * 1e3
        print(f"{name:<26}{tp:>12.3f}{tc:>14.3f}{tp / tc:>9.1f}x")

    print()
    for task, layers in (("kvretrieval", 4), ("copyback", 2)):
        tp = step_time("python", task, layers, args.repeat) * 1e3
        tc = step_time("compiled", task, layers, args.repeat) * 1e3
        label = f"train step {task} L={layers}"
        print(f"{label:<26}{tp:>12.3f}{tc:>14.3f}{tp / tc:>9.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
