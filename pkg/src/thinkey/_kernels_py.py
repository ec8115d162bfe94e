"""Pure-Python/numpy versions of the compiled kernels in ``_kernels.pyx``.

SplitMix64 output is bit-identical to the compiled path. The Jacobi sweep
uses the same pair order and rotation formulas; only the reduction order of
the column dot products differs, so results agree to rounding.
"""
import math

import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def splitmix64_fill(state, n):
    state = int(state) & _MASK
    # output i is mix(state + (i + 1) * GAMMA): the generator is counter based
    with np.errstate(over="ignore"):
        z = np.uint64(state) + GAMMA * np.arange(1, n + 1, dtype=np.uint64)
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        z = z ^ (z >> np.uint64(31))
    return z, (state + n * int(GAMMA)) & _MASK


def jacobi_sweeps(a, v, tol, max_sweeps):
    n = a.shape[1]
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            ap = a[:, p]
            for q in range(p + 1, n):
                aq = a[:, q]
                alpha = float(ap @ ap)
                beta = float(aq @ aq)
                gamma = float(ap @ aq)
                if gamma == 0.0 or abs(gamma) <= tol * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + math.sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                x = ap.copy()
                a[:, p] = c * x - s * aq
                a[:, q] = s * x + c * aq
                vx = v[:, p].copy()
                vy = v[:, q].copy()
                v[:, p] = c * vx - s * vy
                v[:, q] = s * vx + c * vy
        if not rotated:
            return sweep + 1
    return -1


GELU_C = 0.7978845608028654


def gelu_forward(x):
    t = np.tanh(GELU_C * x * (1.0 + 0.044715 * (x * x)))
    return 0.5 * x * (1.0 + t), t


def gelu_backward(dy, x, t):
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * x * x))


def layernorm_forward(x, g, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * g, xhat, rstd


def layernorm_backward(dy, xhat, rstd, g):
    dg = np.sum(dy * xhat, axis=0, keepdims=True)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg


def softmax_forward(z, scale, causal, mask_value):
    z = z * scale
    if causal:
        n = z.shape[-1]
        z = np.where(np.triu(np.ones((n, n), dtype=bool), k=1), mask_value, z)
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def softmax_backward(p, dp, scale):
    return scale * p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
