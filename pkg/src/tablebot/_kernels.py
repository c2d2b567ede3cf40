"""Fused single-pass kernels for the memory-bound elementwise ops.

numpy expresses gelu/softmax/layernorm as chains of whole-array ufuncs; on a
DRAM-limited box each extra pass costs real time. These numba loops do the
same float32 math in one pass. All loops are sequential, so results are
deterministic run to run. tensor.py falls back to numpy when numba is absent.
"""

from __future__ import annotations

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is preinstalled in dev envs
    HAVE_NUMBA = False

_C = np.float32(0.7978845608028654)  # sqrt(2/pi)
_A = np.float32(0.044715)

if HAVE_NUMBA:

    @numba.njit("Tuple((float32[::1], float32[::1]))(float32[::1])", cache=True)
    def gelu_fwd(x):
        n = x.size
        out = np.empty(n, dtype=np.float32)
        t = np.empty(n, dtype=np.float32)
        for i in range(n):
            v = x[i]
            ti = np.tanh(_C * (v + _A * v * v * v))
            t[i] = ti
            out[i] = np.float32(0.5) * v * (np.float32(1.0) + ti)
        return out, t

    @numba.njit("float32[::1](float32[::1], float32[::1], float32[::1])", cache=True)
    def gelu_bwd(g, x, t):
        n = x.size
        out = np.empty(n, dtype=np.float32)
        for i in range(n):
            v = x[i]
            ti = t[i]
            dinner = _C * (np.float32(1.0) + np.float32(3.0) * _A * v * v)
            out[i] = g[i] * np.float32(0.5) * (
                np.float32(1.0) + ti + v * (np.float32(1.0) - ti * ti) * dinner
            )
        return out

    @numba.njit("float32[:, ::1](float32[:, ::1])", cache=True)
    def softmax_fwd(x):
        r, c = x.shape
        out = np.empty((r, c), dtype=np.float32)
        for i in range(r):
            m = x[i, 0]
            for j in range(1, c):
                if x[i, j] > m:
                    m = x[i, j]
            s = np.float32(0.0)
            for j in range(c):
                e = np.exp(x[i, j] - m)
                out[i, j] = e
                s += e
            inv = np.float32(1.0) / s
            for j in range(c):
                out[i, j] *= inv
        return out

    @numba.njit("float32[:, ::1](float32[:, ::1], float32[:, ::1])", cache=True)
    def softmax_bwd(g, y):
        r, c = y.shape
        out = np.empty((r, c), dtype=np.float32)
        for i in range(r):
            dot = np.float32(0.0)
            for j in range(c):
                dot += g[i, j] * y[i, j]
            for j in range(c):
                out[i, j] = y[i, j] * (g[i, j] - dot)
        return out

    @numba.njit("Tuple((float32[:, ::1], float32[::1]))(float32[:, ::1], float32)",
                cache=True)
    def layernorm_fwd(x, eps):
        r, c = x.shape
        out = np.empty((r, c), dtype=np.float32)
        inv = np.empty(r, dtype=np.float32)
        for i in range(r):
            mu = np.float32(0.0)
            for j in range(c):
                mu += x[i, j]
            mu /= np.float32(c)
            var = np.float32(0.0)
            for j in range(c):
                d = x[i, j] - mu
                var += d * d
            var /= np.float32(c)
            iv = np.float32(1.0) / np.sqrt(var + eps)
            inv[i] = iv
            for j in range(c):
                out[i, j] = (x[i, j] - mu) * iv
        return out, inv

    @numba.njit("float32[:, ::1](float32[:, ::1], float32[:, ::1], float32[::1])",
                cache=True)
    def layernorm_bwd(g, xhat, inv):
        r, c = xhat.shape
        out = np.empty((r, c), dtype=np.float32)
        for i in range(r):
            gm = np.float32(0.0)
            gxm = np.float32(0.0)
            for j in range(c):
                gm += g[i, j]
                gxm += g[i, j] * xhat[i, j]
            gm /= np.float32(c)
            gxm /= np.float32(c)
            iv = inv[i]
            for j in range(c):
                out[i, j] = iv * (g[i, j] - gm - xhat[i, j] * gxm)
        return out

    def warmup() -> None:
        x = np.zeros(4, dtype=np.float32)
        x2 = np.zeros((2, 2), dtype=np.float32)
        o, t = gelu_fwd(x)
        gelu_bwd(x, x, t)
        y = softmax_fwd(x2)
        softmax_bwd(x2, y)
        xh, inv = layernorm_fwd(x2, np.float32(1e-5))
        layernorm_bwd(x2, xh, inv)

else:  # pragma: no cover

    def warmup() -> None:
        pass
