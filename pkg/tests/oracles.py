"""Independent reference implementations used as test oracles.

Nothing here imports the package's numerical code; each oracle recomputes its
quantity from first principles, usually by brute force.
"""

import itertools
import math

import numpy as np


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    r = np.floor(a)
    r = r + (a - r >= 0.5)
    return np.copysign(r, x)


def recon_error(w, s, z, bits):
    qmax = 2**bits - 1
    q = np.clip(round_half_away(w / s) + z, 0, qmax)
    return float(np.sum((w - s * (q - z)) ** 2))


def grid_error(w, bits, points, lo=0.2, hi=1.2):
    """Best error over every integer zero-point and ``points`` evenly spaced
    scales in ``[lo, hi] * (max - min) / (2**b - 1)``."""
    w = np.asarray(w, dtype=np.float64)
    qmax = 2**bits - 1
    smm = (w.max() - w.min()) / qmax
    s = np.linspace(lo, hi, points) * smm
    best = math.inf
    for z in range(qmax + 1):
        q = np.clip(round_half_away(w[None, :] / s[:, None]) + z, 0, qmax)
        err = np.sum((w[None, :] - s[:, None] * (q - z)) ** 2, axis=1)
        best = min(best, float(err.min()))
    return best


def enumeration_error(w, bits, lo=0.2, hi=1.2):
    """Exact minimum of the reconstruction error over the searched scale range.

    For fixed (s, z) the error-minimizing codes are the rounded-and-clamped
    ones, so minimizing over all code vectors, zero-points and scales gives
    the same optimum. For a fixed code vector the error is a quadratic in s,
    minimized in closed form and clipped to the range.
    """
    w = np.asarray(w, dtype=np.float64)
    qmax = 2**bits - 1
    smm = (w.max() - w.min()) / qmax
    Q = np.array(list(itertools.product(range(qmax + 1), repeat=len(w))), dtype=np.float64)
    w2 = float(w @ w)
    best = math.inf
    for z in range(qmax + 1):
        d = Q - z
        B = np.sum(d * d, axis=1)
        A = d @ w
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(B > 0, A / B, lo * smm)
        s = np.clip(s, lo * smm, hi * smm)
        err = w2 - 2 * s * A + s * s * B
        best = min(best, float(err.min()))
    return best


def minmax_error(w, bits):
    w = np.asarray(w, dtype=np.float64)
    qmax = 2**bits - 1
    s = (w.max() - w.min()) / qmax
    z = min(max(round_half_away(-w.min() / s), 0), qmax)
    return recon_error(w, s, z, bits)


def dense_weights(q, s, z):
    """``s * (q - z)`` with per-group broadcasting written out as loops."""
    n, m = q.shape
    G = s.shape[1]
    gl = m // G
    W = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            W[i, j] = s[i, j // gl] * (float(q[i, j]) - float(z[i, j // gl]))
    return W


def matvec(q, s, z, x, bias=None):
    W = dense_weights(q, s, z)
    y = np.array([math.fsum(W[i] * x) for i in range(W.shape[0])])
    return y if bias is None else y + bias


def pack_words(q, bits):
    """Pure-Python bit-by-bit packing: row-aligned, LSB-first, 32-bit words."""
    n, m = q.shape
    wpr = -(-m * bits // 32)
    words = []
    for i in range(n):
        row = [0] * wpr
        for j in range(m):
            v = int(q[i, j])
            for k in range(bits):
                if (v >> k) & 1:
                    pos = j * bits + k
                    row[pos // 32] |= 1 << (pos % 32)
        words += row
    return np.array(words, dtype=np.uint32)


def adamw(p, grads, lr, total, beta1=0.9, beta2=0.999, eps=1e-8, wd=0.0):
    """Scalar-loop AdamW with linear decay ``lr * (1 - (t - 1) / total)``.

    ``grads`` is a sequence of gradient vectors, or a callable mapping the
    current parameters to a gradient (then ``total`` steps are taken).
    """
    p = [float(v) for v in p]
    m = [0.0] * len(p)
    v = [0.0] * len(p)
    out = []
    steps = range(total) if callable(grads) else grads
    for t, g in enumerate(steps, start=1):
        if callable(grads):
            g = grads(p)
        lr_t = lr * (1.0 - (t - 1) / total)
        for k in range(len(p)):
            m[k] = beta1 * m[k] + (1 - beta1) * g[k]
            v[k] = beta2 * v[k] + (1 - beta2) * g[k] * g[k]
            mh = m[k] / (1 - beta1**t)
            vh = v[k] / (1 - beta2**t)
            p[k] = p[k] * (1 - lr_t * wd) - lr_t * mh / (math.sqrt(vh) + eps)
        out.append(list(p))
    return out


def llama_learnable(d, ffn, layers, group=None):
    """Scale count: q, k, v, o and down_proj have d rows, gate and up have ffn."""
    g_d = 1 if group is None else d // group
    g_f = 1 if group is None else ffn // group
    return layers * (4 * d * g_d + 2 * ffn * g_d + d * g_f)


def llama_size_bytes(d, ffn, layers, vocab, bits):
    linear = layers * (4 * d * d + 3 * d * ffn)
    scales = llama_learnable(d, ffn, layers) * 8
    dense = 2 * vocab * d + (2 * layers + 1) * d
    return linear * bits / 8 + scales + 2 * dense


def central_difference(f, x, idx, h=1e-5):
    old = x[idx]
    x[idx] = old + h
    fp = f()
    x[idx] = old - h
    fm = f()
    x[idx] = old
    return (fp - fm) / (2 * h)
