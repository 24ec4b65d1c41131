"""Building blocks with explicit forward and backward passes.

Every function here works on float64 arrays and returns the cache its
backward needs; nothing is recorded implicitly.
"""

import numpy as np

from .exceptions import NumericError
from .qcore import CodeMatrix, ScaleSet, expand_groups, group_sum, init_scale_zero, round_half_away

LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)

# Parameter kinds a Linear can train. Codes and zero-points are never trained.
DENSE, PEQA, RTN, QAT = "dense", "peqa", "rtn", "qat"
LINEAR_MODES = (DENSE, PEQA, RTN, QAT)


class Linear:
    """``y = x @ W.T + b`` where ``W`` is dense or ``s * (q - z)``.

    In ``qat`` mode a dense shadow weight is kept and the codes are recomputed
    from it on every forward pass; gradients pass straight through the rounding
    and are masked where the clamp saturates.
    """

    def __init__(self, W, b=None):
        self.W = np.array(W, dtype=np.float64)
        self.b = None if b is None else np.array(b, dtype=np.float64)
        self.mode = DENSE
        self.cfg = None
        self.q = None
        self.z = None
        self.s = None
        self._qz = None

    @property
    def shape(self):
        if self.W is not None:
            return self.W.shape
        return self.q.shape

    @classmethod
    def quantized(cls, q, z, s, cfg, b=None, mode=PEQA):
        lin = cls.__new__(cls)
        lin.W = None
        lin.b = None if b is None else np.array(b, dtype=np.float64)
        lin.mode = mode
        lin.cfg = cfg
        lin.q = np.array(q, dtype=np.uint8)
        lin.z = np.array(z, dtype=np.int64)
        lin.s = np.array(s, dtype=np.float64)
        lin._qz = None
        return lin

    def quantize(self, cfg, mode=PEQA, storage_dtype=np.float32):
        """Quantized copy of this dense layer.

        Scales and bias are rounded to ``storage_dtype`` so that a saved
        artifact reproduces the in-memory layer bit for bit.
        """
        if self.mode != DENSE:
            raise ValueError("layer is already quantized")
        scales, codes = init_scale_zero(self.W, cfg)
        s = _stored(scales.s, storage_dtype)
        b = None if self.b is None else _stored(self.b, storage_dtype)
        lin = Linear.quantized(codes.q, scales.z, s, cfg, b=b, mode=mode)
        if mode == QAT:
            lin.W = self.W.copy()
        return lin

    def params(self):
        out = {}
        if self.W is not None:
            out["W"] = self.W
        if self.b is not None:
            out["b"] = self.b
        if self.s is not None:
            out["s"] = self.s
        return out

    def buffers(self):
        if self.q is None:
            return {}
        return {"q": self.q, "z": self.z}

    def trainable(self, net_mode):
        if net_mode == "full":
            return ["W", "b"] if self.b is not None else ["W"]
        if net_mode == PEQA:
            return ["s"]
        if net_mode == QAT:
            return [k for k in ("W", "s", "b") if k in self.params()]
        return []

    @property
    def qz(self):
        if self._qz is None or self._qz.shape != self.q.shape:
            self._qz = self.q.astype(np.float64) - expand_groups(self.z, self.q.shape[1])
        return self._qz

    def codes(self):
        return CodeMatrix(self.q, self.cfg.bits)

    def scales(self):
        return ScaleSet(self.s, self.z, self.cfg.bits)

    def weight(self):
        """Effective weight and, in QAT mode, the pass-through mask."""
        if self.mode == DENSE:
            return self.W, None
        m = self.q.shape[1]
        s = expand_groups(self.s, m)
        if self.mode == QAT:
            if np.any(self.s == 0):
                raise NumericError("zero scale during QAT")
            t = round_half_away(self.W / s) + expand_groups(self.z, m)
            mask = (t >= 0) & (t <= self.cfg.qmax)
            self.q = np.clip(t, 0, self.cfg.qmax).astype(np.uint8)
            self._qz = None
            return s * self.qz, mask
        return s * self.qz, None

    def forward(self, x):
        W, mask = self.weight()
        y = x @ W.T
        if self.b is not None:
            y = y + self.b
        return y, (x, W, mask)

    def backward(self, gy, cache, want):
        """Gradient w.r.t. the input plus the parameters named in ``want``."""
        x, W, mask = cache
        gx = gy @ W
        grads = {}
        if not want:
            return gx, grads
        x2 = x.reshape(-1, x.shape[-1])
        g2 = gy.reshape(-1, gy.shape[-1])
        if "b" in want:
            grads["b"] = g2.sum(axis=0)
        if "W" in want or "s" in want:
            gW = g2.T @ x2
            if "s" in want:
                grads["s"] = group_sum(gW * self.qz, self.s.shape[1])
            if "W" in want:
                grads["W"] = gW if mask is None else gW * mask
        return gx, grads

    def export(self, storage_dtype=np.float32):
        """Frozen-code copy with storage-rounded scales and bias.

        For a QAT layer the codes are recomputed from the shadow weight
        against the rounded scales, so the copy is self-consistent.
        """
        if self.mode == DENSE:
            raise ValueError("dense layer has no codes to export")
        s = _stored(self.s, storage_dtype)
        b = None if self.b is None else _stored(self.b, storage_dtype)
        q = self.q
        if self.mode == QAT:
            m = self.W.shape[1]
            t = round_half_away(self.W / expand_groups(s, m)) + expand_groups(self.z, m)
            q = np.clip(t, 0, self.cfg.qmax).astype(np.uint8)
        return Linear.quantized(q, self.z, s, self.cfg, b=b, mode=PEQA)

    def dense_copy(self):
        W, _ = self.weight()
        return Linear(W.copy(), None if self.b is None else self.b.copy())


def _stored(a, dtype):
    return np.asarray(a).astype(dtype).astype(np.float64)


def relu(x):
    return np.maximum(x, 0.0)


def gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    return 0.5 * x * (1.0 + t), t


def gelu_backward(gy, x, t):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return gy * (0.5 * (1.0 + t) + 0.5 * x * dt)


def layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def layernorm_backward(gy, cache):
    xhat, inv, g = cache
    lead = tuple(range(gy.ndim - 1))
    gg = (gy * xhat).sum(axis=lead)
    gb = gy.sum(axis=lead)
    gxh = gy * g
    gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True) - xhat * (gxh * xhat).mean(axis=-1, keepdims=True))
    return gx, gg, gb


def softmax(a, axis=-1):
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(logits, targets):
    """Mean next-token NLL and its gradient w.r.t. the logits."""
    V = logits.shape[-1]
    flat = logits.reshape(-1, V)
    t = targets.reshape(-1)
    shifted = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = lse - shifted[np.arange(t.size), t]
    p = np.exp(shifted - lse[:, None])
    p[np.arange(t.size), t] -= 1.0
    return nll.mean(), (p / t.size).reshape(logits.shape)
