"""Asymmetric uniform weight quantization with trainable scales.

A weight matrix ``W`` (n x m) is represented as frozen unsigned codes ``q``,
integer zero-points ``z`` and real scales ``s``, one (s, z) pair per output
row and group of ``g`` consecutive input columns::

    W_hat = s * (q - z),   q = clamp(round(W / s) + z, 0, 2**b - 1)

Fine-tuning replaces ``s`` with ``s + delta`` while ``q`` and ``z`` stay fixed.
"""

from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

from .exceptions import ConfigError, NumericError, ShapeError
from .validation import check_matrix, check_same_shape

#: Sentinel group size meaning one group per output channel (g = m).
CHANNEL = None

ALLOWED_BITS = (2, 3, 4, 8)

# Searched scale range, as multiples of the min-max scale (max - min) / (2**b - 1).
SCALE_SEARCH_RANGE = (0.2, 1.2)
GRID_ALPHAS = np.round(np.arange(30, 121) / 100.0, 2)


@dataclass(frozen=True)
class QuantConfig:
    """Bit-width, grouping and scale storage precision.

    ``group_size=None`` (:data:`CHANNEL`) gives one scale per output row.
    """

    bits: int = 4
    group_size: Optional[int] = CHANNEL
    scale_precision: str = "single"

    def __post_init__(self):
        if isinstance(self.bits, bool) or self.bits not in ALLOWED_BITS:
            raise ConfigError(f"bits must be one of {ALLOWED_BITS}, got {self.bits!r}")
        if self.group_size is not None and (
            isinstance(self.group_size, bool) or int(self.group_size) != self.group_size or self.group_size < 1
        ):
            raise ConfigError(f"group_size must be a positive integer or CHANNEL, got {self.group_size!r}")
        if self.scale_precision not in ("single", "double"):
            raise ConfigError(f"scale_precision must be 'single' or 'double', got {self.scale_precision!r}")

    @property
    def qmax(self):
        return (1 << self.bits) - 1

    def group_len(self, m):
        if self.group_size is None:
            return m
        if m % self.group_size:
            raise ConfigError(f"group_size {self.group_size} does not divide input dimension {m}")
        return self.group_size

    def n_groups(self, m):
        return m // self.group_len(m)

    @property
    def scale_dtype(self):
        return np.float32 if self.scale_precision == "single" else np.float64


@dataclass
class ScaleSet:
    """Per-(row, group) scales ``s`` (trainable) and zero-points ``z`` (frozen)."""

    s: np.ndarray
    z: np.ndarray
    bits: int

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float64)
        self.z = np.asarray(self.z)
        if self.s.ndim != 2:
            raise ShapeError(f"scales must be 2-D (n x G), got shape {self.s.shape}")
        check_same_shape(self.s, self.z, ("s", "z"))
        if not np.all(np.isfinite(self.s)):
            raise NumericError("scales contain non-finite values")
        zi = self.z.astype(np.int64)
        if np.any(zi != self.z) or np.any(zi < 0) or np.any(zi > (1 << self.bits) - 1):
            raise ConfigError(f"zero-points must be integers in [0, {(1 << self.bits) - 1}]")
        self.z = zi

    @property
    def shape(self):
        return self.s.shape

    def with_scales(self, s):
        return ScaleSet(s, self.z, self.bits)


@dataclass
class CodeMatrix:
    """Unsigned b-bit codes of a weight matrix; the integer weight is ``q - z``."""

    q: np.ndarray
    bits: int

    def __post_init__(self):
        q = np.asarray(self.q)
        if q.ndim != 2:
            raise ShapeError(f"codes must be 2-D, got shape {q.shape}")
        qi = q.astype(np.int64)
        if np.any(qi != q) or np.any(qi < 0) or np.any(qi > (1 << self.bits) - 1):
            raise ConfigError(f"codes must be integers in [0, {(1 << self.bits) - 1}]")
        self.q = qi.astype(np.uint8)

    @property
    def shape(self):
        return self.q.shape


def round_half_away(x):
    """Round to nearest integer, ties away from zero.

    ``floor(|x| + 0.5)`` misrounds 0.49999999999999994, so the fractional part
    is compared directly (``x - trunc(x)`` is exact).
    """
    x = np.asarray(x, dtype=np.float64)
    r = np.trunc(x)
    f = x - r
    return r + (f >= 0.5) - (f <= -0.5)


def expand_groups(a, m):
    """Broadcast an (n x G) per-group array to (n x m)."""
    a = np.asarray(a)
    G = a.shape[1]
    if m % G:
        raise ShapeError(f"{G} groups do not tile {m} columns")
    return np.repeat(a, m // G, axis=1)


def group_sum(a, G):
    """Sum an (n x m) array over each of G contiguous column groups."""
    n, m = a.shape
    return a.reshape(n, G, m // G).sum(axis=2)


def quantize_codes(W, scales, cfg):
    """Codes ``clamp(round(W / s) + z, 0, 2**b - 1)`` for the given scales."""
    W = check_matrix(W)
    n, m = W.shape
    if scales.shape[0] != n or m % scales.shape[1]:
        raise ShapeError(f"scales of shape {scales.shape} do not fit weights of shape {W.shape}")
    if scales.bits != cfg.bits:
        raise ConfigError(f"scales were built for {scales.bits} bits, config says {cfg.bits}")
    zero = scales.s == 0
    if np.any(zero):
        row = int(np.argwhere(zero)[0][0])
        raise NumericError(f"zero scale in channel {row}")
    s = expand_groups(scales.s, m)
    z = expand_groups(scales.z, m)
    q = np.clip(round_half_away(W / s) + z, 0, cfg.qmax)
    return CodeMatrix(q, cfg.bits)


def dequantize(codes, scales):
    """Reconstruct ``s * (q - z)`` per group."""
    q = codes.q if isinstance(codes, CodeMatrix) else np.asarray(codes)
    n, m = q.shape
    if scales.shape[0] != n or m % scales.shape[1]:
        raise ShapeError(f"scales of shape {scales.shape} do not fit codes of shape {q.shape}")
    qz = q.astype(np.int64) - expand_groups(scales.z, m)
    return expand_groups(scales.s, m) * qz


def apply_scale_delta(s0, delta):
    """Adapted scales ``s0 + delta``; codes are untouched by construction."""
    s0 = np.asarray(s0, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    check_same_shape(s0, delta, ("s0", "delta"))
    return s0 + delta


def group_errors(W, codes, scales):
    """Squared reconstruction error of each (row, group), shape (n x G)."""
    W = check_matrix(W)
    diff = W - dequantize(codes, scales)
    return group_sum(diff * diff, scales.shape[1])


# -- scale / zero-point search ------------------------------------------------


@numba.njit(cache=True)
def _rha(t):
    r = np.trunc(t)
    f = t - r
    if f >= 0.5:
        r += 1.0
    elif f <= -0.5:
        r -= 1.0
    return r


@numba.njit(cache=True)
def _group_error(w, s, z, qmax):
    e = 0.0
    for j in range(w.size):
        c = _rha(w[j] / s) + z
        if c < 0.0:
            c = 0.0
        elif c > qmax:
            c = float(qmax)
        d = w[j] - s * (c - z)
        e += d * d
    return e


@numba.njit(cache=True)
def _clamped(v, z, qmax):
    c = v + z
    if c < 0:
        c = 0
    elif c > qmax:
        c = qmax
    return c - z


@numba.njit(cache=True)
def _best_scale_for_zero(w, z, qmax, lo, hi, w2):
    # Error as a function of s is continuous and piecewise quadratic:
    #   E(s) = sum w^2 - 2 s A + s^2 B,  A = sum w c, B = sum c^2
    # with integer offsets c = q - z constant between rounding breakpoints.
    g = w.size
    r0 = np.empty(g, np.int64)
    count = 0
    A = 0.0
    B = 0.0
    for j in range(g):
        a = abs(w[j])
        r = int(_rha(a / lo))
        sgn = 1 if w[j] >= 0 else -1
        c = _clamped(sgn * r, z, qmax)
        A += w[j] * c
        B += c * c
        # codes saturated on both sides of a breakpoint never change
        r = min(r, (qmax - z + 1) if sgn > 0 else (z + 1))
        r0[j] = r
        count += r
    ev_s = np.empty(count, np.float64)
    ev_a = np.empty(count, np.float64)
    ev_b = np.empty(count, np.float64)
    k = 0
    for j in range(g):
        a = abs(w[j])
        sgn = 1 if w[j] >= 0 else -1
        r = r0[j]
        while r >= 1:
            se = a / (r - 0.5)
            if se > hi:
                break
            c_old = _clamped(sgn * r, z, qmax)
            c_new = _clamped(sgn * (r - 1), z, qmax)
            if c_old != c_new and se >= lo:
                ev_s[k] = se
                ev_a[k] = w[j] * (c_new - c_old)
                ev_b[k] = c_new * c_new - c_old * c_old
                k += 1
            r -= 1
    order = np.argsort(ev_s[:k], kind="mergesort")
    best_e = np.inf
    best_s = lo
    prev = lo
    for t in range(k + 1):
        right = hi if t == k else ev_s[order[t]]
        if B > 0.0:
            sc = A / B
            if sc < prev:
                sc = prev
            elif sc > right:
                sc = right
        else:
            sc = prev
        e = w2 - 2.0 * sc * A + sc * sc * B
        if e < best_e:
            best_e = e
            best_s = sc
        if t < k:
            i = order[t]
            A += ev_a[i]
            B += ev_b[i]
            prev = right
    return best_s


@numba.njit(cache=True)
def _exact_search(groups, qmax, lo_f, hi_f, out_s, out_z):
    for gi in range(groups.shape[0]):
        w = groups[gi]
        wmin = w.min()
        wmax = w.max()
        if wmax == wmin:
            if wmax == 0.0:
                out_s[gi] = 1.0
                out_z[gi] = 0
            elif wmax > 0.0:
                out_s[gi] = wmax
                out_z[gi] = 0
            else:
                out_s[gi] = -wmax
                out_z[gi] = 1
            continue
        smm = (wmax - wmin) / qmax
        lo = lo_f * smm
        hi = hi_f * smm
        w2 = 0.0
        for j in range(w.size):
            w2 += w[j] * w[j]
        errs = np.full(qmax + 1, np.inf)
        scs = np.zeros(qmax + 1)
        z0 = int(_rha(-wmin / smm))
        z0 = min(max(z0, 0), qmax)
        scs[z0] = _best_scale_for_zero(w, z0, qmax, lo, hi, w2)
        errs[z0] = _group_error(w, scs[z0], z0, qmax)
        best_e = errs[z0]
        for z in range(qmax + 1):
            if z == z0:
                continue
            # Clamping alone costs at least this much for any s <= hi.
            bound = 0.0
            for j in range(w.size):
                if w[j] < -z * hi:
                    d = w[j] + z * hi
                    bound += d * d
                elif w[j] > (qmax - z) * hi:
                    d = w[j] - (qmax - z) * hi
                    bound += d * d
            if bound > best_e:
                continue
            scs[z] = _best_scale_for_zero(w, z, qmax, lo, hi, w2)
            errs[z] = _group_error(w, scs[z], z, qmax)
            if errs[z] < best_e:
                best_e = errs[z]
        # the min-max point is in range; keeping it as a candidate makes
        # "never worse than min-max" hold in floating point too
        e_mm = _group_error(w, smm, z0, qmax)
        if e_mm < best_e:
            out_s[gi] = smm
            out_z[gi] = z0
            continue
        for z in range(qmax + 1):
            if errs[z] == best_e:
                out_s[gi] = scs[z]
                out_z[gi] = z
                break


def _degenerate(w):
    c = w[0]
    if c == 0:
        return 1.0, 0
    return (c, 0) if c > 0 else (-c, 1)


def _grid_search(groups, qmax):
    out_s = np.empty(len(groups))
    out_z = np.empty(len(groups), dtype=np.int64)
    zs = np.arange(qmax + 1, dtype=np.float64)
    for gi, w in enumerate(groups):
        wmin, wmax = w.min(), w.max()
        if wmax == wmin:
            out_s[gi], out_z[gi] = _degenerate(w)
            continue
        s = GRID_ALPHAS * ((wmax - wmin) / qmax)
        codes = np.clip(round_half_away(w[None, None, :] / s[:, None, None]) + zs[None, :, None], 0, qmax)
        err = ((w - s[:, None, None] * (codes - zs[None, :, None])) ** 2).sum(axis=2)
        a, z = np.unravel_index(np.argmin(err), err.shape)  # alpha-major: smaller alpha wins ties
        out_s[gi], out_z[gi] = s[a], z
    return out_s, out_z


def init_scale_zero(W, cfg, method="exact"):
    """Scales and zero-points minimizing the squared reconstruction error.

    Each (row, group) is solved independently. ``method="exact"`` minimizes
    over every integer zero-point and all scales in
    ``[0.2, 1.2] * (max - min) / (2**b - 1)`` by sweeping the breakpoints of
    the piecewise-quadratic error. ``method="grid"`` evaluates the 91 scale
    multiples 0.30, 0.31, ..., 1.20 instead (ties: smaller scale, then smaller
    zero-point). Constant groups are represented exactly.

    Returns:
        (ScaleSet, CodeMatrix)
    """
    W = check_matrix(W)
    n, m = W.shape
    gl = cfg.group_len(m)
    G = m // gl
    groups = np.ascontiguousarray(W.reshape(n * G, gl))
    if method == "exact":
        s = np.empty(n * G)
        z = np.empty(n * G, dtype=np.int64)
        _exact_search(groups, cfg.qmax, SCALE_SEARCH_RANGE[0], SCALE_SEARCH_RANGE[1], s, z)
    elif method == "grid":
        s, z = _grid_search(groups, cfg.qmax)
    else:
        raise ConfigError(f"unknown search method {method!r}")
    scales = ScaleSet(s.reshape(n, G), z.reshape(n, G), cfg.bits)
    return scales, quantize_codes(W, scales, cfg)


def minmax_scale_zero(W, cfg):
    """Plain min-max calibration: s = (max - min) / (2**b - 1), z = round(-min / s)."""
    W = check_matrix(W)
    n, m = W.shape
    G = cfg.n_groups(m)
    g = W.reshape(n, G, m // G)
    lo, hi = g.min(axis=2), g.max(axis=2)
    s = (hi - lo) / cfg.qmax
    flat = s == 0
    s = np.where(flat, np.where(lo == 0, 1.0, np.abs(lo)), s)
    z = np.where(flat, (lo < 0).astype(np.int64), np.clip(round_half_away(-lo / s), 0, cfg.qmax))
    scales = ScaleSet(s, z.astype(np.int64), cfg.bits)
    return scales, quantize_codes(W, scales, cfg)
