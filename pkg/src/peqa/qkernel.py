"""Fused dequantize-and-multiply kernels over packed codes.

The dense dequantized matrix is never materialized: each output row walks its
packed words, extracting codes on the fly. Per row and group the kernel
computes ``acc = sum_j (q[i, j] - z[i, G]) * x[j]`` in ascending ``j`` and
accumulates ``s[i, G] * acc`` over groups in ascending order. The integer
offsets ``q - z`` are exact, so codes equal to their zero-point contribute
exactly nothing. All
accumulators are float64; single-precision mode rounds the inputs and the
final output to float32. Each row is owned by exactly one worker, so the
parallel schedule is bit-identical to a sequential one.
"""

import csv
import io
import os
import statistics
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numba
import numpy as np

from .exceptions import NumericError, ShapeError
from .packbits import PackedIntMatrix, pack, packed_code_bytes, unpack
from .qcore import CodeMatrix, QuantConfig, ScaleSet, dequantize, init_scale_zero
from .validation import check_vector


def set_threads(n=None):
    """Cap kernel worker threads (defaults to ``$PEQA_THREADS`` when set)."""
    if n is None:
        env = os.environ.get("PEQA_THREADS")
        if not env:
            return numba.get_num_threads()
        n = int(env)
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


@dataclass
class QuantLinear:
    """Packed codes plus scales (and an optional dense bias) of one layer."""

    packed: PackedIntMatrix
    scales: ScaleSet
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        n, G = self.scales.shape
        if n != self.packed.n or self.packed.m % G:
            raise ShapeError(
                f"scales {self.scales.shape} inconsistent with packed {self.packed.n}x{self.packed.m} codes"
            )
        if self.packed.bits != self.scales.bits:
            raise ShapeError("packed codes and scales disagree on bit-width")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (n,):
                raise ShapeError(f"bias must have shape ({n},), got {self.bias.shape}")

    @classmethod
    def from_dense(cls, W, cfg, bias=None):
        scales, codes = init_scale_zero(W, cfg)
        return cls(pack(codes), scales, bias)

    @property
    def shape(self):
        return self.packed.n, self.packed.m

    def dequantized(self):
        return dequantize(unpack(self.packed), self.scales)


@numba.njit(cache=True, inline="always")
def _row(words, base, bits, m, gl, s_row, z_row, x):
    # codes are read as a little-endian bit stream through a 64-bit buffer
    mask = np.uint64((1 << bits) - 1)
    ub = np.uint64(bits)
    buf = np.uint64(0)
    have = 0
    w = base
    y = 0.0
    for g in range(s_row.shape[0]):
        zg = z_row[g]
        acc = 0.0
        for j in range(g * gl, (g + 1) * gl):
            if have < bits:
                buf |= np.uint64(words[w]) << np.uint64(have)
                w += 1
                have += 32
            acc += (np.float64(buf & mask) - zg) * x[j]
            buf >>= ub
            have -= bits
        y += s_row[g] * acc
    return y


@numba.njit(cache=True, parallel=True)
def _matvec(words, n, m, bits, wpr, s, z, x, bias, out):
    gl = m // s.shape[1]
    for i in numba.prange(n):
        out[i] = _row(words, i * wpr, bits, m, gl, s[i], z[i], x) + bias[i]


@numba.njit(cache=True, parallel=True)
def _matmul(words, n, m, bits, wpr, s, z, xt, bias, out):
    gl = m // s.shape[1]
    k = xt.shape[0]
    for i in numba.prange(n):
        for c in range(k):
            out[i, c] = _row(words, i * wpr, bits, m, gl, s[i], z[i], xt[c]) + bias[i]


def _operands(layer, dtype):
    s = layer.scales.s
    bias = np.zeros(layer.packed.n) if layer.bias is None else layer.bias
    if dtype == np.float32:
        s = s.astype(np.float32).astype(np.float64)
        bias = bias.astype(np.float32).astype(np.float64)
    words = np.ascontiguousarray(layer.packed.words, dtype=np.uint32)
    z = np.ascontiguousarray(layer.scales.z, dtype=np.float64)
    return words, np.ascontiguousarray(s), z, np.ascontiguousarray(bias, dtype=np.float64)


def _precision(arr):
    return np.float32 if arr.dtype == np.float32 else np.float64


def qmatvec(layer, x):
    """``y = s * (q - z) @ x + bias`` from packed codes.

    A float32 ``x`` selects single-precision mode (float32 inputs, scales and
    output, float64 accumulation); anything else runs in double precision.
    """
    n, m = layer.shape
    x = np.asarray(x)
    dtype = _precision(x)
    x = check_vector(x, m).astype(dtype).astype(np.float64)
    words, s, z, bias = _operands(layer, dtype)
    out = np.empty(n)
    _matvec(words, n, m, layer.packed.bits, layer.packed.words_per_row, s, z, x, bias, out)
    return out.astype(dtype)


def qmatmul(layer, X):
    """Column-wise :func:`qmatvec` for an (m x k) matrix; bit-identical per column."""
    n, m = layer.shape
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[0] != m:
        raise ShapeError(f"expected an ({m} x k) input, got shape {X.shape}")
    dtype = _precision(X)
    xt = np.ascontiguousarray(X.astype(dtype).astype(np.float64).T)
    if not np.all(np.isfinite(xt)):
        raise NumericError("input contains non-finite values")
    words, s, z, bias = _operands(layer, dtype)
    out = np.empty((n, X.shape[1]))
    _matmul(words, n, m, layer.packed.bits, layer.packed.words_per_row, s, z, xt, bias, out)
    return out.astype(dtype)


def qmatvec_reference(layer, x):
    """Plain-Python scalar path with the same summation order as the kernel."""
    n, m = layer.shape
    q = unpack(layer.packed).q
    s, z = layer.scales.s, layer.scales.z
    G = s.shape[1]
    gl = m // G
    x = [float(v) for v in x]
    y = []
    for i in range(n):
        yi = 0.0
        for g in range(G):
            acc = 0.0
            for j in range(g * gl, (g + 1) * gl):
                acc += (float(q[i, j]) - float(z[i, g])) * x[j]
            yi += float(s[i, g]) * acc
        y.append(yi + (0.0 if layer.bias is None else float(layer.bias[i])))
    return np.array(y)


# -- benchmarking -------------------------------------------------------------

BENCH_HEADER = ("n", "m", "bits", "group", "median_ns", "gbps", "bytes_ratio")


@dataclass
class BenchRow:
    n: int
    m: int
    bits: int
    group: str
    median_ns: float
    gbps: float
    bytes_ratio: float
    dense_median_ns: float = 0.0


@dataclass
class BenchReport:
    rows: List[BenchRow] = field(default_factory=list)

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(BENCH_HEADER)
        for r in self.rows:
            w.writerow([r.n, r.m, r.bits, r.group, f"{r.median_ns:.0f}", f"{r.gbps:.6g}", repr(r.bytes_ratio)])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def bytes_ratio(n, m, bits):
    """Packed code bytes relative to a float32 dense matrix of the same shape."""
    return packed_code_bytes(n, m, bits) / (4 * n * m)


def _median_ns(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return statistics.median(times)


def bench_matvec(sizes, bits, repeats=5, group_size=None, seed=0):
    """Time packed matvec against a float32 dense matvec on the same shapes."""
    if repeats < 3:
        raise ValueError("repeats must be at least 3")
    rng = np.random.default_rng(seed)
    report = BenchReport()
    for n, m in sizes:
        if n <= 0 or m <= 0:
            raise ValueError(f"sizes must be positive, got {(n, m)}")
        try:
            W = rng.standard_normal((n, m)).astype(np.float32)
            x = rng.standard_normal(m).astype(np.float32)
        except MemoryError as exc:
            raise MemoryError(f"cannot allocate a {n}x{m} benchmark layer") from exc
        dense_ns = _median_ns(lambda: W @ x, repeats)
        for b in bits:
            cfg = QuantConfig(bits=b, group_size=group_size)
            # min-max init keeps setup cheap; timing does not depend on scale values
            G = cfg.n_groups(m)
            lo = W.reshape(n, G, -1).min(axis=2)
            hi = W.reshape(n, G, -1).max(axis=2)
            s = np.where(hi > lo, (hi - lo) / cfg.qmax, 1.0)
            scales = ScaleSet(s, np.zeros((n, G), dtype=np.int64), b)
            codes = rng.integers(0, cfg.qmax + 1, size=(n, m))
            layer = QuantLinear(pack(CodeMatrix(codes, b)), scales)
            qmatvec(layer, x)  # warm-up / JIT
            ns = _median_ns(lambda: qmatvec(layer, x), repeats)
            touched = packed_code_bytes(n, m, b)
            report.rows.append(
                BenchRow(
                    n=n,
                    m=m,
                    bits=b,
                    group="channel" if group_size is None else str(group_size),
                    median_ns=float(ns),
                    gbps=touched / max(ns, 1),
                    bytes_ratio=bytes_ratio(n, m, b),
                    dense_median_ns=float(dense_ns),
                )
            )
    return report
