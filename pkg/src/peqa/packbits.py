"""Row-aligned bit packing of b-bit codes into little-endian 32-bit words.

Codes are laid out LSB-first: code ``j`` of a row occupies bits
``j*b .. j*b + b - 1`` of that row's bit stream, and bit ``k`` of the stream
lives in word ``k // 32`` at position ``k % 32``. A 3-bit code may straddle two
words. Every row starts on a fresh word and its unused tail bits are zero.
"""

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import IntegrityError
from .qcore import CodeMatrix


def words_per_row(m, bits):
    return math.ceil(m * bits / 32)


@dataclass(frozen=True)
class PackedIntMatrix:
    n: int
    m: int
    bits: int
    words: np.ndarray  # uint32, length n * words_per_row(m, bits)

    @property
    def words_per_row(self):
        return words_per_row(self.m, self.bits)

    @property
    def nbytes(self):
        return 4 * len(self.words)

    def tobytes(self):
        return np.ascontiguousarray(self.words, dtype="<u4").tobytes()

    @classmethod
    def frombytes(cls, buf, n, m, bits):
        return cls(n, m, bits, np.frombuffer(buf, dtype="<u4").astype(np.uint32))


def pack(codes):
    """Pack a :class:`CodeMatrix` into row-aligned 32-bit words."""
    q = codes.q if isinstance(codes, CodeMatrix) else np.asarray(codes)
    bits = codes.bits
    n, m = q.shape
    qmax = (1 << bits) - 1
    bad = (q < 0) | (q > qmax)
    if np.any(bad):
        i, j = np.argwhere(bad)[0]
        raise IntegrityError(f"code {q[i, j]} at ({i}, {j}) does not fit in {bits} bits")
    wpr = words_per_row(m, bits)
    stream = (q.astype(np.uint32)[:, :, None] >> np.arange(bits, dtype=np.uint32)) & 1
    stream = stream.reshape(n, m * bits).astype(np.uint8)
    padded = np.zeros((n, wpr * 32), dtype=np.uint8)
    padded[:, : m * bits] = stream
    raw = np.packbits(padded, axis=1, bitorder="little")
    words = raw.reshape(-1).view("<u4").astype(np.uint32)
    return PackedIntMatrix(n, m, bits, words)


def unpack(p):
    """Inverse of :func:`pack`; rejects wrong word counts and dirty padding."""
    wpr = words_per_row(p.m, p.bits)
    words = np.asarray(p.words)
    if words.ndim != 1 or words.size != p.n * wpr:
        raise IntegrityError(f"expected {p.n * wpr} words for a {p.n}x{p.m} {p.bits}-bit matrix, got {words.size}")
    raw = words.astype("<u4").view(np.uint8).reshape(p.n, wpr * 4)
    stream = np.unpackbits(raw, axis=1, bitorder="little")
    used = p.m * p.bits
    if np.any(stream[:, used:]):
        row = int(np.argwhere(stream[:, used:].any(axis=1))[0][0])
        raise IntegrityError(f"nonzero padding bits in row {row}")
    bitvals = stream[:, :used].reshape(p.n, p.m, p.bits).astype(np.uint32)
    q = (bitvals << np.arange(p.bits, dtype=np.uint32)).sum(axis=2)
    return CodeMatrix(q, p.bits)


def packed_code_bytes(n, m, bits):
    return 4 * n * words_per_row(m, bits)


def packed_weight_bytes(n, m, bits, group_size=None):
    """Storage of a packed layer: code words plus one float32 scale and one
    int32 zero-point per (row, group). ``group_size=None`` means per-channel."""
    g = m if group_size is None else group_size
    return packed_code_bytes(n, m, bits) + n * math.ceil(m / g) * (4 + 4)
