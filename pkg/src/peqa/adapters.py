"""Shared quantized base files and swappable per-task scale adapters.

Both containers share one layout (all integers little-endian)::

    magic      4 bytes   b"PQAB" (base) or b"PQAD" (adapter)
    version    u16
    reserved   u16       zero
    nsections  u32
    table      nsections x (tag 8 bytes ASCII, NUL padded; offset u64;
                            length u64; crc32 u32; reserved u32)
    payload    sections back to back, in table order

Base sections: ``META`` (JSON), ``CODES`` (packed u32 words of every layer),
``ZEROS`` (i32), ``SCALES`` (f32, the initial scales), ``BIASES`` (f32) and
``DENSE`` (f32 embeddings and norms). Adapter sections: ``META`` and
``SCALES``. An adapter records the CRC32 of its base's ``CODES`` section and
refuses to load against any other base.
"""

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ChecksumError, ConfigError, IntegrityError, ShapeError, WrongBaseError
from .layers import PEQA, Linear
from .model import ArchSpec, build
from .packbits import PackedIntMatrix, pack, unpack
from .qcore import QuantConfig

BASE_MAGIC = b"PQAB"
ADAPTER_MAGIC = b"PQAD"
FORMAT_VERSION = 1

_HEAD = struct.Struct("<4sHHI")
_ENTRY = struct.Struct("<8sQQII")


def _f32(a):
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def write_container(path, magic, sections):
    """Write ``sections`` (ordered ``(tag, bytes)`` pairs) with a checksummed table."""
    offset = _HEAD.size + _ENTRY.size * len(sections)
    table = []
    for tag, payload in sections:
        table.append(_ENTRY.pack(tag.encode("ascii").ljust(8, b"\0"), offset, len(payload), zlib.crc32(payload), 0))
        offset += len(payload)
    blob = _HEAD.pack(magic, FORMAT_VERSION, 0, len(sections)) + b"".join(table)
    blob += b"".join(p for _, p in sections)
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def read_container(path, magic):
    """Return ``{tag: bytes}`` after validating magic, version, bounds and CRCs."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEAD.size:
        raise IntegrityError(f"{path}: truncated header")
    got, version, _, nsec = _HEAD.unpack_from(blob)
    if got != magic:
        raise IntegrityError(f"{path}: bad magic {got!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise IntegrityError(f"{path}: unsupported format version {version}")
    if len(blob) < _HEAD.size + nsec * _ENTRY.size:
        raise IntegrityError(f"{path}: truncated section table")
    out = {}
    for i in range(nsec):
        raw_tag, off, length, crc, _ = _ENTRY.unpack_from(blob, _HEAD.size + i * _ENTRY.size)
        tag = raw_tag.rstrip(b"\0").decode("ascii")
        if off + length > len(blob):
            raise IntegrityError(f"{path}: section {tag!r} runs past end of file (truncated)")
        payload = blob[off : off + length]
        actual = zlib.crc32(payload)
        if actual != crc:
            raise ChecksumError(tag, crc, actual)
        out[tag] = payload
    return out


def header_bytes(n_sections, meta_len=0):
    return _HEAD.size + n_sections * _ENTRY.size + meta_len


# -- base artifact ------------------------------------------------------------------


@dataclass
class BaseArtifact:
    arch: ArchSpec
    quant: QuantConfig
    layers: dict  # name -> dict(packed, z, s0, bias)
    dense: dict
    fingerprint: int
    version: int = FORMAT_VERSION
    meta: dict = field(default_factory=dict)

    def to_network(self, mode=PEQA):
        """Rebuild a quantized network whose scales are the stored initial ones."""
        net = build(self.arch)
        linears = {}
        for name, L in self.layers.items():
            codes = unpack(L["packed"])
            linears[name] = Linear.quantized(codes.q, L["z"], L["s0"], self.quant, b=L["bias"], mode=mode)
        for name in net.linears:
            if name not in linears:
                raise IntegrityError(f"base is missing layer {name!r}")
        net.linears = {name: linears[name] for name in net.linears}
        for name, arr in net.dense.items():
            if name not in self.dense:
                raise IntegrityError(f"base is missing dense tensor {name!r}")
            if self.dense[name].shape != arr.shape:
                raise ShapeError(f"dense tensor {name!r} has shape {self.dense[name].shape}, expected {arr.shape}")
        net.dense = {name: self.dense[name].copy() for name in net.dense}
        net.mode = mode
        net.quant_cfg = self.quant
        return net


def _codes_section(net):
    return b"".join(pack(lin.codes()).tobytes() for lin in net.linears.values())


def codes_fingerprint(net):
    """CRC32 of the packed codes of every layer, as stored in a base file."""
    return zlib.crc32(_codes_section(net))


def _quant_dict(cfg):
    return {"bits": cfg.bits, "group_size": cfg.group_size, "scale_precision": cfg.scale_precision}


def save_base(net, path):
    """Write a quantized network as a base artifact; returns the file size."""
    if net.mode == "full" or net.quant_cfg is None:
        raise ConfigError("only quantized networks can be saved as a base")
    layers, dense = [], []
    for name, lin in net.linears.items():
        n, m = lin.shape
        layers.append({"name": name, "n": n, "m": m, "groups": lin.s.shape[1], "bias": lin.b is not None})
    for name, arr in net.dense.items():
        dense.append({"name": name, "shape": list(arr.shape)})
    meta = {
        "arch": net.arch.to_dict(),
        "quant": _quant_dict(net.quant_cfg),
        "layers": layers,
        "dense": dense,
    }
    sections = [
        ("META", json.dumps(meta, sort_keys=True).encode()),
        ("CODES", _codes_section(net)),
        ("ZEROS", b"".join(np.ascontiguousarray(l.z, dtype="<i4").tobytes() for l in net.linears.values())),
        ("SCALES", b"".join(_f32(l.s) for l in net.linears.values())),
        ("BIASES", b"".join(_f32(l.b) for l in net.linears.values() if l.b is not None)),
        ("DENSE", b"".join(_f32(a) for a in net.dense.values())),
    ]
    return write_container(path, BASE_MAGIC, sections)


class _Reader:
    def __init__(self, buf, tag):
        self.buf, self.tag, self.pos = buf, tag, 0

    def take(self, nbytes, dtype, shape):
        if self.pos + nbytes > len(self.buf):
            raise IntegrityError(f"section {self.tag!r} is shorter than its metadata implies")
        a = np.frombuffer(self.buf, dtype=dtype, count=nbytes // np.dtype(dtype).itemsize, offset=self.pos)
        self.pos += nbytes
        return a.reshape(shape)

    def done(self):
        if self.pos != len(self.buf):
            raise IntegrityError(f"section {self.tag!r} has {len(self.buf) - self.pos} trailing bytes")


def load_base(path):
    """Read and validate a base artifact."""
    sec = read_container(path, BASE_MAGIC)
    for tag in ("META", "CODES", "ZEROS", "SCALES", "BIASES", "DENSE"):
        if tag not in sec:
            raise IntegrityError(f"{path}: missing section {tag!r}")
    meta = json.loads(sec["META"])
    arch = ArchSpec.from_dict(meta["arch"])
    q = meta["quant"]
    cfg = QuantConfig(q["bits"], q["group_size"], q["scale_precision"])
    rc, rz, rs, rb, rd = (_Reader(sec[t], t) for t in ("CODES", "ZEROS", "SCALES", "BIASES", "DENSE"))
    layers = {}
    for L in meta["layers"]:
        n, m, G = L["n"], L["m"], L["groups"]
        if cfg.n_groups(m) != G:
            raise IntegrityError(f"layer {L['name']!r}: {G} groups inconsistent with group size {cfg.group_size}")
        wpr = -(-m * cfg.bits // 32)
        words = rc.take(4 * n * wpr, "<u4", (n * wpr,)).astype(np.uint32)
        layers[L["name"]] = {
            "packed": PackedIntMatrix(n, m, cfg.bits, words),
            "z": rz.take(4 * n * G, "<i4", (n, G)).astype(np.int64),
            "s0": rs.take(4 * n * G, "<f4", (n, G)).astype(np.float64),
            "bias": rb.take(4 * n, "<f4", (n,)).astype(np.float64) if L["bias"] else None,
        }
    dense = {}
    for D in meta["dense"]:
        shape = tuple(D["shape"])
        dense[D["name"]] = rd.take(4 * int(np.prod(shape)), "<f4", shape).astype(np.float64)
    for r in (rc, rz, rs, rb, rd):
        r.done()
    return BaseArtifact(arch, cfg, layers, dense, zlib.crc32(sec["CODES"]), meta=meta)


def load_network(path, mode=PEQA):
    return load_base(path).to_network(mode)


# -- task adapters ------------------------------------------------------------------


@dataclass
class TaskAdapter:
    task: str
    base_fingerprint: int
    scales: dict  # layer name -> float64 array holding float32-representable values
    version: int = FORMAT_VERSION

    @property
    def scale_count(self):
        return int(sum(s.size for s in self.scales.values()))


def _fingerprint_of(base):
    if isinstance(base, BaseArtifact):
        return base.fingerprint
    if isinstance(base, int):
        return base
    if isinstance(base, str):
        return load_base(base).fingerprint
    return codes_fingerprint(base)


def save_adapter(net, base, task_name, path):
    """Store the network's current (adapted) scales as a task adapter.

    ``base`` is a :class:`BaseArtifact`, a base file path, a fingerprint or a
    network sharing the base codes. Returns the file size.
    """
    fp = _fingerprint_of(base)
    if codes_fingerprint(net) != fp:
        raise WrongBaseError("network codes do not match the given base")
    meta = {
        "task": task_name,
        "base_fingerprint": fp,
        "layers": [{"name": name, "shape": list(lin.s.shape)} for name, lin in net.linears.items()],
    }
    sections = [
        ("META", json.dumps(meta, sort_keys=True).encode()),
        ("SCALES", b"".join(_f32(lin.s) for lin in net.linears.values())),
    ]
    return write_container(path, ADAPTER_MAGIC, sections)


def load_adapter(path):
    sec = read_container(path, ADAPTER_MAGIC)
    for tag in ("META", "SCALES"):
        if tag not in sec:
            raise IntegrityError(f"{path}: missing section {tag!r}")
    meta = json.loads(sec["META"])
    r = _Reader(sec["SCALES"], "SCALES")
    scales = {}
    for L in meta["layers"]:
        shape = tuple(L["shape"])
        scales[L["name"]] = r.take(4 * int(np.prod(shape)), "<f4", shape).astype(np.float64)
    r.done()
    return TaskAdapter(meta["task"], int(meta["base_fingerprint"]), scales)


def adapter_from_network(net, task_name="task"):
    """In-memory adapter holding the network's scales rounded to float32."""
    scales = {n: l.s.astype(np.float32).astype(np.float64) for n, l in net.linears.items()}
    return TaskAdapter(task_name, codes_fingerprint(net), scales)


def switch_task(net, adapter, verify=True):
    """Overwrite the network's scales with the adapter's; nothing else changes.

    With ``verify`` the codes fingerprint is checked first and the checksums
    of all non-scale tensors are compared before and after the swap.
    """
    if isinstance(adapter, str):
        adapter = load_adapter(adapter)
    if verify and codes_fingerprint(net) != adapter.base_fingerprint:
        raise WrongBaseError(
            f"adapter {adapter.task!r} was made for base {adapter.base_fingerprint:#010x}, "
            f"network codes are {codes_fingerprint(net):#010x}"
        )
    if set(adapter.scales) != set(net.linears):
        raise ShapeError("adapter layers do not match the network")
    for name, s in adapter.scales.items():
        if s.shape != net.linears[name].s.shape:
            raise ShapeError(f"adapter scales for {name!r} have shape {s.shape}, expected {net.linears[name].s.shape}")
    before = net.frozen_checksums() if verify else None
    for name, s in adapter.scales.items():
        net.linears[name].s[...] = s
    if verify and net.frozen_checksums() != before:
        raise IntegrityError("task switch modified non-scale tensors")
    return net


# -- dense checkpoints ----------------------------------------------------------------


def save_dense(net, path):
    """Dense network as ``.npz``: parameters by name plus the architecture as JSON."""
    if net.mode != "full":
        raise ConfigError("save_dense expects a dense network")
    arrays = {k: v for k, v in net.parameters().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __arch__=np.array(json.dumps(net.arch.to_dict(), sort_keys=True)), **arrays)


def load_dense(path):
    try:
        z = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise IntegrityError(f"{path}: not a dense checkpoint ({exc})") from None
    with z:
        if "__arch__" not in z:
            raise IntegrityError(f"{path}: missing architecture record")
        arch = ArchSpec.from_dict(json.loads(str(z["__arch__"])))
        net = build(arch)
        params = net.parameters()
        for k, v in params.items():
            if k not in z:
                raise IntegrityError(f"{path}: missing parameter {k!r}")
            if z[k].shape != v.shape:
                raise ShapeError(f"{path}: parameter {k!r} has shape {z[k].shape}, expected {v.shape}")
            v[...] = z[k]
    return net
