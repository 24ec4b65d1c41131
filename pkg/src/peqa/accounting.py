"""Closed-form parameter, model-size and optimizer-state estimates.

Sizes are in decimal bytes (1 GB = 1e9 bytes). Fully-connected layers are
stored packed (see :func:`peqa.packbits.packed_weight_bytes`); everything
else (embeddings, output head, norms) is stored dense at ``dense_bits``.
"""

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import List

from .exceptions import ConfigError
from .packbits import packed_weight_bytes

CATALOG_NAMES = ("llama7b", "llama13b", "llama30b", "llama65b")

#: Bytes of optimizer state per learnable parameter for AdamW.
OPTIMIZER_CONVENTIONS = {
    "moments": 8,  # two float32 moments
    "master": 16,  # two float32 moments + float32 master copy + 16-bit gradient, rounded up
}


@dataclass(frozen=True)
class LinearShape:
    name: str
    n: int
    m: int
    count: int


@dataclass
class LayerCatalog:
    name: str
    linear: List[LinearShape]
    dense: dict = field(default_factory=dict)  # part name -> element count
    family: str = ""
    published_params: float = 0.0

    def __post_init__(self):
        for l in self.linear:
            if min(l.n, l.m, l.count) < 1:
                raise ConfigError(f"non-positive dimension in layer {l.name}")

    @property
    def linear_params(self):
        return sum(l.n * l.m * l.count for l in self.linear)

    @property
    def dense_params(self):
        return sum(self.dense.values())

    @property
    def total_params(self):
        return self.linear_params + self.dense_params

    @classmethod
    def from_dict(cls, d):
        return cls(
            name=d["name"],
            linear=[LinearShape(x["name"], int(x["n"]), int(x["m"]), int(x["count"])) for x in d["linear"]],
            dense={x["name"]: int(x["size"]) for x in d.get("dense", [])},
            family=d.get("family", ""),
            published_params=float(d.get("published_params", 0.0)),
        )

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def load_catalog(name):
    """A shipped catalog by name (``llama7b`` ... ``llama65b``) or a JSON path."""
    if name in CATALOG_NAMES:
        text = resources.files("peqa").joinpath("catalogs", f"{name}.json").read_text()
        return LayerCatalog.from_dict(json.loads(text))
    try:
        return LayerCatalog.from_json(name)
    except FileNotFoundError:
        raise ConfigError(f"unknown catalog {name!r}; shipped: {', '.join(CATALOG_NAMES)}") from None


def _groups(m, group_size):
    if group_size is None:
        return 1
    if m % group_size:
        raise ConfigError(f"group size {group_size} does not divide input dimension {m}")
    return m // group_size


def count_learnable(catalog, group_size=None):
    """Number of scales: one per (output row, group) of every linear layer."""
    return sum(l.count * l.n * _groups(l.m, group_size) for l in catalog.linear)


def lora_learnable(catalog, targets=("q_proj", "v_proj"), rank=4):
    """LoRA adapter parameters ``rank * (n + m)`` per targeted layer, for comparison."""
    return sum(l.count * rank * (l.n + l.m) for l in catalog.linear if l.name in targets)


def model_size_bytes(catalog, bits=4, group_size=None, dense_bits=16):
    """Deployed size: packed linear layers plus dense parts.

    ``bits=16`` gives the unquantized half-precision model (no scales).
    """
    dense = catalog.dense_params * dense_bits / 8
    if bits == 16:
        return int(catalog.linear_params * 2 + dense)
    total = 0
    for l in catalog.linear:
        _groups(l.m, group_size)
        total += l.count * packed_weight_bytes(l.n, l.m, bits, group_size)
    return int(total + dense)


def optimizer_state_bytes(learnable_count, optimizer="adamw", convention="moments", bytes_per_param=None):
    """AdamW state for ``learnable_count`` parameters.

    ``bytes_per_param`` overrides the named convention.
    """
    if optimizer != "adamw":
        raise ConfigError(f"unsupported optimizer {optimizer!r}")
    if bytes_per_param is None:
        try:
            bytes_per_param = OPTIMIZER_CONVENTIONS[convention]
        except KeyError:
            raise ConfigError(f"unknown convention {convention!r}") from None
    return learnable_count * bytes_per_param


def size_table(catalogs, bits=4, group_size=None, dense_bits=16):
    """Rows mirroring the learnable-parameter / model-size comparison layout."""
    rows = []
    for cat in catalogs:
        peqa = count_learnable(cat, group_size)
        rows.append(
            dict(
                model=cat.name,
                params=cat.total_params,
                lora_qv4=lora_learnable(cat, rank=4),
                lora_qkvo16=lora_learnable(cat, ("q_proj", "k_proj", "v_proj", "o_proj"), 16),
                peqa=peqa,
                size_fp16_gb=model_size_bytes(cat, 16, dense_bits=dense_bits) / 1e9,
                size_peqa_gb=model_size_bytes(cat, bits, group_size, dense_bits) / 1e9,
                opt_state_mb=optimizer_state_bytes(peqa) / 1e6,
            )
        )
    return rows


def format_size_table(rows, bits=4, group_size=None):
    g = "channel-wise" if group_size is None else f"g{group_size}"
    head = ["", *[r["model"] for r in rows]]
    lines = [
        ["# learnable params (M)  LoRA QV4", *[f"{r['lora_qv4'] / 1e6:.2f}" for r in rows]],
        ["                        LoRA QKVO16", *[f"{r['lora_qkvo16'] / 1e6:.2f}" for r in rows]],
        [f"                        PEQA ({g})", *[f"{r['peqa'] / 1e6:.2f}" for r in rows]],
        ["model size (GB)         16-bit", *[f"{r['size_fp16_gb']:.2f}" for r in rows]],
        [f"                        PEQA {bits}-bit", *[f"{r['size_peqa_gb']:.2f}" for r in rows]],
        ["PEQA AdamW state (MB)", *[f"{r['opt_state_mb']:.1f}" for r in rows]],
    ]
    width0 = max(len(l[0]) for l in lines)
    widths = [max(len(h), 8) for h in head[1:]]
    out = [" " * width0 + "  " + "  ".join(h.rjust(w) for h, w in zip(head[1:], widths))]
    for l in lines:
        out.append(l[0].ljust(width0) + "  " + "  ".join(v.rjust(w) for v, w in zip(l[1:], widths)))
    return "\n".join(out)


def size_reduction(n, m, bits, group_size=None, dense_bits=16):
    """Fractional size reduction of one packed layer versus dense storage."""
    return 1.0 - packed_weight_bytes(n, m, bits, group_size) / (n * m * dense_bits / 8)


def bytes_per_param_for(total_bytes, params):
    return total_bytes / params if params else math.nan
