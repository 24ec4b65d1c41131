"""Two fixed architectures with hand-written backpropagation.

``mlp`` is a ReLU regression network trained with mean squared error;
``tiny-transformer`` is a pre-LayerNorm decoder-only byte-level language model
whose output head is tied to the token embedding. Every fully-connected layer
is a :class:`~peqa.layers.Linear`; embeddings and norms stay dense.

A network is in one of four modes:

``full``  dense weights, everything trainable
``peqa``  frozen codes and zero-points, only the scales train
``rtn``   quantized, nothing trains
``qat``   dense shadow weights fake-quantized each step; all parameters train
"""

import copy
import hashlib
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from .exceptions import ConfigError, NumericError, ShapeError, StateError
from .layers import (
    PEQA,
    QAT,
    RTN,
    Linear,
    cross_entropy,
    gelu,
    gelu_backward,
    layernorm,
    layernorm_backward,
    relu,
    softmax,
)

MODES = ("full", PEQA, RTN, QAT)


@dataclass
class ArchSpec:
    kind: str = "tiny-transformer"
    dims: List[int] = field(default_factory=lambda: [8, 16, 1])  # mlp only
    vocab: int = 256
    context: int = 64
    width: int = 128
    heads: int = 4
    blocks: int = 2
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.kind not in ("mlp", "tiny-transformer"):
            raise ConfigError(f"unknown architecture kind {self.kind!r}")
        if self.kind == "mlp":
            if len(self.dims) < 2 or any(d < 1 for d in self.dims):
                raise ConfigError(f"bad mlp dims {self.dims}")
        elif self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by {self.heads} heads")

    @property
    def activation(self):
        return "relu" if self.kind == "mlp" else "gelu"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ForwardTape:
    """Activations cached by one forward pass; consumed by one backward."""

    loss: float
    caches: dict
    consumed: bool = False

    def take(self):
        if self.consumed:
            raise StateError("forward tape already consumed by a backward pass")
        self.consumed = True
        return self.caches


class Network:
    """State shared by both architectures: named linears and dense tensors."""

    def __init__(self, arch, linears, dense, mode="full"):
        self.arch = arch
        self.linears = linears  # name -> Linear, in a fixed order
        self.dense = dense  # name -> ndarray (embeddings, norms)
        self.mode = mode
        self.quant_cfg = None

    # -- parameters -----------------------------------------------------------

    def parameters(self):
        """All real-valued tensors by name (trainable or not)."""
        out = dict(self.dense)
        for name, lin in self.linears.items():
            for k, v in lin.params().items():
                out[f"{name}.{k}"] = v
        return out

    def trainable_names(self):
        names = []
        if self.mode in ("full", QAT):
            names += list(self.dense)
        for name, lin in self.linears.items():
            names += [f"{name}.{k}" for k in lin.trainable(self.mode)]
        return names

    def trainable_params(self):
        params = self.parameters()
        return {k: params[k] for k in self.trainable_names()}

    def n_trainable(self):
        return int(sum(v.size for v in self.trainable_params().values()))

    def n_params(self):
        """Parameter count of the equivalent dense network."""
        total = sum(v.size for v in self.dense.values())
        for lin in self.linears.values():
            n, m = lin.shape
            total += n * m + (0 if lin.b is None else n)
        return int(total)

    def scale_count(self):
        return int(sum(lin.s.size for lin in self.linears.values() if lin.s is not None))

    def frozen_checksums(self):
        """sha256 per frozen category: codes, zero-points, embeddings/norms, biases."""
        cats = {"codes": hashlib.sha256(), "zero_points": hashlib.sha256(),
                "dense": hashlib.sha256(), "bias": hashlib.sha256()}
        for name, lin in self.linears.items():
            if lin.q is not None:
                cats["codes"].update(name.encode() + lin.q.tobytes())
                cats["zero_points"].update(name.encode() + lin.z.tobytes())
            if lin.b is not None:
                cats["bias"].update(name.encode() + lin.b.tobytes())
        for name, v in self.dense.items():
            cats["dense"].update(name.encode() + v.tobytes())
        return {k: h.hexdigest() for k, h in cats.items()}

    # -- mode conversion --------------------------------------------------------

    def quantize(self, cfg, mode=PEQA):
        """Quantized copy of a dense (``full``) network."""
        if self.mode != "full":
            raise ConfigError(f"can only quantize a dense network, this one is {self.mode!r}")
        if mode not in (PEQA, RTN, QAT):
            raise ConfigError(f"unknown quantized mode {mode!r}")
        for name, lin in self.linears.items():
            cfg.group_len(lin.shape[1])  # divisibility check before any work
        net = copy.deepcopy(self)
        net.linears = {name: lin.quantize(cfg, mode=mode) for name, lin in self.linears.items()}
        net.dense = {k: v.astype(np.float32).astype(np.float64) for k, v in self.dense.items()}
        net.mode = mode
        net.quant_cfg = cfg
        return net

    def export_quantized(self):
        """PEQA-mode copy with every tensor rounded to its stored precision.

        This is the state a base file holds; for a QAT network the codes are
        recomputed from the trained shadow weights.
        """
        if self.mode == "full":
            raise ConfigError("export_quantized needs a quantized network")
        net = copy.deepcopy(self)
        net.linears = {name: lin.export() for name, lin in self.linears.items()}
        net.dense = {k: v.astype(np.float32).astype(np.float64) for k, v in self.dense.items()}
        net.mode = PEQA
        return net

    def with_mode(self, mode):
        """Same quantized state under another training mode (peqa <-> rtn)."""
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}")
        if (mode == "full") != (self.mode == "full") or (mode == QAT) != (self.mode == QAT):
            raise ConfigError(f"cannot switch a {self.mode!r} network to {mode!r}")
        net = copy.deepcopy(self)
        net.mode = mode
        for lin in net.linears.values():
            if lin.mode != "dense":
                lin.mode = mode
        return net

    def to_dense(self):
        """Dense network whose weights are the current effective weights."""
        net = copy.deepcopy(self)
        net.linears = {name: lin.dense_copy() for name, lin in self.linears.items()}
        net.mode = "full"
        net.quant_cfg = None
        return net

    def copy(self):
        return copy.deepcopy(self)

    # -- training interface -------------------------------------------------------

    def forward(self, batch):
        raise NotImplementedError

    def backward(self, tape, want=None):
        """Gradients of the tape's loss for the parameter names in ``want``
        (default: the trainable set of the current mode)."""
        raise NotImplementedError

    def _want(self, want):
        names = set(self.trainable_names() if want is None else want)
        per_linear = {}
        for name in self.linears:
            per_linear[name] = {k for k in ("W", "b", "s") if f"{name}.{k}" in names}
        return names, per_linear


def _init_linear(rng, n, m, std, bias=True):
    return Linear(rng.normal(0.0, std, size=(n, m)), np.zeros(n) if bias else None)


class MLP(Network):
    """ReLU network ``dims[0] -> ... -> dims[-1]`` with squared-error loss."""

    def __init__(self, arch, seed=0):
        rng = np.random.default_rng(seed)
        linears = {}
        for i, (m, n) in enumerate(zip(arch.dims[:-1], arch.dims[1:])):
            linears[f"fc{i}"] = _init_linear(rng, n, m, np.sqrt(2.0 / m))
            linears[f"fc{i}"].b = rng.normal(0.0, 0.1, size=n)
        super().__init__(arch, linears, {})

    def predict(self, X):
        h = np.asarray(X, dtype=np.float64)
        names = list(self.linears)
        for i, name in enumerate(names):
            h, _ = self.linears[name].forward(h)
            if i < len(names) - 1:
                h = relu(h)
        return h

    def forward(self, batch):
        X, Y = batch
        X = np.asarray(X, dtype=np.float64)
        Y = np.asarray(Y, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.arch.dims[0]:
            raise ShapeError(f"expected inputs with {self.arch.dims[0]} features, got shape {X.shape}")
        Y = Y.reshape(X.shape[0], -1)
        caches = []
        h = X
        names = list(self.linears)
        for i, name in enumerate(names):
            h, c = self.linears[name].forward(h)
            pre = h
            if i < len(names) - 1:
                h = relu(h)
            caches.append((c, pre))
        diff = h - Y
        loss = float(np.mean(diff * diff))
        if not np.isfinite(loss):
            raise NumericError("non-finite loss")
        return loss, ForwardTape(loss, {"layers": caches, "gout": 2.0 * diff / diff.size})

    def backward(self, tape, want=None):
        caches = tape.take()
        _, per_linear = self._want(want)
        names = list(self.linears)
        g = caches["gout"]
        grads = {}
        for i in reversed(range(len(names))):
            c, pre = caches["layers"][i]
            if i < len(names) - 1:
                g = g * (pre > 0)
            g, lg = self.linears[names[i]].backward(g, c, per_linear[names[i]])
            for k, v in lg.items():
                grads[f"{names[i]}.{k}"] = v
        return grads


class TinyTransformer(Network):
    """Pre-LN GPT-style decoder over bytes with causal multi-head attention."""

    def __init__(self, arch, seed=0):
        rng = np.random.default_rng(seed)
        d, V, T = arch.width, arch.vocab, arch.context
        hid = arch.mlp_ratio * d
        std = 0.02
        proj_std = std / np.sqrt(2 * arch.blocks)
        dense = {"tok_emb": rng.normal(0.0, std, size=(V, d)), "pos_emb": rng.normal(0.0, std, size=(T, d))}
        linears = {}
        for i in range(arch.blocks):
            p = f"blocks.{i}"
            dense[f"{p}.ln1.g"] = np.ones(d)
            dense[f"{p}.ln1.b"] = np.zeros(d)
            for nm in ("q", "k", "v"):
                linears[f"{p}.attn.{nm}"] = _init_linear(rng, d, d, std)
            linears[f"{p}.attn.o"] = _init_linear(rng, d, d, proj_std)
            dense[f"{p}.ln2.g"] = np.ones(d)
            dense[f"{p}.ln2.b"] = np.zeros(d)
            linears[f"{p}.mlp.fc1"] = _init_linear(rng, hid, d, std)
            linears[f"{p}.mlp.fc2"] = _init_linear(rng, d, hid, proj_std)
        dense["ln_f.g"] = np.ones(d)
        dense["ln_f.b"] = np.zeros(d)
        super().__init__(arch, linears, dense)

    def _split(self, x):
        B, T, d = x.shape
        H = self.arch.heads
        return x.reshape(B, T, H, d // H).transpose(0, 2, 1, 3)

    @staticmethod
    def _merge(x):
        B, H, T, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)

    def logits(self, tokens):
        """Forward pass without loss; returns (logits, caches)."""
        tokens = np.asarray(tokens)
        B, T = tokens.shape
        if T > self.arch.context:
            raise ShapeError(f"sequence length {T} exceeds context {self.arch.context}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.arch.vocab):
            raise ShapeError(f"token ids must lie in [0, {self.arch.vocab})")
        D, L = self.dense, self.linears
        x = D["tok_emb"][tokens] + D["pos_emb"][:T]
        mask = np.triu(np.ones((T, T), dtype=bool), k=1)
        blocks = []
        for i in range(self.arch.blocks):
            p = f"blocks.{i}"
            c = {}
            h, c["ln1"] = layernorm(x, D[f"{p}.ln1.g"], D[f"{p}.ln1.b"])
            q, c["q"] = L[f"{p}.attn.q"].forward(h)
            k, c["k"] = L[f"{p}.attn.k"].forward(h)
            v, c["v"] = L[f"{p}.attn.v"].forward(h)
            qh, kh, vh = self._split(q), self._split(k), self._split(v)
            scale = 1.0 / np.sqrt(qh.shape[-1])
            att = np.where(mask, -np.inf, qh @ kh.transpose(0, 1, 3, 2) * scale)
            P = softmax(att)
            o = self._merge(P @ vh)
            a, c["o"] = L[f"{p}.attn.o"].forward(o)
            x = x + a
            h2, c["ln2"] = layernorm(x, D[f"{p}.ln2.g"], D[f"{p}.ln2.b"])
            f, c["fc1"] = L[f"{p}.mlp.fc1"].forward(h2)
            gf, t = gelu(f)
            m, c["fc2"] = L[f"{p}.mlp.fc2"].forward(gf)
            x = x + m
            c.update(qh=qh, kh=kh, vh=vh, P=P, scale=scale, f=f, t=t)
            blocks.append(c)
        hf, lnf = layernorm(x, D["ln_f.g"], D["ln_f.b"])
        logits = hf @ D["tok_emb"].T
        return logits, {"tokens": tokens, "blocks": blocks, "lnf": lnf, "hf": hf}

    def forward(self, batch):
        """``batch`` is a (B, T+1) array of token ids; targets are the shifted inputs."""
        batch = np.asarray(batch)
        if batch.ndim != 2 or batch.shape[1] < 2:
            raise ShapeError(f"expected a (B, T+1) token batch, got shape {batch.shape}")
        logits, caches = self.logits(batch[:, :-1])
        loss, glogits = cross_entropy(logits, batch[:, 1:])
        if not np.isfinite(loss):
            raise NumericError("non-finite loss")
        caches["glogits"] = glogits
        return float(loss), ForwardTape(float(loss), caches)

    def backward(self, tape, want=None):
        c = tape.take()
        names, per_linear = self._want(want)
        D, L = self.dense, self.linears
        grads = {}

        def put(name, g):
            if name in names:
                grads[name] = grads[name] + g if name in grads else g

        gl = c["glogits"]
        put("tok_emb", gl.reshape(-1, gl.shape[-1]).T @ c["hf"].reshape(-1, c["hf"].shape[-1]))
        gh = gl @ D["tok_emb"]
        gx, gg, gb = layernorm_backward(gh, c["lnf"])
        put("ln_f.g", gg)
        put("ln_f.b", gb)

        def lin_back(name, g, cache):
            gin, lg = L[name].backward(g, cache, per_linear[name])
            for k, v in lg.items():
                put(f"{name}.{k}", v)
            return gin

        for i in reversed(range(self.arch.blocks)):
            p = f"blocks.{i}"
            b = c["blocks"][i]
            # mlp residual branch
            ggf = lin_back(f"{p}.mlp.fc2", gx, b["fc2"])
            gf = gelu_backward(ggf, b["f"], b["t"])
            gh2 = lin_back(f"{p}.mlp.fc1", gf, b["fc1"])
            g_ln2, gg, gb = layernorm_backward(gh2, b["ln2"])
            put(f"{p}.ln2.g", gg)
            put(f"{p}.ln2.b", gb)
            gx = gx + g_ln2
            # attention residual branch
            go = lin_back(f"{p}.attn.o", gx, b["o"])
            goh = self._split(go)
            P, qh, kh, vh = b["P"], b["qh"], b["kh"], b["vh"]
            gP = goh @ vh.transpose(0, 1, 3, 2)
            gvh = P.transpose(0, 1, 3, 2) @ goh
            gS = P * (gP - (gP * P).sum(axis=-1, keepdims=True)) * b["scale"]
            gqh = gS @ kh
            gkh = gS.transpose(0, 1, 3, 2) @ qh
            gh = (
                lin_back(f"{p}.attn.q", self._merge(gqh), b["q"])
                + lin_back(f"{p}.attn.k", self._merge(gkh), b["k"])
                + lin_back(f"{p}.attn.v", self._merge(gvh), b["v"])
            )
            g_ln1, gg, gb = layernorm_backward(gh, b["ln1"])
            put(f"{p}.ln1.g", gg)
            put(f"{p}.ln1.b", gb)
            gx = gx + g_ln1

        if "tok_emb" in names:
            ge = np.zeros_like(D["tok_emb"])
            np.add.at(ge, c["tokens"].reshape(-1), gx.reshape(-1, gx.shape[-1]))
            put("tok_emb", ge)
        T = c["tokens"].shape[1]
        if "pos_emb" in names:
            gp = np.zeros_like(D["pos_emb"])
            gp[:T] = gx.sum(axis=0)
            put("pos_emb", gp)
        return grads


def build(arch, seed=0):
    """Fresh dense network for ``arch``."""
    if arch.kind == "mlp":
        return MLP(arch, seed)
    return TinyTransformer(arch, seed)


# Functional aliases mirroring the operation names used in the docs.


def forward(net, batch):
    return net.forward(batch)


def backward_scale(net, tape):
    """Scale gradients (n x G per quantized layer) with codes held fixed."""
    if net.mode not in (PEQA, RTN, QAT):
        raise ConfigError("backward_scale needs a quantized network")
    want = [f"{name}.s" for name in net.linears]
    grads = net.backward(tape, want)
    return {name: grads[f"{name}.s"] for name in net.linears}


def backward_qat(net, tape):
    """Straight-through weight gradients and outer scale gradients (QAT mode)."""
    if net.mode != QAT:
        raise ConfigError("backward_qat needs a network in qat mode")
    grads = net.backward(tape)
    weight = {n: grads[f"{n}.W"] for n in net.linears}
    scale = {n: grads[f"{n}.s"] for n in net.linears}
    return weight, scale


def perplexity(mean_nll):
    return float(np.exp(mean_nll))


def evaluate(net, batches):
    """Token-weighted mean loss over ``batches`` (no gradient)."""
    total, count = 0.0, 0
    for batch in batches:
        loss, _ = net.forward(batch)
        w = _batch_weight(net, batch)
        total += loss * w
        count += w
    if count == 0:
        raise ValueError("no evaluation data")
    return total / count


def _batch_weight(net, batch):
    if isinstance(net, TinyTransformer):
        b = np.asarray(batch)
        return b.shape[0] * (b.shape[1] - 1)
    return len(batch[0])
