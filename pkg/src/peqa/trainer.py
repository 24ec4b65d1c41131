"""Training loops for the four adaptation modes.

``peqa`` trains only the quantization scales, ``qat`` trains shadow weights,
scales, embeddings, norms and biases through a straight-through estimator,
``full`` fine-tunes a dense network and ``rtn`` does no training at all.
All modes use AdamW with a learning rate decaying linearly to ~0.
"""

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import List

import numpy as np

from .data import as_dataset
from .exceptions import ConfigError, DivergenceError, NumericError
from .model import MODES, evaluate, perplexity

logger = logging.getLogger(__name__)

OPTIMIZER_BYTES_PER_PARAM = 8  # two float32 moments
SMALL_SCALE = 1e-8


@dataclass
class TrainConfig:
    mode: str = "peqa"
    epochs: int = 1
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    seed: int = 0
    eval_interval: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")


@dataclass
class TrainReport:
    mode: str
    learnable_count: int
    total_params: int
    optimizer_state_bytes: int
    steps: int = 0
    seconds: float = 0.0
    clip_norm: float = 1.0
    epochs: List[dict] = field(default_factory=list)

    @property
    def final_eval_loss(self):
        return self.epochs[-1]["eval_loss"]

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "eval_loss", "ppl", "lr"])
        for e in self.epochs:
            w.writerow([e["epoch"], repr(e["train_loss"]), repr(e["eval_loss"]), repr(e["ppl"]), repr(e["lr"])])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def summary(self):
        d = asdict(self)
        d.pop("epochs")
        d["final_eval_loss"] = self.final_eval_loss
        return d

    def to_json(self, path=None):
        text = json.dumps(self.summary(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def lr_at(step, total_steps, lr):
    """Linear decay: full ``lr`` at step 1, ``lr / total_steps`` at the last step."""
    return lr * (1.0 - (step - 1) / total_steps)


def adamw_step(params, grads, state, step, cfg, total_steps):
    """One in-place AdamW update with bias correction and decoupled decay.

    ``state`` maps each parameter name to its ``(m, v)`` moment pair and is
    created on first use. Returns the learning rate that was applied.
    """
    if step < 1:
        raise ValueError("step counts from 1")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name}")
    lr = lr_at(step, total_steps, cfg.lr)
    bc1 = 1.0 - cfg.beta1**step
    bc2 = 1.0 - cfg.beta2**step
    for name, g in grads.items():
        p = params[name]
        if name not in state:
            state[name] = (np.zeros_like(p), np.zeros_like(p))
        m, v = state[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        if cfg.weight_decay:
            p *= 1.0 - lr * cfg.weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
    return lr


def clip_grads(grads, max_norm):
    """Scale gradients in place to a global L2 norm of at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm and total > max_norm:
        f = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= f
    return total


def optimizer_state_bytes(learnable_count):
    return OPTIMIZER_BYTES_PER_PARAM * learnable_count


def _snapshot(net):
    return {k: v.copy() for k, v in net.trainable_params().items()}


def train(net, data, cfg, context=None):
    """Fine-tune ``net`` in place according to ``cfg`` and return a report.

    ``data`` is a :class:`~peqa.data.TextDataset`, a
    :class:`~peqa.data.RegressionDataset`, a byte array or an ``(X, Y)`` pair
    (the last two are split 90/10 into train and held-out parts).
    """
    if net.mode != cfg.mode:
        raise ConfigError(f"network is in {net.mode!r} mode but config asks for {cfg.mode!r}")
    ds = as_dataset(data, context=context or getattr(net.arch, "context", None))
    rng = np.random.default_rng(cfg.seed)
    count = net.n_trainable()
    report = TrainReport(
        mode=cfg.mode,
        learnable_count=count,
        total_params=net.n_params(),
        optimizer_state_bytes=optimizer_state_bytes(count),
        clip_norm=cfg.clip_norm,
    )
    t0 = time.perf_counter()
    if cfg.mode == "rtn":
        ev = evaluate(net, ds.eval_batches())
        report.epochs.append(dict(epoch=0, train_loss=float("nan"), eval_loss=ev, ppl=perplexity(ev), lr=0.0))
        report.seconds = time.perf_counter() - t0
        return report

    total_steps = cfg.epochs * ds.steps_per_epoch(cfg.batch_size)
    if total_steps < 1:
        raise ConfigError("training data too small for one batch")
    params = net.trainable_params()
    state = {}
    step = 0
    checkpoint = _snapshot(net)
    lr = cfg.lr
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for batch in ds.epoch(rng, cfg.batch_size):
            if step >= total_steps:
                break
            step += 1
            try:
                loss, tape = net.forward(batch)
            except NumericError as exc:
                raise DivergenceError(f"step {step}: {exc}", checkpoint) from exc
            grads = net.backward(tape)
            clip_grads(grads, cfg.clip_norm)
            try:
                lr = adamw_step(params, grads, state, step, cfg, total_steps)
            except DivergenceError as exc:
                raise DivergenceError(f"step {step}: {exc}", checkpoint) from exc
            losses.append(loss)
            if cfg.mode == "peqa":
                tiny = min(float(np.min(np.abs(l.s))) for l in net.linears.values())
                if tiny < SMALL_SCALE:
                    logger.warning("step %d: a scale magnitude fell to %.3g", step, tiny)
        train_loss = float(np.mean(losses)) if losses else float("nan")
        if epoch % cfg.eval_interval == 0 or epoch == cfg.epochs:
            ev = evaluate(net, ds.eval_batches())
        else:
            ev = float("nan")
        if not np.isfinite(train_loss) or (epoch % cfg.eval_interval == 0 and not np.isfinite(ev)):
            raise DivergenceError(f"epoch {epoch}: non-finite loss", checkpoint)
        report.epochs.append(dict(epoch=epoch, train_loss=train_loss, eval_loss=ev, ppl=perplexity(ev), lr=lr))
        logger.info("epoch %d train %.4f eval %.4f", epoch, train_loss, ev)
        checkpoint = _snapshot(net)
    report.steps = step
    report.seconds = time.perf_counter() - t0
    return report


def restore(net, checkpoint):
    """Copy a checkpoint taken by :func:`train` back into ``net``."""
    params = net.trainable_params()
    for k, v in checkpoint.items():
        params[k][...] = v
