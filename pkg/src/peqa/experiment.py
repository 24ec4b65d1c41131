"""Desk-scale comparison of full fine-tuning, QAT, PEQA and RTN.

A tiny byte-level transformer is pretrained on a mixture of synthetic text
domains, then adapted to a single held-out-style domain ("dialog") under each
method. The final held-out losses let one check the expected ordering:
full and QAT close together, PEQA near QAT, RTN clearly worst.
"""

import logging
from dataclasses import dataclass, field

from .data import DOMAINS, TextDataset, synthetic_text
from .model import ArchSpec, build, evaluate
from .qcore import QuantConfig
from .trainer import TrainConfig, train

logger = logging.getLogger(__name__)


@dataclass
class ToySetup:
    arch: ArchSpec = field(default_factory=lambda: ArchSpec(width=128, blocks=2, heads=4, context=32))
    pretrain_bytes: int = 120_000
    pretrain_epochs: int = 2
    pretrain_lr: float = 3e-3
    task_domain: str = "dialog"
    task_bytes: int = 20_000
    held_bytes: int = 6_000
    epochs: int = 2
    batch_size: int = 16
    lr_full: float = 1e-3
    lr_qat: float = 1e-3
    lr_peqa: float = 1e-3
    group: int = 32  # shared by every quantized method; None for one scale per row


def pretrained(setup, seed):
    net = build(setup.arch, seed)
    ctx = setup.arch.context
    pre = TextDataset(
        synthetic_text(setup.pretrain_bytes, seed=100 + seed, domains=DOMAINS),
        synthetic_text(8_000, seed=200 + seed, domains=DOMAINS),
        ctx,
    )
    train(net, pre, TrainConfig("full", setup.pretrain_epochs, setup.batch_size, setup.pretrain_lr, seed=seed))
    return net


def task_data(setup, seed):
    dom = (setup.task_domain,)
    return TextDataset(
        synthetic_text(setup.task_bytes, seed=300 + seed, domains=dom),
        synthetic_text(setup.held_bytes, seed=400 + seed, domains=dom),
        setup.arch.context,
    )


def run_seed(seed, bits=(4, 3), setup=None):
    """Final held-out loss per method: keys ``full``, ``(mode, bits)`` and ``base``."""
    setup = setup or ToySetup()
    base = pretrained(setup, seed)
    task = task_data(setup, seed)
    out = {"base": evaluate(base, task.eval_batches())}

    def fit(net, mode, lr):
        cfg = TrainConfig(mode, setup.epochs, setup.batch_size, lr, seed=seed)
        return train(net, task, cfg).final_eval_loss

    out["full"] = fit(base.copy(), "full", setup.lr_full)
    for b in bits:
        qc = QuantConfig(b, setup.group)
        out[("qat", b)] = fit(base.quantize(qc, mode="qat"), "qat", setup.lr_qat)
        out[("rtn", b)] = fit(base.quantize(qc, mode="rtn"), "rtn", 0.0)
        out[("peqa", b)] = fit(base.quantize(qc, mode="peqa"), "peqa", setup.lr_peqa)
        logger.info("seed %d bits %d: %s", seed, b, {k: v for k, v in out.items() if isinstance(k, tuple) and k[1] == b})
    return out


def gap_recovery(result, bits):
    """Fraction of the RTN-to-QAT loss gap closed by PEQA."""
    rtn, qat, peqa = result[("rtn", bits)], result[("qat", bits)], result[("peqa", bits)]
    return (rtn - peqa) / (rtn - qat)
