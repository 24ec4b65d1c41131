"""Command-line interface: ``peqa <command> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 3 unreadable or
corrupt data, 4 training divergence. Every command writes a JSON run
manifest next to its first output (or to ``--manifest``).
"""

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .accounting import (
    CATALOG_NAMES,
    OPTIMIZER_CONVENTIONS,
    count_learnable,
    format_size_table,
    load_catalog,
    optimizer_state_bytes,
    size_reduction,
    size_table,
)
from .adapters import (
    adapter_from_network,
    codes_fingerprint,
    load_adapter,
    load_base,
    load_dense,
    save_adapter,
    save_base,
    save_dense,
    switch_task,
)
from .data import RegressionDataset, TextDataset, load_corpus, split, text_windows
from .exceptions import ConfigError, DivergenceError, IntegrityError, PEQAError, ShapeError
from .model import ArchSpec, MLP, build, evaluate, perplexity
from .packbits import packed_weight_bytes
from .qcore import ALLOWED_BITS, QuantConfig
from .qkernel import bench_matvec, set_threads
from .trainer import TrainConfig, train

logger = logging.getLogger("peqa")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

DEFAULTS = {
    "pretrain": dict(arch="tiny-transformer", width=128, blocks=2, heads=4, context=32, hidden="32,32",
                     epochs=2, lr=3e-3, batch_size=16, seed=0),
    "quantize": dict(bits=4, group=None),
    "finetune": dict(mode="peqa", task="task", epochs=2, lr=1e-3, batch_size=16, seed=0, bits=4, group=None,
                     weight_decay=0.0, clip_norm=1.0),
    "eval": dict(),
    "switch": dict(),
    "bench": dict(sizes="1024x1024,4096x4096", bits="3,4", group=None, repeats=5, seed=0),
    "size": dict(catalog=["llama7b", "llama13b", "llama30b", "llama65b"], bits=4, group=None, dense_bits=16),
}


class UsageError(PEQAError):
    pass


# -- helpers ------------------------------------------------------------------------


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _group(text):
    if text is None or str(text).lower() in ("none", "channel", "0"):
        return None
    g = int(text)
    if g < 1:
        raise ConfigError(f"group size must be positive, got {g}")
    return g


def _ints(text):
    if isinstance(text, (list, tuple)):
        return [int(t) for t in text]
    return [int(t) for t in str(text).split(",") if t]


def _sizes(text):
    out = []
    for part in str(text).split(","):
        try:
            n, m = part.lower().split("x")
            out.append((int(n), int(m)))
        except ValueError:
            raise ConfigError(f"bad size {part!r}; expected NxM") from None
    return out


def resolve(command, args):
    """Merge flags over config file over defaults."""
    cfg = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise ConfigError(f"{args.config}: unknown keys {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in cfg:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    return cfg


def _check_outputs(paths, force):
    for p in paths:
        if p and os.path.exists(p) and not force:
            raise UsageError(f"{p} exists; pass --force to overwrite")


def _check_inputs(paths):
    for p in paths:
        if p and not os.path.isfile(p):
            raise FileNotFoundError(f"input not found: {p}")


class Run:
    """Collects what a command read and wrote, then writes the manifest."""

    def __init__(self, command, args, config):
        self.command = command
        self.args = args
        self.config = config
        self.inputs = {}
        self.outputs = []
        self.started = _now()
        self.results = {}

    def read(self, *paths):
        _check_inputs(paths)
        for p in paths:
            if p:
                self.inputs[p] = sha256_file(p)

    def will_write(self, *paths):
        paths = [p for p in paths if p]
        inputs = {os.path.realpath(p) for p in self.inputs}
        for p in paths:
            if os.path.realpath(p) in inputs:
                raise UsageError(f"output {p} would overwrite an input")
        _check_outputs(paths, self.args.force)
        self.outputs += paths

    def manifest_path(self):
        if self.args.manifest:
            return self.args.manifest
        if self.outputs:
            return self.outputs[0] + ".manifest.json"
        return None

    def finish(self, status):
        path = self.manifest_path()
        if path is None:
            return None
        manifest = {
            "command": self.command,
            "argv": sys.argv[1:],
            "version": __version__,
            "config": self.config,
            "seed": self.config.get("seed"),
            "inputs": self.inputs,
            "outputs": self.outputs,
            "started": self.started,
            "finished": _now(),
            "status": status,
            "results": self.results,
        }
        with open(path, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")
        return path


def _load_any(path, mode="peqa"):
    """A network from a base file (quantized) or a dense ``.npz`` checkpoint."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"PQAB":
        return load_base(path).to_network(mode)
    if path.endswith(".npz"):
        return load_dense(path)
    raise IntegrityError(f"{path}: neither a base file nor a dense .npz checkpoint")


def _dataset(net, data, eval_data=None):
    if isinstance(net, MLP):
        if not isinstance(data, tuple):
            raise ConfigError("the mlp architecture needs a .csv regression corpus")
        if eval_data is None:
            (Xt, Yt), (Xe, Ye) = split(data)
        else:
            (Xt, Yt), (Xe, Ye) = data, eval_data
        return RegressionDataset(Xt, Yt, Xe, Ye)
    if isinstance(data, tuple):
        raise ConfigError("the tiny-transformer architecture needs a .txt corpus")
    if eval_data is None:
        train_part, held = split(data)
    else:
        train_part, held = data, eval_data
    return TextDataset(train_part, held, net.arch.context)


def _held_batches(net, data):
    """Batches over a whole file, identical to the trainer's held-out batching."""
    if isinstance(net, MLP):
        if not isinstance(data, tuple):
            raise ConfigError("the mlp architecture needs a .csv regression corpus")
        return RegressionDataset(data[0][:0], data[1][:0], data[0], data[1]).eval_batches()
    if isinstance(data, tuple):
        raise ConfigError("the tiny-transformer architecture needs a .txt corpus")
    if len(data) < net.arch.context + 1:
        raise ConfigError(f"text shorter than one window of {net.arch.context + 1} bytes")
    windows = text_windows(data, net.arch.context)
    return (windows[i : i + 64] for i in range(0, len(windows), 64))


# -- commands -------------------------------------------------------------------------


def cmd_pretrain(args, run):
    c = run.config
    run.read(args.data)
    run.will_write(args.out, args.report)
    data = load_corpus(args.data)
    if isinstance(data, tuple):
        arch = ArchSpec(kind="mlp", dims=[data[0].shape[1], *_ints(c["hidden"]), data[1].shape[1]])
    else:
        arch = ArchSpec(kind=c["arch"], width=c["width"], blocks=c["blocks"], heads=c["heads"], context=c["context"])
    net = build(arch, c["seed"])
    report = train(net, _dataset(net, data), TrainConfig("full", c["epochs"], c["batch_size"], c["lr"], seed=c["seed"]))
    save_dense(net, args.out)
    if args.report:
        report.to_csv(args.report)
    run.results = report.summary()
    print(f"pretrained {net.n_params()} parameters; final eval loss {report.final_eval_loss:.6f}")


def cmd_quantize(args, run):
    c = run.config
    run.read(args.input)
    run.will_write(args.out)
    if c["bits"] not in ALLOWED_BITS:
        raise UsageError(f"bits must be one of {ALLOWED_BITS}")
    cfg = QuantConfig(int(c["bits"]), _group(c["group"]))
    dense = load_dense(args.input)
    net = dense.quantize(cfg, mode="peqa")
    size = save_base(net, args.out)
    rows, dense_bytes, packed_bytes = [], 0, 0
    for name, lin in dense.linears.items():
        W = lin.W
        What, _ = net.linears[name].weight()
        n, m = W.shape
        rmse = float(np.sqrt(np.mean((W - What) ** 2)))
        dense_bytes += 2 * n * m
        packed_bytes += packed_weight_bytes(n, m, cfg.bits, cfg.group_size)
        red = size_reduction(n, m, cfg.bits, cfg.group_size)
        rows.append({"layer": name, "rmse": rmse, "size_reduction": red})
        print(f"{name:24s} rmse {rmse:.6e}  size reduction {100 * red:.1f}%")
    total = 1.0 - packed_bytes / dense_bytes
    print(f"linear layers: {dense_bytes} bytes at 16-bit -> {packed_bytes} packed ({100 * total:.1f}% smaller)")
    print(f"wrote {args.out} ({size} bytes)")
    run.results = {"layers": rows, "size_reduction": total, "file_bytes": size,
                   "scale_count": net.scale_count(), "fingerprint": codes_fingerprint(net)}


def cmd_finetune(args, run):
    c = run.config
    mode = c["mode"]
    run.read(args.base, args.data, args.eval_data)
    stem = os.path.splitext(args.out)[0]
    report_csv = args.report_csv or stem + ".train.csv"
    report_json = args.report_json or stem + ".train.json"
    run.will_write(args.out, report_csv, report_json)
    is_base = open(args.base, "rb").read(4) == b"PQAB"
    if mode in ("peqa", "rtn") and not is_base:
        raise UsageError(f"--mode {mode} needs a quantized base file; run 'peqa quantize' first")
    if mode == "full":
        net = _load_any(args.base).to_dense() if is_base else load_dense(args.base)
    elif mode == "qat" and not is_base:
        net = load_dense(args.base).quantize(QuantConfig(int(c["bits"]), _group(c["group"])), mode="qat")
    elif mode == "qat":
        # shadow weights start at the dequantized base
        net = _load_any(args.base, "peqa")
        for lin in net.linears.values():
            lin.W = lin.weight()[0].copy()
            lin.mode = "qat"
        net.mode = "qat"
    else:
        net = _load_any(args.base, mode)
    data = load_corpus(args.data)
    eval_data = load_corpus(args.eval_data) if args.eval_data else None
    ds = _dataset(net, data, eval_data)
    tc = TrainConfig(mode, c["epochs"], c["batch_size"], c["lr"], weight_decay=c["weight_decay"],
                     clip_norm=c["clip_norm"], seed=c["seed"])
    try:
        report = train(net, ds, tc)
    except DivergenceError:
        run.outputs = [p for p in run.outputs if os.path.exists(p)]
        raise
    # the stored state is rounded to file precision; report its loss too
    if mode in ("peqa", "rtn"):
        adapter = adapter_from_network(net, c["task"])
        switch_task(net, adapter)
        save_adapter(net, codes_fingerprint(net), c["task"], args.out)
    elif mode == "qat":
        net = net.export_quantized()
        save_base(net, args.out)
    else:
        save_dense(net, args.out)
    stored = evaluate(net, ds.eval_batches())
    summary = report.summary()
    summary["stored_eval_loss"] = stored
    summary["stored_ppl"] = perplexity(stored)
    summary["task"] = c["task"]
    report.to_csv(report_csv)
    with open(report_json, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    run.results = summary
    print(f"{mode}: {report.learnable_count} learnable of {report.total_params}, {report.steps} steps")
    for e in report.epochs:
        print(f"epoch {e['epoch']}: train {e['train_loss']:.6f} eval {e['eval_loss']:.6f} ppl {e['ppl']:.4f}")
    print(f"stored eval loss {stored!r} ppl {perplexity(stored):.6f}")
    print(f"wrote {args.out}")


def cmd_eval(args, run):
    run.read(args.base, args.adapter, args.data)
    run.will_write(args.csv)
    net = _load_any(args.base)
    if args.adapter:
        if net.mode == "full":
            raise UsageError("adapters apply to quantized base files only")
        switch_task(net, load_adapter(args.adapter))
    data = load_corpus(args.data)
    loss = evaluate(net, _held_batches(net, data))
    ppl = perplexity(loss)
    print(f"loss {loss!r}")
    print(f"ppl {ppl!r}")
    row = {"base": args.base, "adapter": args.adapter or "", "data": args.data, "loss": repr(loss), "ppl": repr(ppl)}
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
            w.writeheader()
            w.writerow(row)
    run.results = {"loss": loss, "ppl": ppl}


def _probe(net, data):
    if isinstance(net, MLP):
        out = net.predict(data[0])
    else:
        windows = text_windows(data, net.arch.context)
        out = np.concatenate([net.logits(windows[i : i + 64, :-1])[0] for i in range(0, len(windows), 64)])
    return hashlib.sha256(np.ascontiguousarray(out).tobytes()).hexdigest(), evaluate(net, _held_batches(net, data))


def cmd_switch(args, run):
    run.read(args.base, *args.adapter, args.probe)
    run.will_write(args.out)
    net = _load_any(args.base)
    if net.mode == "full":
        raise UsageError("--base must be a quantized base file")
    data = load_corpus(args.probe)
    digest, loss = _probe(net, data)
    steps = [{"adapter": None, "task": "base", "output_sha256": digest, "loss": loss}]
    print(f"base: loss {loss!r} outputs {digest[:16]}")
    for path in args.adapter:
        adapter = load_adapter(path)
        before = net.frozen_checksums()
        switch_task(net, adapter)
        unchanged = net.frozen_checksums() == before
        digest, loss = _probe(net, data)
        steps.append({"adapter": path, "task": adapter.task, "output_sha256": digest, "loss": loss,
                      "non_scale_checksums_unchanged": unchanged, "scale_entries": adapter.scale_count})
        print(f"{adapter.task}: loss {loss!r} outputs {digest[:16]} frozen tensors unchanged: {unchanged}")
    run.results = {"steps": steps}
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(steps, fh, indent=2)
            fh.write("\n")


def cmd_bench(args, run):
    c = run.config
    run.will_write(args.out)
    report = bench_matvec(_sizes(c["sizes"]), _ints(c["bits"]), repeats=int(c["repeats"]),
                          group_size=_group(c["group"]), seed=c["seed"])
    text = report.to_csv(args.out)
    sys.stdout.write(text)
    run.results = {"rows": len(report.rows)}


def cmd_size(args, run):
    c = run.config
    run.will_write(args.out)
    cats = [load_catalog(name) for name in c["catalog"]]
    g = _group(c["group"])
    rows = size_table(cats, int(c["bits"]), g, int(c["dense_bits"]))
    print(format_size_table(rows, int(c["bits"]), g))
    print()
    for cat in cats:
        n = count_learnable(cat, g)
        states = ", ".join(f"{k} {optimizer_state_bytes(n, convention=k) / 1e6:.1f} MB" for k in OPTIMIZER_CONVENTIONS)
        print(f"{cat.name}: PEQA learnable {n:,}; AdamW state {states}")
    if args.out:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        with open(args.out, "w") as fh:
            fh.write(buf.getvalue())
    run.results = {"rows": rows}


# -- parser ----------------------------------------------------------------------------


def _common(p):
    p.add_argument("--config", help="JSON file of option defaults (flags override it)")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("--manifest", help="run manifest path (default: next to the first output)")


def build_parser():
    parser = argparse.ArgumentParser(prog="peqa", description="Quantized low-bit models with swappable scale adapters.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train a dense network from scratch")
    p.add_argument("--data", required=True, help=".txt (byte-level text) or .csv (x,y regression)")
    p.add_argument("--out", required=True, help="dense checkpoint (.npz)")
    p.add_argument("--arch", choices=["tiny-transformer"])
    for k in ("width", "blocks", "heads", "context", "epochs", "batch-size", "seed"):
        p.add_argument(f"--{k}", type=int)
    p.add_argument("--hidden", help="mlp hidden widths, comma separated")
    p.add_argument("--lr", type=float)
    p.add_argument("--report", help="training report CSV")
    _common(p)

    p = sub.add_parser("quantize", help="quantize a dense checkpoint into a base file")
    p.add_argument("--in", dest="input", required=True, help="dense checkpoint (.npz)")
    p.add_argument("--bits", type=int, choices=ALLOWED_BITS)
    p.add_argument("--group", help="group size, or 'channel' for one scale per row")
    p.add_argument("--out", required=True, help="base file (.pqab)")
    _common(p)

    p = sub.add_parser("finetune", help="adapt a base to a task")
    p.add_argument("--base", required=True, help="base file (.pqab) or dense checkpoint (.npz)")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", help="held-out corpus (default: the last 10%% of --data)")
    p.add_argument("--mode", choices=["peqa", "qat", "rtn", "full"])
    p.add_argument("--task")
    p.add_argument("--out", required=True, help="adapter (peqa/rtn), base file (qat) or dense checkpoint (full)")
    for k in ("epochs", "batch-size", "seed", "bits"):
        p.add_argument(f"--{k}", type=int)
    for k in ("lr", "weight-decay", "clip-norm"):
        p.add_argument(f"--{k}", type=float)
    p.add_argument("--group")
    p.add_argument("--report-csv")
    p.add_argument("--report-json")
    _common(p)

    p = sub.add_parser("eval", help="held-out loss and perplexity")
    p.add_argument("--base", required=True)
    p.add_argument("--adapter")
    p.add_argument("--data", required=True)
    p.add_argument("--csv")
    _common(p)

    p = sub.add_parser("switch", help="apply adapters in turn and probe the outputs")
    p.add_argument("--base", required=True)
    p.add_argument("--adapter", action="append", required=True, help="repeat to switch several times")
    p.add_argument("--probe", required=True)
    p.add_argument("--out", help="JSON record of each switch")
    _common(p)

    p = sub.add_parser("bench", help="fused quantized matvec benchmark")
    p.add_argument("--sizes", help="comma separated NxM list")
    p.add_argument("--bits", help="comma separated bit-widths")
    p.add_argument("--group")
    p.add_argument("--repeats", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="BenchReport CSV")
    _common(p)

    p = sub.add_parser("size", help="learnable-parameter and model-size table")
    p.add_argument("--catalog", action="append", help=f"one of {', '.join(CATALOG_NAMES)} or a JSON path; repeatable")
    p.add_argument("--bits", type=int)
    p.add_argument("--group")
    p.add_argument("--dense-bits", type=int)
    p.add_argument("--out", help="CSV")
    _common(p)
    return parser


COMMANDS = {
    "pretrain": cmd_pretrain,
    "quantize": cmd_quantize,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "switch": cmd_switch,
    "bench": cmd_bench,
    "size": cmd_size,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    set_threads()
    run = None
    status, code = "ok", EXIT_OK
    try:
        run = Run(args.command, args, resolve(args.command, args))
        COMMANDS[args.command](args, run)
    except (UsageError, ConfigError) as exc:
        status, code = f"usage error: {exc}", EXIT_USAGE
    except DivergenceError as exc:
        status, code = f"diverged: {exc}", EXIT_DIVERGED
    except (IntegrityError, ShapeError, OSError, ValueError, KeyError) as exc:
        status, code = f"data error: {exc}", EXIT_DATA
    if code != EXIT_OK:
        print(f"peqa {args.command}: {status}", file=sys.stderr)
    if run is not None and code != EXIT_USAGE:
        try:
            run.finish(status)
        except OSError as exc:
            print(f"peqa: could not write manifest: {exc}", file=sys.stderr)
            code = code or EXIT_DATA
    return code


if __name__ == "__main__":
    sys.exit(main())
