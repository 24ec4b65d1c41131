"""Corpora and batching.

Text is modeled byte by byte (vocabulary 256). Regression data is a
two-column CSV ``x,y``. A small seeded grammar generates synthetic text so
that the toy language-modeling task needs no downloads.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, IntegrityError


def read_text(path):
    with open(path, "rb") as fh:
        return np.frombuffer(fh.read(), dtype=np.uint8).astype(np.int64)


def read_regression_csv(path):
    """Two numeric columns; an optional non-numeric header row is skipped."""
    rows = []
    with open(path, newline="") as fh:
        for i, rec in enumerate(csv.reader(fh)):
            if not rec:
                continue
            if len(rec) != 2:
                raise IntegrityError(f"{path}:{i + 1}: expected 2 columns, got {len(rec)}")
            try:
                rows.append((float(rec[0]), float(rec[1])))
            except ValueError:
                if i == 0:
                    continue
                raise IntegrityError(f"{path}:{i + 1}: non-numeric value") from None
    if not rows:
        raise IntegrityError(f"{path}: no data rows")
    arr = np.array(rows)
    return arr[:, :1], arr[:, 1:]


def load_corpus(path):
    """Dispatch on extension: ``.csv`` is regression, ``.txt`` is byte text."""
    p = str(path)
    if p.endswith(".csv"):
        return read_regression_csv(p)
    if p.endswith(".txt"):
        return read_text(p)
    raise ConfigError(f"unsupported corpus {p!r}: expected .txt (byte-level text) or .csv (x,y regression)")


def split(data, eval_fraction=0.1):
    """Contiguous train / held-out split (held-out is the tail)."""
    if isinstance(data, tuple):
        X, Y = data
        k = max(1, int(round(len(X) * eval_fraction)))
        return (X[:-k], Y[:-k]), (X[-k:], Y[-k:])
    k = max(1, int(round(len(data) * eval_fraction)))
    return data[:-k], data[-k:]


@dataclass
class TextDataset:
    train: np.ndarray
    held: np.ndarray
    context: int

    def __post_init__(self):
        for name, arr in (("train", self.train), ("held-out", self.held)):
            if len(arr) < self.context + 1:
                raise ConfigError(f"{name} text shorter than one window of {self.context + 1} bytes")

    def epoch(self, rng, batch_size):
        """Shuffled non-overlapping windows of ``context + 1`` bytes from a random offset."""
        T = self.context
        offset = int(rng.integers(0, T))
        starts = np.arange(offset, len(self.train) - T, T)
        starts = starts[rng.permutation(len(starts))]
        for i in range(0, len(starts) - batch_size + 1, batch_size):
            idx = starts[i : i + batch_size, None] + np.arange(T + 1)
            yield self.train[idx]

    def steps_per_epoch(self, batch_size):
        # offset ranges over [0, T); count the worst case
        n = len(np.arange(self.context - 1, len(self.train) - self.context, self.context))
        return max(n // batch_size, 0)

    def eval_batches(self, batch_size=64):
        windows = text_windows(self.held, self.context)
        for i in range(0, len(windows), batch_size):
            yield windows[i : i + batch_size]


def text_windows(tokens, context):
    """Non-overlapping windows so every held-out byte after the first is predicted once."""
    T = context
    starts = np.arange(0, len(tokens) - T, T)
    return tokens[starts[:, None] + np.arange(T + 1)]


@dataclass
class RegressionDataset:
    X: np.ndarray
    Y: np.ndarray
    X_eval: np.ndarray
    Y_eval: np.ndarray

    def epoch(self, rng, batch_size):
        order = rng.permutation(len(self.X))
        for i in range(0, len(order) - batch_size + 1, batch_size):
            j = order[i : i + batch_size]
            yield self.X[j], self.Y[j]

    def steps_per_epoch(self, batch_size):
        return len(self.X) // batch_size

    def eval_batches(self, batch_size=256):
        for i in range(0, len(self.X_eval), batch_size):
            yield self.X_eval[i : i + batch_size], self.Y_eval[i : i + batch_size]


def as_dataset(data, context=None, eval_fraction=0.1):
    if isinstance(data, (TextDataset, RegressionDataset)):
        return data
    train, held = split(data, eval_fraction)
    if isinstance(data, tuple):
        return RegressionDataset(train[0], train[1], held[0], held[1])
    return TextDataset(train, held, context)


# -- synthetic text -------------------------------------------------------------

_LEX = {
    "animal": "cat dog fox owl hen bee cow yak elk ram".split(),
    "adj": "red big old shy calm quick small brave tall wild".split(),
    "verb": "saw met chased found helped fed followed watched".split(),
    "place": "barn hill river field forest garden road lake".split(),
    "food": "flour sugar butter rice beans salt milk honey".split(),
    "verb_cook": "stir mix bake boil chop fry".split(),
    "day": "monday tuesday friday sunday".split(),
    "sky": "sunny cloudy rainy windy foggy".split(),
    "name": "ana ben cy dee eli fay gus ivy".split(),
}


def _sentence(domain, rng):
    pick = lambda k: _LEX[k][rng.integers(len(_LEX[k]))]  # noqa: E731
    num = lambda: str(int(rng.integers(1, 10)))  # noqa: E731
    if domain == "story":
        return f"the {pick('adj')} {pick('animal')} {pick('verb')} the {pick('animal')} near the {pick('place')}. "
    if domain == "recipe":
        return f"{pick('verb_cook')} {num()} cups of {pick('food')} with the {pick('food')} for {num()} minutes. "
    if domain == "weather":
        return f"on {pick('day')} the sky over the {pick('place')} is {pick('sky')} and {pick('sky')}. "
    if domain == "dialog":
        return f"{pick('name')}: have you seen my {pick('adj')} {pick('animal')}? {pick('name')}: it is at the {pick('place')}. "
    raise ConfigError(f"unknown synthetic domain {domain!r}")


DOMAINS = ("story", "recipe", "weather", "dialog")


def synthetic_text(n_bytes, seed=0, domains=("story", "recipe", "weather"), weights=None):
    """Seeded text drawn sentence by sentence from the given domains."""
    rng = np.random.default_rng(seed)
    p = None if weights is None else np.asarray(weights, dtype=float) / np.sum(weights)
    parts, size = [], 0
    while size < n_bytes:
        s = _sentence(domains[rng.choice(len(domains), p=p)], rng)
        parts.append(s)
        size += len(s)
    text = "".join(parts)[:n_bytes]
    return np.frombuffer(text.encode("ascii"), dtype=np.uint8).astype(np.int64)
