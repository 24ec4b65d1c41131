"""scikit-learn style wrappers.

``WeightQuantizer`` turns a weight matrix into codes and back, so it can sit
in a pipeline or a grid search over bit-widths. ``PEQARegressor`` and
``PEQALanguageModel`` wrap the quantize-then-fine-tune workflow behind
``fit`` / ``predict`` / ``score``.
"""

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import RegressionDataset, TextDataset, split, text_windows
from .model import ArchSpec, build, evaluate, perplexity
from .packbits import pack
from .qcore import CodeMatrix, QuantConfig, dequantize, group_errors, init_scale_zero, quantize_codes
from .trainer import TrainConfig, train


class WeightQuantizer(TransformerMixin, BaseEstimator):
    """Per-channel or group-wise asymmetric quantizer with MSE-optimal scales.

    ``fit`` learns scales and zero-points for one weight matrix; ``transform``
    returns integer codes for a same-shaped matrix under those scales and
    ``inverse_transform`` maps codes back to real weights.
    """

    def __init__(self, bits=4, group_size=None, method="exact"):
        self.bits = bits
        self.group_size = group_size
        self.method = method

    def _config(self):
        return QuantConfig(self.bits, self.group_size)

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.config_ = self._config()
        self.scales_, codes = init_scale_zero(X, self.config_, method=self.method)
        self.n_features_in_ = X.shape[1]
        self.reconstruction_error_ = group_errors(X, codes, self.scales_)
        self.packed_ = pack(codes)
        return self

    def transform(self, X):
        check_is_fitted(self, "scales_")
        X = check_array(X, dtype=np.float64)
        if X.shape != self.scales_.s.shape[:1] + (self.n_features_in_,):
            raise ValueError(f"expected shape {(self.scales_.s.shape[0], self.n_features_in_)}, got {X.shape}")
        return quantize_codes(X, self.scales_, self.config_).q

    def inverse_transform(self, X):
        check_is_fitted(self, "scales_")
        return dequantize(CodeMatrix(np.asarray(X, dtype=np.uint8), self.bits), self.scales_)


class _FineTuner(BaseEstimator):
    def _fit_network(self, net, dataset):
        cfg = QuantConfig(self.bits, self.group_size)
        if self.pretrain_epochs:
            train(net, dataset, TrainConfig("full", self.pretrain_epochs, self.batch_size, self.pretrain_lr, seed=self.seed))
        if self.mode != "full":
            net = net.quantize(cfg, mode=self.mode)
        tc = TrainConfig(self.mode, self.epochs, self.batch_size, self.lr, seed=self.seed)
        self.report_ = train(net, dataset, tc)
        self.network_ = net
        self.n_trainable_ = net.n_trainable()
        return self


class PEQARegressor(RegressorMixin, _FineTuner):
    """Single-output ReLU network, pretrained dense then quantized and adapted.

    With ``mode="peqa"`` only the quantization scales are trained after the
    dense warm-up; ``"rtn"`` skips adaptation entirely.
    """

    def __init__(self, hidden=(32, 32), bits=4, group_size=None, mode="peqa", epochs=20, lr=1e-3,
                 pretrain_epochs=50, pretrain_lr=3e-3, batch_size=32, seed=0):
        self.hidden = hidden
        self.bits = bits
        self.group_size = group_size
        self.mode = mode
        self.epochs = epochs
        self.lr = lr
        self.pretrain_epochs = pretrain_epochs
        self.pretrain_lr = pretrain_lr
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        Y = y.reshape(-1, 1)
        (Xt, Yt), (Xe, Ye) = split((X, Y))
        self.n_features_in_ = X.shape[1]
        arch = ArchSpec(kind="mlp", dims=[X.shape[1], *self.hidden, 1])
        return self._fit_network(build(arch, self.seed), RegressionDataset(Xt, Yt, Xe, Ye))

    def predict(self, X):
        check_is_fitted(self, "network_")
        X = check_array(X, dtype=np.float64)
        return self.network_.predict(X)[:, 0]


class PEQALanguageModel(_FineTuner):
    """Byte-level tiny transformer; ``X`` is a 1-D array of byte values.

    ``score`` is the negative mean per-byte cross-entropy so that larger is
    better, as scikit-learn expects.
    """

    def __init__(self, width=64, blocks=2, heads=4, context=32, bits=4, group_size=None, mode="peqa",
                 epochs=1, lr=1e-3, pretrain_epochs=0, pretrain_lr=3e-3, batch_size=16, seed=0):
        self.width = width
        self.blocks = blocks
        self.heads = heads
        self.context = context
        self.bits = bits
        self.group_size = group_size
        self.mode = mode
        self.epochs = epochs
        self.lr = lr
        self.pretrain_epochs = pretrain_epochs
        self.pretrain_lr = pretrain_lr
        self.batch_size = batch_size
        self.seed = seed

    @staticmethod
    def _tokens(X):
        X = np.asarray(X)
        if X.ndim != 1 or X.size == 0 or X.min() < 0 or X.max() > 255:
            raise ValueError("expected a non-empty 1-D array of byte values")
        return X.astype(np.int64)

    def fit(self, X, y=None):
        tokens = self._tokens(X)
        train_part, held = split(tokens)
        arch = ArchSpec(width=self.width, blocks=self.blocks, heads=self.heads, context=self.context)
        return self._fit_network(build(arch, self.seed), TextDataset(train_part, held, self.context))

    def loss(self, X):
        check_is_fitted(self, "network_")
        windows = text_windows(self._tokens(X), self.context)
        return evaluate(self.network_, (windows[i : i + 64] for i in range(0, len(windows), 64)))

    def score(self, X, y=None):
        return -self.loss(X)

    def perplexity(self, X):
        return perplexity(self.loss(X))
