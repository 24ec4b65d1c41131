"""Scale-only fine-tuning of low-bit quantized networks."""

import numba as _numba

# The TBB layer shipped with some numba builds is too old and warns on first use.
_numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]

from .exceptions import (  # noqa: E402
    ChecksumError,
    ConfigError,
    DivergenceError,
    IntegrityError,
    NumericError,
    PEQAError,
    ShapeError,
    StateError,
    WrongBaseError,
)
from .qcore import (  # noqa: E402
    CHANNEL,
    CodeMatrix,
    QuantConfig,
    ScaleSet,
    apply_scale_delta,
    dequantize,
    init_scale_zero,
    quantize_codes,
)

__version__ = "0.1.0"
