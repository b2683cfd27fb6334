"""Compact CPU neural machine translation engine.

Single-threaded BLAS by default so that results are reproducible run to
run; set NMT_NUM_THREADS before the first import to change it.
"""

import os

_threads = os.environ.get("NMT_NUM_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    CapabilityError,
    ConfigError,
    DataError,
    InputError,
    NumericError,
    ShapeError,
    SkiffError,
    StateError,
)
from .kernels import GradTape, Tensor, grad_check  # noqa: E402
from .model import Model, ModelConfig, SourceFactorSpec, TargetFactorSpec  # noqa: E402

__all__ = [
    "CapabilityError",
    "ConfigError",
    "DataError",
    "GradTape",
    "InputError",
    "Model",
    "ModelConfig",
    "NumericError",
    "ShapeError",
    "SkiffError",
    "SourceFactorSpec",
    "StateError",
    "TargetFactorSpec",
    "Tensor",
    "grad_check",
    "__version__",
]
