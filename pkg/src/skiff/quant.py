"""Dynamic INT8 inference for feed-forward linear layers.

Weights are quantized offline per output row: scale = max|row| / 127,
values rounded half away from zero. Activations are quantized on the fly
per input row with the same rule. The integer product accumulates in
int32, so the numba kernel and the pure numpy fallback produce identical
integers; the only float rounding happens in the final rescale.

Everything outside the feed-forward linears (embeddings, attention,
norms, output heads) stays float32.
"""

from __future__ import annotations

import numpy as np

from . import kernels as K
from .errors import ConfigError, ShapeError, StateError
from .kernels import Tensor

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False

# int32 accumulation is exact while k * 127 * 127 stays below 2**31.
_MAX_INNER = (2 ** 31) // (127 * 127)

FFN_WEIGHT_SUFFIXES = (".ffn.w1", ".ffn.w2")


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (numpy rounds ties
    to even, which would bias the quantizer)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_rows(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric per-row quantization of a (rows, cols) float matrix."""
    w = np.asarray(w, dtype=np.float32)
    if w.ndim != 2:
        raise ShapeError(f"quantize_rows needs a matrix, got shape {w.shape}")
    if w.shape[1] > _MAX_INNER:
        raise ConfigError(f"inner extent {w.shape[1]} would overflow int32 accumulation")
    if not np.isfinite(w).all():
        raise ShapeError("quantize_rows: non-finite weights")
    maxabs = np.abs(w).max(axis=1)
    scales = np.where(maxabs > 0, maxabs / 127.0, 1.0).astype(np.float32)
    q = round_half_away(w / scales[:, None])
    q = np.clip(q, -127, 127).astype(np.int8)
    return q, scales


def dequantize_rows(q: np.ndarray, scales: np.ndarray) -> np.ndarray:
    return (q.astype(np.float32) * np.asarray(scales, dtype=np.float32)[:, None])


def _gemm_i8_numpy(qx: np.ndarray, qw: np.ndarray) -> np.ndarray:
    """(m, k) int8 times (n, k) int8 -> (m, n) int32."""
    return qx.astype(np.int32) @ qw.astype(np.int32).T


if _HAVE_NUMBA:

    @njit("int32[:, ::1](int8[:, ::1], int8[:, ::1])", cache=True)
    def _gemm_i8_numba(qx, qw):  # pragma: no cover - compiled
        m, k = qx.shape
        n = qw.shape[0]
        out = np.zeros((m, n), dtype=np.int32)
        for i in range(m):
            for j in range(n):
                acc = np.int32(0)
                for t in range(k):
                    acc += np.int32(qx[i, t]) * np.int32(qw[j, t])
                out[i, j] = acc
        return out

else:  # pragma: no cover - exercised only without numba
    _gemm_i8_numba = None


def gemm_i8(qx: np.ndarray, qw: np.ndarray, use_numba: bool | None = None) -> np.ndarray:
    """Integer GEMM with identical results on both backends."""
    if qx.dtype != np.int8 or qw.dtype != np.int8:
        raise ShapeError("gemm_i8 needs int8 operands")
    if qx.shape[1] != qw.shape[1]:
        raise ShapeError(f"gemm_i8 inner extents differ: {qx.shape} vs {qw.shape}")
    if use_numba is None:
        use_numba = _HAVE_NUMBA
    if use_numba and _gemm_i8_numba is not None:
        return _gemm_i8_numba(np.ascontiguousarray(qx), np.ascontiguousarray(qw))
    return _gemm_i8_numpy(qx, qw)


def quantize_activations(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row dynamic quantization of float activations (rows, k)."""
    maxabs = np.abs(x).max(axis=1)
    scales = np.where(maxabs > 0, maxabs / 127.0, 1.0).astype(np.float32)
    q = np.clip(round_half_away(x / scales[:, None]), -127, 127).astype(np.int8)
    return q, scales


class QuantizedLinear:
    """Inference-only replacement for x @ w.T with an int8 weight matrix."""

    def __init__(self, q: np.ndarray, scales: np.ndarray):
        if q.ndim != 2 or scales.shape != (q.shape[0],):
            raise ShapeError("QuantizedLinear needs (out, in) values and per-row scales")
        self.q = np.ascontiguousarray(q, dtype=np.int8)
        if not self.q.flags.writeable:
            # The jitted kernel's signature only admits writable arrays.
            self.q = self.q.copy()
        self.scales = np.asarray(scales, dtype=np.float32)

    @classmethod
    def from_weights(cls, w: np.ndarray) -> "QuantizedLinear":
        return cls(*quantize_rows(w))

    def __call__(self, x: Tensor, bias: Tensor | None = None) -> Tensor:
        if K._active_tape() is not None and x.requires_grad:
            raise StateError("quantized layers cannot be recorded for gradients")
        data = x.data
        lead = data.shape[:-1]
        flat = np.ascontiguousarray(data.reshape(-1, data.shape[-1]), dtype=np.float32)
        qx, a_scales = quantize_activations(flat)
        acc = gemm_i8(qx, self.q)
        out = acc.astype(np.float32) * a_scales[:, None] * self.scales[None, :]
        if bias is not None:
            out = out + bias.data
        return Tensor(out.reshape(lead + (self.q.shape[0],)))


def quantized_param_names(model) -> list[str]:
    return [name for name in model.params.names()
            if name.endswith(FFN_WEIGHT_SUFFIXES)]


def quantize_model(model) -> list[str]:
    """Swap every feed-forward linear to the int8 path. Returns the names."""
    names = quantized_param_names(model)
    for name in names:
        model.quantized[name] = QuantizedLinear.from_weights(model.params[name].data)
    return names


def save_quantized(path, model) -> None:
    """Write a checkpoint where feed-forward weights are int8 + scales and
    everything else stays float32."""
    from .checkpoint import write_quantized_checkpoint

    names = set(quantized_param_names(model))
    entries: dict = {}
    for name, t in model.params.items():
        if name in names:
            entries[name] = quantize_rows(t.data)
        else:
            entries[name] = t.data
    write_quantized_checkpoint(path, entries)


def load_quantized(path, config):
    """Build a model from a quantized checkpoint. Int8 entries are used on
    the integer path; their float32 slots hold the dequantized values so
    the parameter set stays complete."""
    from .checkpoint import read_quantized_checkpoint
    from .model import Model, ModelParams

    entries = read_quantized_checkpoint(path)
    params = ModelParams()
    quantized = {}
    for name, entry in entries.items():
        if isinstance(entry, tuple):
            q, scales = entry
            quantized[name] = QuantizedLinear(q, scales)
            params.add(name, dequantize_rows(q, scales))
        else:
            params.add(name, entry)
    model = Model(config, params=params)
    model.quantized.update(quantized)
    return model
