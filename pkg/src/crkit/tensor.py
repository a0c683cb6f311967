"""Dense NCHW arrays and the primitive operators the attention modules are built from.

Tensors are plain ``numpy.ndarray`` objects of rank 4 laid out as
(batch, channel, row, col), row-major. Public entry points produce float32;
every operator is dtype-preserving so the gradient checker can replay the
same code paths in float64.
"""
from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

Tensor = np.ndarray


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_tensor(data, dtype=np.float32) -> Tensor:
    """Validate and return a C-contiguous rank-4 array of ``dtype``."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim != 4:
        raise DimensionError(f"expected a 4-D (n, c, h, w) tensor, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise DimensionError(f"all tensor dims must be >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


@dataclass(frozen=True)
class Conv1x1Params:
    """Weight ``(c_out, c_in)`` and bias ``(c_out,)`` of a pointwise convolution."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.ascontiguousarray(self.weight)
        b = np.ascontiguousarray(self.bias)
        if w.ndim != 2 or min(w.shape) < 1:
            raise DimensionError(f"conv weight must be (c_out, c_in) with both >= 1, got {w.shape}")
        if b.shape != (w.shape[0],):
            raise DimensionError(f"conv bias shape {b.shape} does not match c_out={w.shape[0]}")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def zeros(cls, c_out: int, c_in: int, dtype=np.float32) -> "Conv1x1Params":
        return cls(np.zeros((c_out, c_in), dtype), np.zeros(c_out, dtype))

    @classmethod
    def identity(cls, c: int, dtype=np.float32) -> "Conv1x1Params":
        return cls(np.eye(c, dtype=dtype), np.zeros(c, dtype))

    def astype(self, dtype) -> "Conv1x1Params":
        return Conv1x1Params(self.weight.astype(dtype), self.bias.astype(dtype))


def conv1x1(x: Tensor, p: Conv1x1Params) -> Tensor:
    if x.shape[1] != p.c_in:
        raise DimensionError(
            f"conv1x1 channel mismatch: input has {x.shape[1]} channels, weight expects {p.c_in}"
        )
    out = np.einsum("ok,nkhw->nohw", p.weight.astype(x.dtype, copy=False), x)
    out += p.bias.astype(x.dtype, copy=False)[None, :, None, None]
    return out


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0)


def tanh_map(x: Tensor) -> Tensor:
    return np.tanh(x)


def hard_sigmoid(x: Tensor) -> Tensor:
    """``max(0, min(1, (x + 1) / 2))`` elementwise."""
    return np.clip((x + 1) / 2, 0, 1)


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with per-row max subtraction."""
    shifted = m - np.max(m, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(
            f"concat needs equal (n, h, w): got {a.shape} and {b.shape}"
        )
    return np.concatenate([a, b], axis=1)


def global_avg_pool(x: Tensor) -> Tensor:
    return x.mean(axis=(2, 3), keepdims=True)


def _padded_extent(size: int, m: int) -> int:
    return -(-size // m) * m


def window_partition(x: Tensor, m: int, pad: bool = False) -> np.ndarray:
    """Split each plane into ``m x m`` windows.

    Returns an array of shape ``(n * (h/m) * (w/m), m*m, c)``. Windows are
    ordered batch-major, then window-row, then window-col; tokens inside a
    window are row-major. With ``pad=True`` non-divisible planes are
    zero-padded at the bottom/right.
    """
    if m < 1:
        raise ValueError(f"window size must be >= 1, got {m}")
    n, c, h, w = x.shape
    if h % m or w % m:
        if not pad:
            raise DimensionError(f"spatial dims ({h}, {w}) are not divisible by window size {m}")
        hp, wp = _padded_extent(h, m), _padded_extent(w, m)
        padded = np.zeros((n, c, hp, wp), dtype=x.dtype)
        padded[:, :, :h, :w] = x
        x, h, w = padded, hp, wp
    t = x.reshape(n, c, h // m, m, w // m, m)
    t = t.transpose(0, 2, 4, 3, 5, 1)
    return np.ascontiguousarray(t.reshape(n * (h // m) * (w // m), m * m, c))


def window_merge(wins: np.ndarray, shape: tuple[int, int, int, int]) -> Tensor:
    """Inverse of :func:`window_partition`; crops any bottom/right padding."""
    n, c, h, w = shape
    if wins.ndim != 3:
        raise DimensionError(f"windowed view must be 3-D, got shape {wins.shape}")
    m = math.isqrt(wins.shape[1])
    if m * m != wins.shape[1] or wins.shape[2] != c:
        raise DimensionError(f"windowed view {wins.shape} inconsistent with shape {shape}")
    hp, wp = _padded_extent(h, m), _padded_extent(w, m)
    if wins.shape[0] != n * (hp // m) * (wp // m):
        raise DimensionError(f"window count {wins.shape[0]} inconsistent with shape {shape} and m={m}")
    t = wins.reshape(n, hp // m, wp // m, m, m, c).transpose(0, 5, 1, 3, 2, 4)
    t = t.reshape(n, c, hp, wp)
    return np.ascontiguousarray(t[:, :, :h, :w])


def window_broadcast(values: np.ndarray, shape: tuple[int, int, int, int], m: int) -> Tensor:
    """Expand one scalar per window (partition order) to a full ``(n, 1, h, w)`` map."""
    n, _, h, w = shape
    grid = values.reshape(n, h // m, w // m)
    full = np.repeat(np.repeat(grid, m, axis=1), m, axis=2)
    return full[:, None, :, :]
