"""Scale-aware head: one gate per pyramid level, applied as a residual multiplier."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Conv1x1Params, DimensionError, Tensor, conv1x1, global_avg_pool, hard_sigmoid, relu

PyramidFeatures = list  # list[Tensor], level order preserved


@dataclass(frozen=True)
class ScAParams:
    gate_conv: Conv1x1Params

    def __post_init__(self):
        if self.gate_conv.c_out != 1:
            raise DimensionError(f"gate conv must have c_out == 1, got {self.gate_conv.c_out}")

    @property
    def channels(self) -> int:
        return self.gate_conv.c_in

    def astype(self, dtype) -> "ScAParams":
        return ScAParams(self.gate_conv.astype(dtype))


def check_pyramid(levels: Sequence[Tensor]) -> None:
    if len(levels) == 0:
        raise DimensionError("pyramid needs at least one level")
    n, c = levels[0].shape[:2]
    for i, lvl in enumerate(levels):
        if lvl.ndim != 4 or lvl.shape[:2] != (n, c):
            raise DimensionError(
                f"level {i} has shape {lvl.shape}; all levels must share (n, c) = {(n, c)}"
            )


def gate_preactivation(level: Tensor, p: ScAParams) -> np.ndarray:
    """Gate conv applied to the pooled level, shape ``(n,)``."""
    return conv1x1(global_avg_pool(level), p.gate_conv)[:, 0, 0, 0]


def scale_weights(levels: Sequence[Tensor], p: ScAParams) -> np.ndarray:
    """Gamma for every (batch element, level): array of shape ``(n, H)`` in [0, 1]."""
    check_pyramid(levels)
    if levels[0].shape[1] != p.channels:
        raise DimensionError(
            f"gate conv expects {p.channels} channels, pyramid has {levels[0].shape[1]}"
        )
    return np.stack([hard_sigmoid(relu(gate_preactivation(lvl, p))) for lvl in levels], axis=1)


def apply_scale_weighting(levels: Sequence[Tensor], gamma: np.ndarray) -> list[Tensor]:
    """Per-level residual re-weighting ``gamma_h * F_h + F_h``."""
    check_pyramid(levels)
    gamma = np.asarray(gamma)
    if gamma.ndim == 1:
        gamma = np.broadcast_to(gamma, (levels[0].shape[0], gamma.shape[0]))
    if gamma.shape != (levels[0].shape[0], len(levels)):
        raise DimensionError(
            f"gamma shape {gamma.shape} does not match (batch, levels) = {(levels[0].shape[0], len(levels))}"
        )
    out = []
    for h, lvl in enumerate(levels):
        g = gamma[:, h].astype(lvl.dtype)[:, None, None, None]
        out.append(g * lvl + lvl)
    return out


def sca_forward(levels: Sequence[Tensor], p: ScAParams) -> list[Tensor]:
    return apply_scale_weighting(levels, scale_weights(levels, p))
