"""Critical-region-selector attention.

Guidance (texture map, offsets, per-window key mask) followed by self-attention
restricted to the masked critical regions of each window, with a residual
connection back onto the input feature map.

Every stage is a standalone function so tests and the gradient checker can
drive them individually; :func:`crselector_forward` chains them.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import NamedTuple

import numpy as np

from .rng import RngState, gumbel_noise, uniform
from .tensor import (
    Conv1x1Params,
    DimensionError,
    Tensor,
    concat_channels,
    conv1x1,
    relu,
    softmax_rows,
    window_broadcast,
    window_merge,
    window_partition,
)


@dataclass(frozen=True)
class CRSelectorParams:
    gti_conv1: Conv1x1Params
    gti_conv2: Conv1x1Params
    v_conv: Conv1x1Params
    offset_conv: Conv1x1Params
    reduce_w: np.ndarray  # (1, 2c), bias-free fusion of [V, GTI] down to one channel
    w_mask: np.ndarray  # (m*m, 2): keep / drop logits
    w_q: np.ndarray
    w_k: np.ndarray
    out_conv: Conv1x1Params
    m: int
    r: float
    tau: float = 1.0
    hard_mask: bool = True

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"window size m must be >= 1, got {self.m}")
        if not self.r >= 0:
            raise ValueError(f"offset scale r must be >= 0, got {self.r}")
        if not self.tau > 0:
            raise ValueError(f"temperature tau must be > 0, got {self.tau}")
        c = self.channels
        checks = [
            (self.gti_conv2.c_out == c, f"gti_conv2 must output {c} channels"),
            (self.gti_conv2.c_in == self.gti_conv1.c_out, "gti_conv1/gti_conv2 widths disagree"),
            (self.v_conv.weight.shape == (c, c), f"v_conv must be {c}x{c}"),
            (self.offset_conv.c_out == 2, "offset_conv must output 2 channels"),
            (self.offset_conv.c_in == 2 * c, f"offset_conv must take {2 * c} channels"),
            (np.shape(self.reduce_w) == (1, 2 * c), f"reduce_w must be (1, {2 * c})"),
            (np.shape(self.w_mask) == (self.m * self.m, 2), f"w_mask must be ({self.m * self.m}, 2)"),
            (np.shape(self.w_q) == (c, c), f"w_q must be ({c}, {c})"),
            (np.shape(self.w_k) == (c, c), f"w_k must be ({c}, {c})"),
            (self.out_conv.weight.shape == (c, c), f"out_conv must be {c}x{c}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise DimensionError(msg)

    @property
    def channels(self) -> int:
        return self.v_conv.c_out

    @property
    def d(self) -> int:
        return self.channels

    def astype(self, dtype) -> "CRSelectorParams":
        changes = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Conv1x1Params):
                changes[f.name] = v.astype(dtype)
            elif isinstance(v, np.ndarray):
                changes[f.name] = v.astype(dtype)
        return replace(self, **changes)

    @classmethod
    def random(cls, c: int, m: int, rng: RngState, *, c_img: int = 1, scale: float = 0.5,
               r: float | None = None, tau: float = 1.0, hard_mask: bool = True,
               zero_out: bool = False) -> "CRSelectorParams":
        """Uniform(-scale, scale) weights drawn from ``rng``; ``r`` defaults to ``m``."""
        counter = iter(range(1_000))

        def draw(*shape):
            sub = rng.substream(f"{rng.stream}/param{next(counter)}")
            return (uniform(sub, shape) * scale).astype(np.float32)

        def conv(c_out, c_in):
            return Conv1x1Params(draw(c_out, c_in), draw(c_out))

        out = Conv1x1Params.zeros(c, c) if zero_out else conv(c, c)
        return cls(
            gti_conv1=conv(c, c_img),
            gti_conv2=conv(c, c),
            v_conv=conv(c, c),
            offset_conv=conv(2, 2 * c),
            reduce_w=draw(1, 2 * c),
            w_mask=draw(m * m, 2),
            w_q=draw(c, c),
            w_k=draw(c, c),
            out_conv=out,
            m=m,
            r=float(m if r is None else r),
            tau=tau,
            hard_mask=hard_mask,
        )


class GuidanceOutput(NamedTuple):
    offset: Tensor
    offset_map: Tensor
    keymask: np.ndarray  # one value per window, partition order


def resize_nearest(image: Tensor, h: int, w: int) -> Tensor:
    """Nearest-neighbour resample: output row i reads source row floor(i * H / h)."""
    H, W = image.shape[2:]
    rows = (np.arange(h) * H) // h
    cols = (np.arange(w) * W) // w
    return np.ascontiguousarray(image[:, :, rows][:, :, :, cols])


def compute_gti(image: Tensor, p: CRSelectorParams) -> Tensor:
    return conv1x1(relu(conv1x1(image, p.gti_conv1)), p.gti_conv2)


def compute_offset(x: Tensor, gti: Tensor, p: CRSelectorParams) -> Tensor:
    pre = conv1x1(relu(concat_channels(x, gti)), p.offset_conv)
    return np.tanh(pre) * x.dtype.type(p.r)


def _bilinear_setup(x: Tensor, offset: Tensor):
    n, c, h, w = x.shape
    if offset.shape != (n, 2, h, w):
        raise DimensionError(f"offset must have shape {(n, 2, h, w)}, got {offset.shape}")
    jj = np.arange(w, dtype=x.dtype)[None, None, :]
    ii = np.arange(h, dtype=x.dtype)[None, :, None]
    sx_raw = jj + offset[:, 0]
    sy_raw = ii + offset[:, 1]
    sx = np.clip(sx_raw, 0, w - 1)
    sy = np.clip(sy_raw, 0, h - 1)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (sx - x0).astype(x.dtype)
    wy = (sy - y0).astype(x.dtype)
    inside_x = (sx_raw >= 0) & (sx_raw <= w - 1)
    inside_y = (sy_raw >= 0) & (sy_raw <= h - 1)
    return x0, x1, y0, y1, wx, wy, inside_x, inside_y


def _gather(x: Tensor, yi: np.ndarray, xi: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    b = np.arange(n)[:, None, None]
    # (n, h, w, c) -> (n, c, h, w)
    return np.moveaxis(x.transpose(0, 2, 3, 1)[b, yi, xi], -1, 1)


def warp_bilinear(x: Tensor, offset: Tensor) -> Tensor:
    """Sample ``x`` at (col + offset[:, 0], row + offset[:, 1]), clamped to the border."""
    x0, x1, y0, y1, wx, wy, _, _ = _bilinear_setup(x, offset)
    v00, v01 = _gather(x, y0, x0), _gather(x, y0, x1)
    v10, v11 = _gather(x, y1, x0), _gather(x, y1, x1)
    wx, wy = wx[:, None], wy[:, None]
    top = (1 - wx) * v00 + wx * v01
    bottom = (1 - wx) * v10 + wx * v11
    return np.ascontiguousarray((1 - wy) * top + wy * bottom)


def mask_logits(v: Tensor, gti: Tensor, p: CRSelectorParams) -> np.ndarray:
    """Per-window (keep, drop) logits from the fused, reduced V/GTI features."""
    reduced = np.einsum("k,nkhw->nhw", p.reduce_w[0].astype(v.dtype, copy=False),
                        concat_channels(v, gti))[:, None]
    vec = window_partition(reduced, p.m)[:, :, 0]
    return vec @ p.w_mask.astype(v.dtype, copy=False)


def gumbel_softmax(logits: np.ndarray, noise: np.ndarray, tau: float, hard: bool) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(forward value, soft probabilities)`` for 2-class logits.

    In hard mode the forward value is the one-hot argmax (ties go to class 0,
    "keep"); its gradient is that of the soft probabilities.
    """
    soft = softmax_rows((logits + noise) / logits.dtype.type(tau))
    if not hard:
        return soft, soft
    one_hot = np.zeros_like(soft)
    one_hot[np.arange(len(soft)), np.argmax(soft, axis=1)] = 1
    return one_hot, soft


def compute_keymask(v: Tensor, gti: Tensor, p: CRSelectorParams, rng: RngState,
                    noise: np.ndarray | None = None) -> np.ndarray:
    """Keep value per window: soft probability or straight-through 0/1."""
    logits = mask_logits(v, gti, p)
    if noise is None:
        noise = gumbel_noise(rng, logits.shape)
    y, _ = gumbel_softmax(logits, noise.astype(logits.dtype), p.tau, p.hard_mask)
    return y[:, 0]


def partition_regions(offset_map: Tensor, v: Tensor, keymask: np.ndarray, m: int):
    """Split into masked keys, critical values and normal values."""
    if offset_map.shape != v.shape:
        raise DimensionError(f"offset map {offset_map.shape} and V {v.shape} differ")
    km = window_broadcast(np.asarray(keymask, dtype=v.dtype), v.shape, m)
    k_tilde = offset_map * km
    v_c = v * km
    v_n = v * (1 - km)
    return k_tilde, v_c, v_n


def project_qk(k_tilde: Tensor, p: CRSelectorParams) -> tuple[Tensor, Tensor]:
    if k_tilde.shape[1] != p.channels:
        raise DimensionError(f"k_tilde has {k_tilde.shape[1]} channels, expected {p.channels}")
    q = np.einsum("nkhw,ko->nohw", k_tilde, p.w_q.astype(k_tilde.dtype, copy=False))
    k = np.einsum("nkhw,ko->nohw", k_tilde, p.w_k.astype(k_tilde.dtype, copy=False))
    return q, k


def attention_weights(q: Tensor, k: Tensor, m: int, d: int) -> np.ndarray:
    """Row-stochastic ``(windows, m*m, m*m)`` attention matrices."""
    qw, kw = window_partition(q, m), window_partition(k, m)
    scores = qw @ kw.transpose(0, 2, 1) / np.sqrt(q.dtype.type(d))
    return softmax_rows(scores)


def attend(q: Tensor, k: Tensor, v_c: Tensor, m: int, d: int) -> Tensor:
    """Windowed attention output before the output projection."""
    if not q.shape == k.shape == v_c.shape:
        raise DimensionError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v_c.shape}")
    a = attention_weights(q, k, m, d)
    return window_merge(a @ window_partition(v_c, m), v_c.shape)


def windowed_attention(q: Tensor, k: Tensor, v_c: Tensor, p: CRSelectorParams) -> Tensor:
    return conv1x1(attend(q, k, v_c, p.m, p.d), p.out_conv)


def guidance(x: Tensor, image: Tensor, p: CRSelectorParams, rng: RngState,
             noise: np.ndarray | None = None):
    """Run the guidance half; returns ``(GuidanceOutput, v, gti)``."""
    if x.shape[1] != p.channels:
        raise DimensionError(f"feature map has {x.shape[1]} channels, params expect {p.channels}")
    if x.shape[0] != image.shape[0]:
        raise DimensionError(f"batch mismatch: features {x.shape[0]}, image {image.shape[0]}")
    img = resize_nearest(image.astype(x.dtype, copy=False), *x.shape[2:])
    gti = compute_gti(img, p)
    v = conv1x1(x, p.v_conv)
    offset = compute_offset(x, gti, p)
    offset_map = warp_bilinear(x, offset)
    keymask = compute_keymask(v, gti, p, rng, noise)
    return GuidanceOutput(offset, offset_map, keymask), v, gti


def crselector_forward(x: Tensor, image: Tensor, p: CRSelectorParams, rng: RngState, *,
                       keymask: np.ndarray | None = None, noise: np.ndarray | None = None,
                       return_guidance: bool = False):
    """Full forward pass returning ``x + x'`` (same shape as ``x``).

    ``keymask`` overrides the sampled mask; ``noise`` freezes the Gumbel draw.
    """
    g, v, _ = guidance(x, image, p, rng, noise)
    if keymask is not None:
        g = g._replace(keymask=np.asarray(keymask, dtype=x.dtype).reshape(g.keymask.shape))
    k_tilde, v_c, _ = partition_regions(g.offset_map, v, g.keymask, p.m)
    q, k = project_qk(k_tilde, p)
    out = x + windowed_attention(q, k, v_c, p)
    return (out, g) if return_guidance else out
