"""Hand-written backward passes for every differentiable operator.

Each ``*_backward`` takes the forward inputs (or cached outputs) plus the
upstream gradient and returns gradients shaped like the inputs. They are
meant to be run on float64 replays of the forward pass.
"""
from __future__ import annotations

import numpy as np

from . import crselector as crs
from .sca import ScAParams, gate_preactivation
from .tensor import Conv1x1Params, global_avg_pool, hard_sigmoid, relu, window_merge, window_partition


def conv1x1_backward(x, p: Conv1x1Params, g):
    """Returns ``(dx, dweight, dbias)``."""
    dx = np.einsum("ok,nohw->nkhw", p.weight, g)
    dw = np.einsum("nohw,nkhw->ok", g, x)
    db = g.sum(axis=(0, 2, 3))
    return dx, dw, db


def relu_backward(x, g):
    # subgradient 0 at x == 0
    return g * (x > 0)


def tanh_backward(y, g):
    """Takes the tanh *output*."""
    return g * (1 - y * y)


def hard_sigmoid_backward(x, g):
    return g * 0.5 * ((x > -1) & (x < 1))


def softmax_backward(p, g):
    """Vector-Jacobian product of a last-axis softmax, given its output ``p``."""
    return p * (g - np.sum(g * p, axis=-1, keepdims=True))


def concat_backward(g, c_a: int):
    return g[:, :c_a], g[:, c_a:]


def global_avg_pool_backward(x_shape, g):
    h, w = x_shape[2:]
    return np.broadcast_to(g / (h * w), x_shape).copy()


def window_partition_backward(g, shape):
    return window_merge(g, shape)


def window_merge_backward(g, m: int):
    return window_partition(g, m, pad=True)


def resize_nearest_backward(image_shape, g):
    H, W = image_shape[2:]
    h, w = g.shape[2:]
    rows = (np.arange(h) * H) // h
    cols = (np.arange(w) * W) // w
    out = np.zeros(image_shape, dtype=g.dtype)
    np.add.at(out, (slice(None), slice(None), rows[:, None], cols[None, :]), g)
    return out


def warp_bilinear_backward(x, offset, g):
    """Returns ``(dx, doffset)``. Offsets whose sample was clamped get zero gradient."""
    n, c, h, w = x.shape
    x0, x1, y0, y1, wx, wy, inside_x, inside_y = crs._bilinear_setup(x, offset)
    gt = g.transpose(0, 2, 3, 1)  # (n, h, w, c)
    dxt = np.zeros((n, h, w, c), dtype=x.dtype)
    b = np.broadcast_to(np.arange(n)[:, None, None], x0.shape)
    for yi, xi, wgt in (
        (y0, x0, (1 - wx) * (1 - wy)),
        (y0, x1, wx * (1 - wy)),
        (y1, x0, (1 - wx) * wy),
        (y1, x1, wx * wy),
    ):
        np.add.at(dxt, (b, yi, xi), gt * wgt[..., None])
    dx = np.ascontiguousarray(dxt.transpose(0, 3, 1, 2))

    v00, v01 = crs._gather(x, y0, x0), crs._gather(x, y0, x1)
    v10, v11 = crs._gather(x, y1, x0), crs._gather(x, y1, x1)
    wx_, wy_ = wx[:, None], wy[:, None]
    ddx = ((1 - wy_) * (v01 - v00) + wy_ * (v11 - v10)) * g
    ddy = ((1 - wx_) * (v10 - v00) + wx_ * (v11 - v01)) * g
    doffset = np.stack([ddx.sum(axis=1) * inside_x, ddy.sum(axis=1) * inside_y], axis=1)
    return dx, doffset


def gumbel_softmax_backward(soft, g, tau: float):
    """Gradient w.r.t. the logits. Used for both modes: hard is straight-through."""
    return softmax_backward(soft, g) / tau


def attend_backward(q, k, v_c, m: int, d: int, g):
    """Returns ``(dq, dk, dv_c)`` for the windowed attention core."""
    scale = np.sqrt(q.dtype.type(d))
    qw, kw, vw = window_partition(q, m), window_partition(k, m), window_partition(v_c, m)
    a = crs.softmax_rows(qw @ kw.transpose(0, 2, 1) / scale)
    gw = window_partition(g, m)
    da = gw @ vw.transpose(0, 2, 1)
    dv = a.transpose(0, 2, 1) @ gw
    ds = softmax_backward(a, da) / scale
    dq = ds @ kw
    dk = ds.transpose(0, 2, 1) @ qw
    return window_merge(dq, q.shape), window_merge(dk, k.shape), window_merge(dv, v_c.shape)


def project_qk_backward(k_tilde, p, dq, dk):
    """Returns ``(dk_tilde, dw_q, dw_k)``."""
    dkt = np.einsum("nohw,ko->nkhw", dq, p.w_q) + np.einsum("nohw,ko->nkhw", dk, p.w_k)
    dwq = np.einsum("nkhw,nohw->ko", k_tilde, dq)
    dwk = np.einsum("nkhw,nohw->ko", k_tilde, dk)
    return dkt, dwq, dwk


def _window_sum(t, m):
    return window_partition(t.sum(axis=1, keepdims=True), m)[:, :, 0].sum(axis=1)


def partition_regions_backward(offset_map, v, keymask, m, dk_tilde, dv_c, dv_n):
    """Returns ``(doffset_map, dv, dkeymask)``."""
    km = crs.window_broadcast(np.asarray(keymask, dtype=v.dtype), v.shape, m)
    doffset_map = dk_tilde * km
    dv = dv_c * km + dv_n * (1 - km)
    dkm = _window_sum(dk_tilde * offset_map + (dv_c - dv_n) * v, m)
    return doffset_map, dv, dkm


def mask_logits_backward(v, gti, p, dlogits):
    """Returns ``(dv, dgti, dreduce_w, dw_mask)``."""
    cat = crs.concat_channels(v, gti)
    reduced = np.einsum("k,nkhw->nhw", p.reduce_w[0], cat)[:, None]
    vec = window_partition(reduced, p.m)[:, :, 0]
    dw_mask = vec.T @ dlogits
    dvec = dlogits @ p.w_mask.T
    dreduced = window_merge(dvec[:, :, None], reduced.shape)
    dcat = p.reduce_w[0][None, :, None, None] * dreduced
    dreduce_w = np.einsum("nhw,nkhw->k", dreduced[:, 0], cat)[None, :]
    dv, dgti = concat_backward(dcat, v.shape[1])
    return dv, dgti, dreduce_w, dw_mask


def _conv_grads(prefix, dw, db):
    return {f"{prefix}.weight": dw, f"{prefix}.bias": db}


def crselector_backward(x, image, p: "crs.CRSelectorParams", noise, g):
    """Gradients of ``sum(g * crselector_forward(...))`` for every input and weight.

    ``noise`` is the frozen Gumbel draw. In hard mode the mask gradient is the
    straight-through soft gradient.
    """
    img = crs.resize_nearest(image, *x.shape[2:])
    h1 = crs.conv1x1(img, p.gti_conv1)
    gti = crs.conv1x1(relu(h1), p.gti_conv2)
    v = crs.conv1x1(x, p.v_conv)
    cat = crs.concat_channels(x, gti)
    pre_off = crs.conv1x1(relu(cat), p.offset_conv)
    t = np.tanh(pre_off)
    offset = t * p.r
    offset_map = crs.warp_bilinear(x, offset)
    logits = crs.mask_logits(v, gti, p)
    y, soft = crs.gumbel_softmax(logits, noise, p.tau, p.hard_mask)
    keymask = y[:, 0]
    k_tilde, v_c, _ = crs.partition_regions(offset_map, v, keymask, p.m)
    q, k = crs.project_qk(k_tilde, p)
    att = crs.attend(q, k, v_c, p.m, p.d)

    grads = {}
    dx = g.copy()  # residual
    datt, dw, db = conv1x1_backward(att, p.out_conv, g)
    grads.update(_conv_grads("out_conv", dw, db))
    dq, dk, dv_c = attend_backward(q, k, v_c, p.m, p.d, datt)
    dkt, grads["w_q"], grads["w_k"] = project_qk_backward(k_tilde, p, dq, dk)
    doffset_map, dv, dkm = partition_regions_backward(
        offset_map, v, keymask, p.m, dkt, dv_c, np.zeros_like(v_c))

    dy = np.zeros_like(soft)
    dy[:, 0] = dkm
    dlogits = gumbel_softmax_backward(soft, dy, p.tau)
    dv2, dgti, grads["reduce_w"], grads["w_mask"] = mask_logits_backward(v, gti, p, dlogits)
    dv = dv + dv2

    dx_w, doffset = warp_bilinear_backward(x, offset, doffset_map)
    dx += dx_w
    dpre = tanh_backward(t, doffset * p.r)
    dcat_r, dw, db = conv1x1_backward(relu(cat), p.offset_conv, dpre)
    grads.update(_conv_grads("offset_conv", dw, db))
    dx_c, dgti_c = concat_backward(relu_backward(cat, dcat_r), x.shape[1])
    dx += dx_c
    dgti = dgti + dgti_c

    dx_v, dw, db = conv1x1_backward(x, p.v_conv, dv)
    grads.update(_conv_grads("v_conv", dw, db))
    dx += dx_v

    dh1r, dw, db = conv1x1_backward(relu(h1), p.gti_conv2, dgti)
    grads.update(_conv_grads("gti_conv2", dw, db))
    dimg, dw, db = conv1x1_backward(img, p.gti_conv1, relu_backward(h1, dh1r))
    grads.update(_conv_grads("gti_conv1", dw, db))
    grads["image"] = resize_nearest_backward(image.shape, dimg)
    grads["x"] = dx
    return grads


def sca_backward(levels, p: ScAParams, upstream):
    """Gradients of ``sum_h sum(upstream[h] * out[h])``: ``(dlevels, dweight, dbias)``."""
    w = p.gate_conv.weight
    dweight = np.zeros_like(w)
    dbias = np.zeros_like(p.gate_conv.bias)
    dlevels = []
    for lvl, g in zip(levels, upstream):
        z = gate_preactivation(lvl, p)
        u = relu(z)
        gamma = hard_sigmoid(u)
        dlvl = (1 + gamma)[:, None, None, None] * g
        dgamma = np.sum(g * lvl, axis=(1, 2, 3))
        dz = relu_backward(z, hard_sigmoid_backward(u, dgamma))
        pooled = global_avg_pool(lvl)[:, :, 0, 0]
        dweight += dz @ pooled
        dbias += dz.sum()
        dpool = (dz[:, None] * w[0][None, :])[:, :, None, None]
        dlvl = dlvl + global_avg_pool_backward(lvl.shape, dpool)
        dlevels.append(dlvl)
    return dlevels, dweight, dbias


def apply_scale_weighting_backward(levels, gamma, upstream):
    """Returns ``(dlevels, dgamma)`` with ``dgamma`` shaped ``(n, H)``."""
    dlevels = [(1 + gamma[:, h])[:, None, None, None] * g for h, g in enumerate(upstream)]
    dgamma = np.stack([np.sum(g * lvl, axis=(1, 2, 3)) for lvl, g in zip(levels, upstream)], axis=1)
    return dlevels, dgamma
