"""Central finite-difference verification of the analytic backward passes.

Each check case bundles named float64 arrays, a scalar loss over them and the
analytic gradient of that loss. :func:`run_case` perturbs up to 64 sampled
coordinates per array and compares. Cases draw their inputs so that no ReLU,
hard-sigmoid kink or bilinear cell boundary lies within ``KINK_MARGIN`` of a
sampled point.
"""
from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace
from typing import Callable, Iterator

import numpy as np

from . import backward as bw
from . import crselector as crs
from .rng import RngState, generator, gumbel_noise
from .sca import ScAParams, apply_scale_weighting, gate_preactivation, sca_forward, scale_weights
from .tensor import (
    Conv1x1Params,
    concat_channels,
    conv1x1,
    global_avg_pool,
    hard_sigmoid,
    relu,
    softmax_rows,
    window_merge,
    window_partition,
)

THRESHOLD = 1e-3
LINEAR_THRESHOLD = 1e-5
STEP = 1e-4
EPS = 1e-8
MAX_SITES = 64
KINK_MARGIN = 1e-3
MODULES = ("tensor-core", "crselector", "sca-head")


@dataclass(frozen=True)
class GradCheckReport:
    op_name: str
    param_path: str
    coord: tuple
    analytic: float
    numeric: float
    rel_err: float
    threshold: float
    passed: bool

    def line(self) -> str:
        coord = ",".join(str(c) for c in self.coord)
        return (f"op={self.op_name} path={self.param_path} coord={coord} "
                f"analytic={self.analytic:.12e} numeric={self.numeric:.12e} "
                f"rel_err={self.rel_err:.3e} pass={'true' if self.passed else 'false'}")


def rel_error(a: float, n: float, eps: float = EPS) -> float:
    return abs(a - n) / max(abs(a), abs(n), eps)


def finite_diff(loss_fn: Callable[[np.ndarray], float], point, step: float = STEP, coords=None) -> np.ndarray:
    """Central differences of ``loss_fn`` at ``point``.

    Returns the full gradient, or only the entries at ``coords`` (a list of
    index tuples) when given. ``point`` is not modified.
    """
    x = np.array(point, dtype=np.float64)
    if coords is None:
        coords = list(np.ndindex(x.shape))
        full = True
    else:
        full = False
    out = np.zeros(len(coords))
    for i, c in enumerate(coords):
        orig = x[c]
        x[c] = orig + step
        fp = loss_fn(x)
        x[c] = orig - step
        fm = loss_fn(x)
        x[c] = orig
        out[i] = (fp - fm) / (2 * step)
    return out.reshape(x.shape) if full else out


@dataclass
class Case:
    op_name: str
    arrays: dict[str, np.ndarray]
    loss: Callable[[dict], float]
    grads: Callable[[dict], dict]
    linear: frozenset = frozenset()
    # paths whose analytic gradient is compared against a second analytic route
    surrogate: Callable[[dict], dict] | None = None


def _sites(shape, gen: np.random.Generator) -> list[tuple]:
    total = int(np.prod(shape))
    flat = np.sort(gen.choice(total, size=min(total, MAX_SITES), replace=False))
    return [tuple(int(i) for i in np.unravel_index(f, shape)) for f in flat]


def run_case(case: Case, gen: np.random.Generator, threshold: float | None = None,
             step: float = STEP) -> list[GradCheckReport]:
    analytic = case.grads(case.arrays)
    reference = case.surrogate(case.arrays) if case.surrogate else None
    reports = []
    for path in sorted(analytic):
        arr = case.arrays[path]
        sites = _sites(arr.shape, gen)
        if reference is not None:
            numeric = [float(reference[path][s]) for s in sites]
        else:
            def f(val, path=path):
                return case.loss({**case.arrays, path: val})
            numeric = finite_diff(f, arr, step, sites)
        tol = threshold if threshold is not None else (
            LINEAR_THRESHOLD if path in case.linear else THRESHOLD)
        for s, n in zip(sites, numeric):
            a = float(analytic[path][s])
            err = rel_error(a, float(n))
            reports.append(GradCheckReport(case.op_name, path, s, a, float(n), err, tol, err < tol))
    return reports


# --- case builders -----------------------------------------------------------

def _away_from(values, points, margin=KINK_MARGIN) -> bool:
    v = np.asarray(values)
    return all(np.all(np.abs(v - p) >= margin) for p in points)


def _away_from_integers(values, margin=KINK_MARGIN) -> bool:
    v = np.asarray(values)
    return bool(np.all(np.abs(v - np.round(v)) >= margin))


def _draw(gen, *shape, scale=1.0):
    return gen.uniform(-scale, scale, size=shape)


def _conv_from(a, prefix):
    return Conv1x1Params(a[f"{prefix}.weight"], a[f"{prefix}.bias"])


def _weighted_sum(out, r):
    return float(np.sum(out * r))


def _elementwise_case(name, fn, bwd, gen, kinks=(), uses_output=False):
    while True:
        x = _draw(gen, 2, 3, 4, 4, scale=2.0)
        if _away_from(x, kinks):
            break
    r = _draw(gen, *x.shape)

    def grads(a):
        src = fn(a["x"]) if uses_output else a["x"]
        return {"x": bwd(src, r)}

    return Case(name, {"x": x}, lambda a: _weighted_sum(fn(a["x"]), r), grads)


def tensor_core_cases(gen) -> Iterator[Case]:
    x = _draw(gen, 2, 3, 4, 4)
    w, b = _draw(gen, 5, 3), _draw(gen, 5)
    r = _draw(gen, 2, 5, 4, 4)

    def conv_grads(a):
        dx, dw, db = bw.conv1x1_backward(a["x"], Conv1x1Params(a["weight"], a["bias"]), r)
        return {"x": dx, "weight": dw, "bias": db}

    yield Case("conv1x1", {"x": x, "weight": w, "bias": b},
               lambda a: _weighted_sum(conv1x1(a["x"], Conv1x1Params(a["weight"], a["bias"])), r),
               conv_grads, frozenset({"x", "weight", "bias"}))

    yield _elementwise_case("relu", relu, bw.relu_backward, gen, kinks=(0.0,))
    yield _elementwise_case("tanh", np.tanh, bw.tanh_backward, gen, uses_output=True)
    yield _elementwise_case("hard_sigmoid", hard_sigmoid, bw.hard_sigmoid_backward, gen, kinks=(-1.0, 1.0))

    logits = _draw(gen, 6, 5, scale=3.0)
    rs = _draw(gen, 6, 5)
    yield Case("softmax_rows", {"m": logits}, lambda a: _weighted_sum(softmax_rows(a["m"]), rs),
               lambda a: {"m": bw.softmax_backward(softmax_rows(a["m"]), rs)})

    a_, b_ = _draw(gen, 2, 2, 3, 3), _draw(gen, 2, 3, 3, 3)
    rc = _draw(gen, 2, 5, 3, 3)

    def concat_grads(a):
        da, db_ = bw.concat_backward(rc, 2)
        return {"a": da, "b": db_}

    yield Case("concat_channels", {"a": a_, "b": b_},
               lambda a: _weighted_sum(concat_channels(a["a"], a["b"]), rc), concat_grads,
               frozenset({"a", "b"}))

    xp = _draw(gen, 2, 3, 5, 4)
    rp = _draw(gen, 2, 3, 1, 1)
    yield Case("global_avg_pool", {"x": xp}, lambda a: _weighted_sum(global_avg_pool(a["x"]), rp),
               lambda a: {"x": bw.global_avg_pool_backward(a["x"].shape, rp)}, frozenset({"x"}))

    xw = _draw(gen, 2, 3, 4, 6)
    rw = _draw(gen, 2 * 2 * 3, 4, 3)
    yield Case("window_partition", {"x": xw}, lambda a: _weighted_sum(window_partition(a["x"], 2), rw),
               lambda a: {"x": bw.window_partition_backward(rw, xw.shape)}, frozenset({"x"}))
    wins = _draw(gen, 12, 4, 3)
    rm = _draw(gen, 2, 3, 4, 6)
    yield Case("window_merge", {"wins": wins},
               lambda a: _weighted_sum(window_merge(a["wins"], rm.shape), rm),
               lambda a: {"wins": bw.window_merge_backward(rm, 2)}, frozenset({"wins"}))


def _warp_case(gen) -> Case:
    n, c, h, w = 1, 3, 5, 5
    while True:
        x = _draw(gen, n, c, h, w)
        offset = _draw(gen, n, 2, h, w, scale=2.5)
        coords = np.stack([np.arange(w)[None, None, :] + offset[:, 0],
                           np.arange(h)[None, :, None] + offset[:, 1]])
        if _away_from_integers(coords):
            break
    r = _draw(gen, n, c, h, w)

    def grads(a):
        dx, doff = bw.warp_bilinear_backward(a["x"], a["offset"], r)
        return {"x": dx, "offset": doff}

    return Case("warp_bilinear", {"x": x, "offset": offset},
                lambda a: _weighted_sum(crs.warp_bilinear(a["x"], a["offset"]), r), grads,
                frozenset({"x"}))


def _attention_case(gen) -> Case:
    m, d = 2, 3
    shape = (1, d, 4, 4)
    arrays = {"q": _draw(gen, *shape), "k": _draw(gen, *shape), "v_c": _draw(gen, *shape),
              "out_conv.weight": _draw(gen, d, d), "out_conv.bias": _draw(gen, d)}
    r = _draw(gen, *shape)

    def fwd(a):
        return conv1x1(crs.attend(a["q"], a["k"], a["v_c"], m, d), _conv_from(a, "out_conv"))

    def grads(a):
        att = crs.attend(a["q"], a["k"], a["v_c"], m, d)
        datt, dw, db = bw.conv1x1_backward(att, _conv_from(a, "out_conv"), r)
        dq, dk, dv = bw.attend_backward(a["q"], a["k"], a["v_c"], m, d, datt)
        return {"q": dq, "k": dk, "v_c": dv, "out_conv.weight": dw, "out_conv.bias": db}

    return Case("windowed_attention", arrays, lambda a: _weighted_sum(fwd(a), r), grads,
                frozenset({"out_conv.bias"}))


def _project_case(gen) -> Case:
    c = 3
    kt = _draw(gen, 1, c, 4, 4)
    wq, wk = _draw(gen, c, c), _draw(gen, c, c)
    rq, rk = _draw(gen, 1, c, 4, 4), _draw(gen, 1, c, 4, 4)

    def fwd(a):
        q = np.einsum("nkhw,ko->nohw", a["k_tilde"], a["w_q"])
        k = np.einsum("nkhw,ko->nohw", a["k_tilde"], a["w_k"])
        return _weighted_sum(q, rq) + _weighted_sum(k, rk)

    def grads(a):
        p = SimpleNamespace(w_q=a["w_q"], w_k=a["w_k"])
        dkt, dwq, dwk = bw.project_qk_backward(a["k_tilde"], p, rq, rk)
        return {"k_tilde": dkt, "w_q": dwq, "w_k": dwk}

    return Case("project_qk", {"k_tilde": kt, "w_q": wq, "w_k": wk}, fwd, grads,
                frozenset({"k_tilde", "w_q", "w_k"}))


def _gumbel_cases(gen, rng: RngState) -> Iterator[Case]:
    logits = _draw(gen, 8, 2, scale=2.0)
    noise = gumbel_noise(rng.substream("gradcheck/gumbel"), logits.shape)
    tau = 0.7
    r = _draw(gen, 8, 2)

    def soft_grads(a):
        _, soft = crs.gumbel_softmax(a["logits"], noise, tau, hard=False)
        return {"logits": bw.gumbel_softmax_backward(soft, r, tau)}

    yield Case("gumbel_softmax_soft", {"logits": logits},
               lambda a: _weighted_sum(crs.gumbel_softmax(a["logits"], noise, tau, False)[0], r),
               soft_grads)

    def hard_grads(a):
        # straight-through: the gradient routed through the one-hot forward
        y, soft = crs.gumbel_softmax(a["logits"], noise, tau, hard=True)
        assert set(np.unique(y)) <= {0.0, 1.0}
        return {"logits": bw.gumbel_softmax_backward(soft, r, tau)}

    yield Case("gumbel_softmax_hard_st", {"logits": logits}, lambda a: 0.0, hard_grads,
               surrogate=soft_grads)


def _mask_logits_case(gen) -> Case:
    c, m = 2, 2
    v, gti = _draw(gen, 1, c, 4, 4), _draw(gen, 1, c, 4, 4)
    reduce_w, w_mask = _draw(gen, 1, 2 * c), _draw(gen, m * m, 2)
    r = _draw(gen, 4, 2)

    def params(a):
        return SimpleNamespace(reduce_w=a["reduce_w"], w_mask=a["w_mask"], m=m)

    def grads(a):
        dv, dg, dr, dw = bw.mask_logits_backward(a["v"], a["gti"], params(a), r)
        return {"v": dv, "gti": dg, "reduce_w": dr, "w_mask": dw}

    arrays = {"v": v, "gti": gti, "reduce_w": reduce_w, "w_mask": w_mask}
    return Case("mask_logits", arrays,
                lambda a: _weighted_sum(crs.mask_logits(a["v"], a["gti"], params(a)), r), grads,
                frozenset({"v", "gti", "w_mask"}))


_CRS_CONVS = ("gti_conv1", "gti_conv2", "v_conv", "offset_conv", "out_conv")
_CRS_MATS = ("reduce_w", "w_mask", "w_q", "w_k")


def crselector_arrays(p: crs.CRSelectorParams) -> dict[str, np.ndarray]:
    out = {}
    for name in _CRS_CONVS:
        conv = getattr(p, name)
        out[f"{name}.weight"] = conv.weight
        out[f"{name}.bias"] = conv.bias
    for name in _CRS_MATS:
        out[name] = getattr(p, name)
    return out


def _crselector_params(a, template: crs.CRSelectorParams) -> crs.CRSelectorParams:
    kw = {name: _conv_from(a, name) for name in _CRS_CONVS}
    kw.update({name: a[name] for name in _CRS_MATS})
    return crs.CRSelectorParams(**kw, m=template.m, r=template.r, tau=template.tau,
                                hard_mask=template.hard_mask)


def _crselector_valid(x, image, p) -> bool:
    """True if no kink/cell boundary sits within the margin of the drawn point."""
    img = crs.resize_nearest(image, *x.shape[2:])
    h1 = conv1x1(img, p.gti_conv1)
    gti = conv1x1(relu(h1), p.gti_conv2)
    cat = concat_channels(x, gti)
    offset = crs.compute_offset(x, gti, p)
    n, _, h, w = x.shape
    coords = np.stack([np.arange(w)[None, None, :] + offset[:, 0],
                       np.arange(h)[None, :, None] + offset[:, 1]])
    return (_away_from(h1, (0.0,)) and _away_from(cat, (0.0,))
            and _away_from_integers(coords))


def crselector_case(gen, rng: RngState, hard: bool = False, c: int = 2, m: int = 2,
                    size: int = 4) -> Case:
    """End-to-end case on a ``1 x c x size x size`` map with frozen Gumbel noise."""
    attempt = 0
    while True:
        sub = rng.substream(f"gradcheck/crselector/{attempt}")
        p = crs.CRSelectorParams.random(c, m, sub, scale=0.6, hard_mask=hard).astype(np.float64)
        x = _draw(gen, 1, c, size, size)
        image = gen.uniform(0, 1, size=(1, 1, 2 * size, 2 * size))
        if _crselector_valid(x, image, p):
            break
        attempt += 1
    noise = gumbel_noise(rng.substream("gradcheck/crselector/noise"), ((size // m) ** 2, 2))
    r = _draw(gen, 1, c, size, size)
    arrays = {"x": x, "image": image, **crselector_arrays(p)}

    def fwd(a):
        pp = _crselector_params(a, p)
        return crs.crselector_forward(a["x"], a["image"], pp, RngState(0), noise=noise)

    def grads(a):
        return bw.crselector_backward(a["x"], a["image"], _crselector_params(a, p), noise, r)

    name = "crselector_forward_hard_st" if hard else "crselector_forward_soft"
    return Case(name, arrays, lambda a: _weighted_sum(fwd(a), r), grads)


def crselector_cases(gen, rng: RngState) -> Iterator[Case]:
    yield _warp_case(gen)
    yield _project_case(gen)
    yield _mask_logits_case(gen)
    yield _attention_case(gen)
    yield from _gumbel_cases(gen, rng)
    yield crselector_case(gen, rng)


def _sca_valid(levels, p) -> bool:
    for lvl in levels:
        z = gate_preactivation(lvl, p)
        if not _away_from(z, (0.0, 1.0)):
            return False
    return True


def sca_cases(gen) -> Iterator[Case]:
    c = 3
    shapes = [(2, c, 8, 8), (2, c, 4, 4)]
    while True:
        levels = [_draw(gen, *s) + 0.3 for s in shapes]
        w, b = _draw(gen, 1, c), _draw(gen, 1, scale=0.8)
        p = ScAParams(Conv1x1Params(w, b))
        if _sca_valid(levels, p):
            break
    r = [_draw(gen, *s) for s in shapes]

    def unpack(a):
        lv = [a[f"level{i}"] for i in range(len(shapes))]
        return lv, ScAParams(Conv1x1Params(a["gate.weight"], a["gate.bias"]))

    def loss(a):
        lv, pp = unpack(a)
        return sum(_weighted_sum(o, ri) for o, ri in zip(sca_forward(lv, pp), r))

    def grads(a):
        lv, pp = unpack(a)
        dl, dw, db = bw.sca_backward(lv, pp, r)
        return {**{f"level{i}": d for i, d in enumerate(dl)}, "gate.weight": dw, "gate.bias": db}

    arrays = {**{f"level{i}": l for i, l in enumerate(levels)}, "gate.weight": w, "gate.bias": b}
    yield Case("sca_forward", arrays, loss, grads)

    def gamma_loss(a):
        lv, pp = unpack(a)
        return float(np.sum(scale_weights(lv, pp) * gamma_r))

    gamma_r = _draw(gen, 2, len(shapes))

    def gamma_grads(a):
        # sca_backward with upstream chosen so that dL/dgamma == gamma_r and no direct path
        lv, pp = unpack(a)
        z = np.stack([gate_preactivation(l, pp) for l in lv], axis=1)
        dz = bw.relu_backward(z, bw.hard_sigmoid_backward(relu(z), gamma_r))
        dw = np.zeros_like(pp.gate_conv.weight)
        out = {}
        for i, l in enumerate(lv):
            pooled = global_avg_pool(l)[:, :, 0, 0]
            dw += dz[:, i] @ pooled
            dpool = (dz[:, i][:, None] * pp.gate_conv.weight[0][None, :])[:, :, None, None]
            out[f"level{i}"] = bw.global_avg_pool_backward(l.shape, dpool)
        out["gate.weight"] = dw
        out["gate.bias"] = np.array([dz.sum()])
        return out

    yield Case("scale_weights", arrays, gamma_loss, gamma_grads)

    gamma = gen.uniform(0, 1, size=(2, len(shapes)))
    aw_arrays = {**{f"level{i}": l for i, l in enumerate(levels)}, "gamma": gamma}

    def aw_loss(a):
        lv = [a[f"level{i}"] for i in range(len(shapes))]
        return sum(_weighted_sum(o, ri) for o, ri in zip(apply_scale_weighting(lv, a["gamma"]), r))

    def aw_grads(a):
        lv = [a[f"level{i}"] for i in range(len(shapes))]
        dl, dg = bw.apply_scale_weighting_backward(lv, a["gamma"], r)
        return {**{f"level{i}": d for i, d in enumerate(dl)}, "gamma": dg}

    yield Case("apply_scale_weighting", aw_arrays, aw_loss, aw_grads,
               frozenset(aw_arrays))


def module_cases(module: str, seed: int) -> list[Case]:
    rng = RngState(seed, "gradcheck")
    gen = generator(rng.substream(f"gradcheck/{module}"))
    if module == "tensor-core":
        return list(tensor_core_cases(gen))
    if module == "crselector":
        return list(crselector_cases(gen, rng))
    if module == "sca-head":
        return list(sca_cases(gen))
    raise ValueError(f"unknown module {module!r}; expected one of {MODULES}")


def check_module(module: str, seed: int = 42, threshold: float | None = None) -> list[GradCheckReport]:
    """Run every case for ``module``; reports sorted by (op, path, coord)."""
    rng = RngState(seed, "gradcheck")
    site_gen = generator(rng.substream(f"gradcheck/{module}/sites"))
    reports = []
    for case in module_cases(module, seed):
        reports.extend(run_case(case, site_gen, threshold))
    return sorted(reports, key=lambda r: (r.op_name, r.param_path, r.coord))


def check_all(seed: int = 42, threshold: float | None = None) -> list[GradCheckReport]:
    out = []
    for module in MODULES:
        out.extend(check_module(module, seed, threshold))
    return out
