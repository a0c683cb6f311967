"""Brute-force reference for the metric stack, for small fixtures only.

Matching enumerates every one-to-one assignment of detections to ground
truths with IoU at or above the threshold and keeps the lexicographically
best under the score-ordered priority (regular match > ignored match >
unmatched, then higher IoU, then lower GT index). AP is taken straight from
its definition: for each recall level, the best precision at any operating
point whose recall reaches it.
"""
from __future__ import annotations

from fractions import Fraction

from .metrics import IOU_THRESHOLDS, in_bucket, iou


def _det_key(gt_ignore, gi, o):
    if gi is None:
        return (0, 0.0, 0)
    return (1 if gt_ignore[gi] else 2, o, -gi)


def exhaustive_match(dets, gts, thresh, gt_ignore=None):
    """Best assignment ``{det position in score order: gt index or None}``."""
    gt_ignore = gt_ignore or [False] * len(gts)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    ious = [[iou(dets[d].box, g.box) for g in gts] for d in order]
    best_key, best_assign = None, None

    def rec(pos, used, assign, key):
        nonlocal best_key, best_assign
        if pos == len(order):
            if best_key is None or key > best_key:
                best_key, best_assign = key, list(assign)
            return
        options = [None] + [gi for gi in range(len(gts)) if gi not in used and ious[pos][gi] >= thresh]
        for gi in options:
            o = 0.0 if gi is None else ious[pos][gi]
            k = _det_key(gt_ignore, gi, o)
            assign.append(gi)
            rec(pos + 1, used | ({gi} if gi is not None else set()), assign, key + (k,))
            assign.pop()

    rec(0, frozenset(), [], ())
    return order, best_assign


def oracle_class_ap(dets, gts, class_id, thresh, bucket="all", points=101):
    images = sorted({d.image_id for d in dets if d.class_id == class_id}
                    | {g.image_id for g in gts if g.class_id == class_id})
    n_gt = 0
    rows = []  # (score, input index, tp)
    for img in images:
        d_idx = [i for i, d in enumerate(dets) if d.class_id == class_id and d.image_id == img]
        ds = [dets[i] for i in d_idx]
        gs = [g for g in gts if g.class_id == class_id and g.image_id == img]
        g_ign = [not in_bucket(g.box.area, bucket) for g in gs]
        n_gt += sum(1 for x in g_ign if not x)
        order, assign = exhaustive_match(ds, gs, thresh, g_ign)
        for pos, local in enumerate(order):
            gi = assign[pos]
            if gi is None:
                if in_bucket(ds[local].box.area, bucket):
                    rows.append((ds[local].score, d_idx[local], False))
            elif not g_ign[gi]:
                rows.append((ds[local].score, d_idx[local], True))
    if n_gt == 0:
        return None
    rows.sort(key=lambda r: (-r[0], r[1]))
    recalls, precisions = [], []
    tp = 0
    for k, row in enumerate(rows, start=1):
        tp += row[2]
        recalls.append(Fraction(tp, n_gt))
        precisions.append(Fraction(tp, k))
    total = Fraction(0)
    for j in range(points):
        level = Fraction(j, points - 1)
        reach = [p for r, p in zip(recalls, precisions) if r >= level]
        total += max(reach) if reach else Fraction(0)
    return total / points


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return sum(vals, Fraction(0)) / len(vals) if vals else None


def oracle_evaluate(dets, gts, points=101):
    """Dict with the same keys as ``EvalResult`` fields, values as floats or None."""
    classes = sorted({g.class_id for g in gts} | {d.class_id for d in dets})

    def bucket_map(bucket):
        return _mean(_mean(oracle_class_ap(dets, gts, c, t, bucket, points) for t in IOU_THRESHOLDS)
                     for c in classes)

    per_class = {c: _mean(oracle_class_ap(dets, gts, c, t, "all", points) for t in IOU_THRESHOLDS)
                 for c in classes}
    per50 = {c: oracle_class_ap(dets, gts, c, 0.5, "all", points) for c in classes}

    def f(v):
        return None if v is None else float(v)

    return {
        "map": f(_mean(per_class.values())),
        "map50": f(_mean(per50.values())),
        "map_s": f(bucket_map("small")),
        "map_m": f(bucket_map("medium")),
        "map_l": f(bucket_map("large")),
        "per_class": {c: f(v) for c, v in per_class.items()},
        "per_class50": {c: f(v) for c, v in per50.items()},
    }
