"""COCO-style detection metrics: IoU, greedy matching, interpolated AP, mAP.

Precision/recall bookkeeping is done with ``fractions.Fraction`` so recall
thresholds are compared exactly and the final means do not depend on the
order of the reduction. Results are converted to float only at the end.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
import math
from typing import Iterable, Sequence

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
SMALL_MAX = 32 ** 2
MEDIUM_MAX = 96 ** 2
AREA_BUCKETS = ("all", "small", "medium", "large")


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            object.__setattr__(self, name, float(getattr(self, name)))
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"box coordinates must be finite: {vals}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"box must satisfy x2 >= x1 and y2 >= y1: {vals}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_id: str
    box: BBox
    score: float

    def __post_init__(self):
        object.__setattr__(self, "score", float(self.score))
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be in [0, 1], got {self.score}")


@dataclass(frozen=True)
class GroundTruthBox:
    image_id: str
    class_id: str
    box: BBox


@dataclass
class EvalResult:
    map: float | None
    map50: float | None
    map_s: float | None
    map_m: float | None
    map_l: float | None
    per_class: dict[str, float | None] = field(default_factory=dict)  # AP averaged over IoU thresholds
    per_class50: dict[str, float | None] = field(default_factory=dict)


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = iw * ih if iw > 0 and ih > 0 else 0.0
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def in_bucket(area: float, bucket: str) -> bool:
    if bucket == "all":
        return True
    if bucket == "small":
        return area < SMALL_MAX
    if bucket == "medium":
        return SMALL_MAX <= area <= MEDIUM_MAX
    if bucket == "large":
        return area > MEDIUM_MAX
    raise ValueError(f"unknown area bucket {bucket!r}")


TP, FP, IGNORE = "tp", "fp", "ignore"


def score_order(dets: Sequence[Detection]) -> list[int]:
    """Indices by descending score; equal scores keep input order."""
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruthBox], iou_thresh: float,
                     gt_ignore: Sequence[bool] | None = None,
                     det_ignore: Sequence[bool] | None = None) -> list[tuple[int, str]]:
    """Greedy score-ordered matching for one image/class slice.

    Returns ``(det index, label)`` in processing order. Each detection takes the
    unmatched ground truth with the highest IoU >= ``iou_thresh`` (ties to the
    lowest index), preferring non-ignored boxes. Detections that land on an
    ignored box, or stay unmatched while flagged in ``det_ignore``, are labelled
    ``"ignore"``.
    """
    gt_ignore = gt_ignore or [False] * len(gts)
    det_ignore = det_ignore or [False] * len(dets)
    taken = [False] * len(gts)
    out = []
    for di in score_order(dets):
        best = None  # (ignored, -iou, gi)
        for gi, gt in enumerate(gts):
            if taken[gi]:
                continue
            o = iou(dets[di].box, gt.box)
            if o < iou_thresh:
                continue
            key = (gt_ignore[gi], -o, gi)
            if best is None or key < best:
                best = key
        if best is None:
            out.append((di, IGNORE if det_ignore[di] else FP))
        else:
            taken[best[2]] = True
            out.append((di, IGNORE if best[0] else TP))
    return out


def _pr_points(labels: Sequence[bool], n_gt: int) -> list[tuple[int, Fraction]]:
    """``(true positives so far, precision)`` after each detection."""
    pts, tp = [], 0
    for k, is_tp in enumerate(labels, start=1):
        tp += bool(is_tp)
        pts.append((tp, Fraction(tp, k)))
    return pts


def average_precision_exact(labels: Sequence[bool], n_gt: int, points: int = 101) -> Fraction | None:
    """Interpolated AP over ``points`` evenly spaced recall levels (101: COCO, 11: VOC).

    ``labels`` are score-sorted TP flags with ignored detections removed.
    """
    if n_gt <= 0:
        return None
    pts = _pr_points(labels, n_gt)
    envelope = [Fraction(0)] * len(pts)
    running = Fraction(0)
    for i in range(len(pts) - 1, -1, -1):
        running = max(running, pts[i][1])
        envelope[i] = running
    steps = points - 1
    total = Fraction(0)
    i = 0
    for k in range(points):
        # first point with recall >= k/steps, i.e. tp * steps >= k * n_gt
        while i < len(pts) and pts[i][0] * steps < k * n_gt:
            i += 1
        if i == len(pts):
            break
        total += envelope[i]
    return total / points


def average_precision(labels: Sequence[bool], n_gt: int, points: int = 101) -> float | None:
    ap = average_precision_exact(labels, n_gt, points)
    return None if ap is None else float(ap)


def _mean(values: Iterable[Fraction | None]) -> Fraction | None:
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    return sum(vals, Fraction(0)) / len(vals)


def _as_float(v: Fraction | None) -> float | None:
    return None if v is None else float(v)


def class_ap(dets: Sequence[Detection], gts: Sequence[GroundTruthBox], class_id: str,
             iou_thresh: float, bucket: str = "all", points: int = 101) -> Fraction | None:
    """AP for one class at one IoU threshold and area bucket, pooled over images."""
    images = defaultdict(lambda: ([], [], []))
    for i, d in enumerate(dets):
        if d.class_id == class_id:
            images[d.image_id][0].append(i)
            images[d.image_id][1].append(d)
    for g in gts:
        if g.class_id == class_id:
            images[g.image_id][2].append(g)
    n_gt = 0
    scored = []  # (-score, input index, is_tp)
    for image_id in sorted(images):
        idx, ds, gs = images[image_id]
        gt_ignore = [not in_bucket(g.box.area, bucket) for g in gs]
        det_ignore = [not in_bucket(d.box.area, bucket) for d in ds]
        n_gt += gt_ignore.count(False)
        for di, label in match_detections(ds, gs, iou_thresh, gt_ignore, det_ignore):
            if label != IGNORE:
                scored.append((-ds[di].score, idx[di], label == TP))
    scored.sort()
    return average_precision_exact([s[2] for s in scored], n_gt, points)


def evaluate(dets: Sequence[Detection], gts: Sequence[GroundTruthBox], *,
             iou_thresholds: Sequence[float] = IOU_THRESHOLDS, points: int = 101) -> EvalResult:
    """mAP over IoU thresholds and classes, mAP50 and mAP for small/medium/large boxes.

    Classes without ground truth (in the bucket being scored) are left out of
    the means; a metric with no scorable class is ``None``.
    """
    classes = sorted({g.class_id for g in gts} | {d.class_id for d in dets})
    thresholds = list(iou_thresholds)

    def bucket_means(bucket):
        per_class = {}
        for c in classes:
            per_class[c] = _mean(class_ap(dets, gts, c, t, bucket, points) for t in thresholds)
        return per_class

    overall = bucket_means("all")
    per50 = {c: class_ap(dets, gts, c, 0.5, "all", points) for c in classes}
    sized = {b: _mean(bucket_means(b).values()) for b in ("small", "medium", "large")}
    return EvalResult(
        map=_as_float(_mean(overall.values())),
        map50=_as_float(_mean(per50.values())),
        map_s=_as_float(sized["small"]),
        map_m=_as_float(sized["medium"]),
        map_l=_as_float(sized["large"]),
        per_class={c: _as_float(v) for c, v in overall.items()},
        per_class50={c: _as_float(v) for c, v in per50.items()},
    )


# --- record I/O --------------------------------------------------------------

class RecordError(ValueError):
    pass


def parse_records(text: str, source: str = "<input>"):
    """Parse whitespace box records.

    Seven fields (with score) produce ``Detection`` objects, six produce
    ``GroundTruthBox``; a file may not mix the two. ``#`` starts a comment.
    """
    out, kind = [], None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (6, 7):
            raise RecordError(f"{source}:{lineno}: expected 6 or 7 fields, got {len(parts)}")
        this_kind = "det" if len(parts) == 7 else "gt"
        if kind is None:
            kind = this_kind
        elif kind != this_kind:
            raise RecordError(f"{source}:{lineno}: mixes detection and ground-truth records")
        try:
            coords = [float(v) for v in parts[2:6]]
            box = BBox(*coords)
            if this_kind == "det":
                out.append(Detection(parts[0], parts[1], box, float(parts[6])))
            else:
                out.append(GroundTruthBox(parts[0], parts[1], box))
        except ValueError as exc:
            raise RecordError(f"{source}:{lineno}: {exc}") from None
    return out


def format_records(items) -> str:
    lines = []
    for it in items:
        b = it.box
        fields_ = [it.image_id, it.class_id, repr(b.x1), repr(b.y1), repr(b.x2), repr(b.y2)]
        if isinstance(it, Detection):
            fields_.append(repr(it.score))
        lines.append(" ".join(str(f) for f in fields_))
    return "\n".join(lines) + ("\n" if lines else "")


def _pct(v: float | None) -> str:
    return "-" if v is None else f"{100 * v:.1f}"


def format_result(res: EvalResult) -> str:
    """Metric table (percent) followed by a ``key=value`` block with full precision."""
    cols = [("mAP(%)", res.map), ("mAP50(%)", res.map50), ("mAP_S(%)", res.map_s),
            ("mAP_M(%)", res.map_m), ("mAP_L(%)", res.map_l)]
    cols += [(f"mAP_{c}(%)", v) for c, v in res.per_class.items()]
    widths = [max(len(name), 6) for name, _ in cols]
    header = "  ".join(name.rjust(w) for (name, _), w in zip(cols, widths))
    row = "  ".join(_pct(v).rjust(w) for (_, v), w in zip(cols, widths))

    def kv(v):
        return "absent" if v is None else repr(v)

    lines = [header, row, "", f"map={kv(res.map)}", f"map50={kv(res.map50)}",
             f"map_s={kv(res.map_s)}", f"map_m={kv(res.map_m)}", f"map_l={kv(res.map_l)}"]
    lines += [f"ap_{c}={kv(v)}" for c, v in res.per_class.items()]
    lines += [f"ap50_{c}={kv(v)}" for c, v in res.per_class50.items()]
    return "\n".join(lines) + "\n"
