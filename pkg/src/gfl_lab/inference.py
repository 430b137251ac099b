"""Detection extraction and evaluation: scores, NMS, and average precision.

The pipeline is: score every (point, class) candidate, drop candidates under
``score_threshold``, sort each class by score with a ``pre_topk`` cap, run
greedy per-class suppression at ``iou_threshold`` (a kept box suppresses
later boxes overlapping it strictly above the threshold), then keep the best
``post_topk`` detections across classes. All orderings break ties by
(score desc, point index asc) so results are deterministic.

``reference_nms`` and ``reference_average_precision`` are deliberately dumb
re-implementations (explicit loops, no vectorization, no shared code paths
beyond the scalar IoU formula); the fast paths must agree with them
bit-exactly and the tests enforce that.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detector import HeadParams, HeadVariant, RawOutputs, decode_outputs
from .geometry import Box, iou, iou_xyxy
from .losses import sigmoid
from .synth import Grid

__all__ = [
    "COCO_THRESHOLDS",
    "Detection",
    "NmsConfig",
    "NmsStageCounts",
    "EvalResult",
    "score_candidates",
    "quality_scores",
    "build_candidates",
    "nms",
    "nms_with_counts",
    "reference_nms",
    "evaluate_ap",
    "reference_average_precision",
]

COCO_THRESHOLDS: tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float
    point_index: int = -1


@dataclass(frozen=True)
class NmsConfig:
    score_threshold: float = 0.05
    pre_topk: int = 1000
    iou_threshold: float = 0.6
    post_topk: int = 100

    def __post_init__(self) -> None:
        if not (0.0 <= self.score_threshold <= 1.0):
            raise ValueError(f"score_threshold must be in [0, 1], got {self.score_threshold}")
        if not (0.0 <= self.iou_threshold <= 1.0):
            raise ValueError(f"iou_threshold must be in [0, 1], got {self.iou_threshold}")
        if self.pre_topk < 1 or self.post_topk < 1:
            raise ValueError("topk caps must be >= 1")


@dataclass(frozen=True)
class NmsStageCounts:
    after_threshold: int
    after_pre_topk: int
    after_suppression: int
    after_post_topk: int


@dataclass(frozen=True)
class EvalResult:
    ap_per_iou: dict[float, float]
    mean_ap: float


# ---------------------------------------------------------------------------
# Scores and candidates


def score_candidates(outputs: RawOutputs, variant: HeadVariant) -> np.ndarray:
    """(P, C) detection scores: sigmoid class scores, multiplied by the
    sigmoid quality-branch score for the separate variants."""
    scores = sigmoid(outputs.cls)
    if variant.has_quality_branch:
        scores = scores * sigmoid(outputs.quality)[:, None]
    return scores


def quality_scores(outputs: RawOutputs, variant: HeadVariant) -> np.ndarray:
    """(P,) predicted localization quality under each variant's reading:
    the branch sigmoid for separate variants, otherwise the strongest class
    sigmoid (which is the joint representation's quality estimate)."""
    if variant.has_quality_branch:
        return sigmoid(outputs.quality)
    return sigmoid(outputs.cls).max(axis=1)


def build_candidates(
    outputs: RawOutputs,
    params: HeadParams,
    grid: Grid,
    bounds: tuple[float, float],
) -> list[Detection]:
    """Decode every (point, class) pair into a scored detection, with boxes
    clipped to the scene bounds."""
    from .geometry import decode_batch

    scores = score_candidates(outputs, params.variant)
    offsets = decode_outputs(outputs.reg, params.regressor)
    boxes = decode_batch(grid.px, grid.py, offsets, grid.stride)
    w, h = bounds
    x1 = np.clip(boxes[:, 0], 0.0, w)
    y1 = np.clip(boxes[:, 1], 0.0, h)
    x2 = np.clip(boxes[:, 2], 0.0, w)
    y2 = np.clip(boxes[:, 3], 0.0, h)
    x2 = np.maximum(x1, x2)
    y2 = np.maximum(y1, y2)
    out: list[Detection] = []
    p, c = scores.shape
    for z in range(p):
        box = Box(float(x1[z]), float(y1[z]), float(x2[z]), float(y2[z]))
        for cls in range(c):
            out.append(Detection(box=box, class_id=cls, score=float(scores[z, cls]), point_index=z))
    return out


# ---------------------------------------------------------------------------
# NMS


def _order_key(d: Detection) -> tuple[float, int]:
    return (-d.score, d.point_index)


def nms_with_counts(candidates: list[Detection], config: NmsConfig) -> tuple[list[Detection], NmsStageCounts]:
    """Vectorized NMS returning the kept detections and per-stage counts."""
    kept_all: list[Detection] = []
    survivors = [d for d in candidates if d.score >= config.score_threshold]
    after_threshold = len(survivors)

    by_class: dict[int, list[Detection]] = {}
    for d in survivors:
        by_class.setdefault(d.class_id, []).append(d)

    after_pre = 0
    for cls in sorted(by_class):
        dets = sorted(by_class[cls], key=_order_key)[: config.pre_topk]
        after_pre += len(dets)
        if not dets:
            continue
        boxes = np.stack([d.box.as_array() for d in dets])
        n = len(dets)
        alive = np.ones(n, dtype=bool)
        for i in range(n):
            if not alive[i]:
                continue
            kept_all.append(dets[i])
            if i + 1 < n:
                rest = np.flatnonzero(alive[i + 1 :]) + i + 1
                if rest.size:
                    overlaps = iou_xyxy(boxes[i][None, :], boxes[rest])
                    alive[rest[overlaps > config.iou_threshold]] = False
    after_suppression = len(kept_all)
    kept_all.sort(key=_order_key)
    final = kept_all[: config.post_topk]
    return final, NmsStageCounts(after_threshold, after_pre, after_suppression, len(final))


def nms(candidates: list[Detection], config: NmsConfig) -> list[Detection]:
    return nms_with_counts(candidates, config)[0]


def reference_nms(candidates: list[Detection], config: NmsConfig) -> list[Detection]:
    """Exhaustive O(n^2) reference: explicit scans, no sorting of survivors
    beyond repeated max-finding. Must match :func:`nms` bit-exactly."""
    survivors = []
    for d in candidates:
        if d.score >= config.score_threshold:
            survivors.append(d)

    kept: list[Detection] = []
    class_ids = sorted({d.class_id for d in survivors})
    for cls in class_ids:
        pool = [d for d in survivors if d.class_id == cls]
        taken: list[Detection] = []
        while pool and len(taken) < config.pre_topk:
            best = pool[0]
            for d in pool[1:]:
                if (d.score, -d.point_index) > (best.score, -best.point_index):
                    best = d
            pool.remove(best)
            taken.append(best)
        removed = [False] * len(taken)
        for i in range(len(taken)):
            if removed[i]:
                continue
            kept.append(taken[i])
            for j in range(i + 1, len(taken)):
                if not removed[j] and iou(taken[i].box, taken[j].box) > config.iou_threshold:
                    removed[j] = True

    final: list[Detection] = []
    pool = list(kept)
    while pool and len(final) < config.post_topk:
        best = pool[0]
        for d in pool[1:]:
            if (d.score, -d.point_index) > (best.score, -best.point_index):
                best = d
        pool.remove(best)
        final.append(best)
    return final


# ---------------------------------------------------------------------------
# Average precision

_RECALL_POINTS = [i / 100.0 for i in range(101)]


def _match_class(
    dets: list[tuple[int, int, Detection]],
    gts: dict[int, list[tuple[Box, int]]],
    cls: int,
    thr: float,
) -> tuple[list[bool], int]:
    """Greedy best-first matching for one class at one IoU threshold.

    ``dets`` rows are (scene_id, insertion_index, detection), already sorted.
    Returns a TP flag per detection and the class gt count.
    """
    gt_boxes: dict[int, list[Box]] = {}
    num_gt = 0
    for scene_id, rows in gts.items():
        boxes = [b for b, c in rows if c == cls]
        gt_boxes[scene_id] = boxes
        num_gt += len(boxes)
    used: dict[int, list[bool]] = {k: [False] * len(v) for k, v in gt_boxes.items()}

    flags: list[bool] = []
    for scene_id, _, d in dets:
        boxes = gt_boxes.get(scene_id, [])
        marks = used.get(scene_id, [])
        best_iou = 0.0
        best_j = -1
        for j, gb in enumerate(boxes):
            if marks[j]:
                continue
            ov = iou(d.box, gb)
            if ov >= thr and ov > best_iou:
                best_iou = ov
                best_j = j
        if best_j >= 0:
            marks[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags, num_gt


def _interpolated_ap(flags: list[bool], num_gt: int) -> float:
    """101-point interpolated AP from ordered TP flags."""
    if num_gt == 0:
        return 0.0
    precisions = []
    recalls = []
    tp = 0
    for i, flag in enumerate(flags):
        if flag:
            tp += 1
        precisions.append(tp / (i + 1))
        recalls.append(tp / num_gt)
    total = 0.0
    for r in _RECALL_POINTS:
        best = 0.0
        for p, rec in zip(precisions, recalls):
            if rec >= r and p > best:
                best = p
        total += best
    return total / len(_RECALL_POINTS)


def _sorted_class_dets(
    detections: dict[int, list[Detection]], cls: int
) -> list[tuple[int, int, Detection]]:
    rows = []
    for scene_id in sorted(detections):
        for i, d in enumerate(detections[scene_id]):
            if d.class_id == cls:
                rows.append((scene_id, i, d))
    rows.sort(key=lambda row: (-row[2].score, row[0], row[2].point_index, row[1]))
    return rows


def evaluate_ap(
    detections: dict[int, list[Detection]],
    ground_truth: dict[int, list[tuple[Box, int]]],
    thresholds: tuple[float, ...] = COCO_THRESHOLDS,
) -> EvalResult:
    """Mean 101-point interpolated AP over IoU thresholds and classes.

    Detections are matched greedily in score order to the unmatched ground
    truth box of the same class with the highest IoU at or above the
    threshold. Classes with no ground truth anywhere are excluded from the
    class mean.
    """
    classes = sorted({c for rows in ground_truth.values() for _, c in rows})
    ap_per_iou: dict[float, float] = {}
    for thr in thresholds:
        if classes:
            per_class = []
            for cls in classes:
                dets = _sorted_class_dets(detections, cls)
                flags, num_gt = _match_class(dets, ground_truth, cls, thr)
                per_class.append(_interpolated_ap(flags, num_gt))
            ap_per_iou[thr] = sum(per_class) / len(per_class)
        else:
            ap_per_iou[thr] = 0.0
    mean_ap = sum(ap_per_iou[t] for t in thresholds) / len(thresholds)
    return EvalResult(ap_per_iou=ap_per_iou, mean_ap=mean_ap)


def reference_average_precision(
    detections: dict[int, list[Detection]],
    ground_truth: dict[int, list[tuple[Box, int]]],
    thresholds: tuple[float, ...] = COCO_THRESHOLDS,
) -> EvalResult:
    """Loop-everything oracle for :func:`evaluate_ap` (same matching rules,
    independently written); must agree bit-exactly."""
    classes = set()
    for rows in ground_truth.values():
        for _, c in rows:
            classes.add(c)
    classes = sorted(classes)

    ap_per_iou: dict[float, float] = {}
    for thr in thresholds:
        class_aps = []
        for cls in classes:
            # Gather and selection-sort this class's detections.
            rows = []
            for scene_id in sorted(detections.keys()):
                for i, d in enumerate(detections[scene_id]):
                    if d.class_id == cls:
                        rows.append((scene_id, i, d))
            ordered = []
            pool = list(rows)
            while pool:
                best = pool[0]
                for r in pool[1:]:
                    a = (-r[2].score, r[0], r[2].point_index, r[1])
                    b = (-best[2].score, best[0], best[2].point_index, best[1])
                    if a < b:
                        best = r
                pool.remove(best)
                ordered.append(best)

            matched: dict[tuple[int, int], bool] = {}
            num_gt = 0
            for scene_id, gtr in ground_truth.items():
                for j, (_, c) in enumerate(gtr):
                    if c == cls:
                        matched[(scene_id, j)] = False
                        num_gt += 1

            flags = []
            for scene_id, _, d in ordered:
                best_iou = 0.0
                best_key = None
                gtr = ground_truth.get(scene_id, [])
                for j, (gb, c) in enumerate(gtr):
                    if c != cls or matched[(scene_id, j)]:
                        continue
                    ov = iou(d.box, gb)
                    if ov >= thr and ov > best_iou:
                        best_iou = ov
                        best_key = (scene_id, j)
                if best_key is not None:
                    matched[best_key] = True
                    flags.append(True)
                else:
                    flags.append(False)

            if num_gt == 0:
                class_aps.append(0.0)
                continue
            total = 0.0
            for r in _RECALL_POINTS:
                best = 0.0
                tp = 0
                for i, flag in enumerate(flags):
                    if flag:
                        tp += 1
                    prec = tp / (i + 1)
                    rec = tp / num_gt
                    if rec >= r and prec > best:
                        best = prec
                total += best
            class_aps.append(total / len(_RECALL_POINTS))
        ap_per_iou[thr] = sum(class_aps) / len(class_aps) if class_aps else 0.0
    mean_ap = sum(ap_per_iou[t] for t in thresholds) / len(thresholds)
    return EvalResult(ap_per_iou=ap_per_iou, mean_ap=mean_ap)
