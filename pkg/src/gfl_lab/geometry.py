"""Continuous box geometry: IoU, generalized IoU with gradients, centerness,
and the encode/decode maps between boxes and stride-normalized side offsets.

Boxes are corner-form ``(x1, y1, x2, y2)``. Offsets ``(l, t, r, b)`` measure
the distances from a grid point to the four box edges in units of the point
stride. Min/max kinks in the IoU family use a deterministic subgradient:
at ties the first (prediction-side) argument is treated as selected.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import LossEval

__all__ = [
    "Box",
    "SideOffsets",
    "GridPoint",
    "Histogram",
    "iou",
    "iou_xyxy",
    "giou",
    "giou_xyxy",
    "giou_loss",
    "giou_loss_batch",
    "centerness",
    "centerness_batch",
    "encode",
    "encode_batch",
    "decode",
    "decode_batch",
    "label_histogram",
]


@dataclass(frozen=True)
class Box:
    """Axis-aligned box with ``x1 <= x2`` and ``y1 <= y2``."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not np.isfinite(v):
                raise ValueError(f"box corners must be finite, got {self}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"box corners out of order: {self}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_array(self) -> np.ndarray:
        return np.asarray([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass(frozen=True)
class SideOffsets:
    """Distances from a point to the (left, top, right, bottom) box edges,
    in stride units. Valid training targets are non-negative; predictions
    may temporarily be negative."""

    left: float
    top: float
    right: float
    bottom: float

    def as_array(self) -> np.ndarray:
        return np.asarray([self.left, self.top, self.right, self.bottom], dtype=np.float64)


@dataclass(frozen=True)
class GridPoint:
    """A location on the detection grid."""

    x: float
    y: float
    stride: float
    index: int = -1

    def __post_init__(self) -> None:
        if self.stride <= 0:
            raise ValueError(f"stride must be positive, got {self.stride}")


@dataclass(frozen=True, eq=False)
class Histogram:
    """Uniform-bin histogram: ``counts[i]`` covers ``[edges[i], edges[i+1])``
    with the final bin closed on the right."""

    counts: np.ndarray
    edges: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum()) if self.counts.size else 0

    def to_rows(self) -> list[tuple[float, float, int]]:
        return [
            (float(self.edges[i]), float(self.edges[i + 1]), int(self.counts[i]))
            for i in range(self.counts.size)
        ]


# ---------------------------------------------------------------------------
# Overlap measures


def iou_xyxy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise IoU of corner-form boxes along the last axis."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = np.maximum(0.0, np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]))
    ih = np.maximum(0.0, np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]))
    inter = iw * ih
    area_a = np.maximum(0.0, a[..., 2] - a[..., 0]) * np.maximum(0.0, a[..., 3] - a[..., 1])
    area_b = np.maximum(0.0, b[..., 2] - b[..., 0]) * np.maximum(0.0, b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 when the union is degenerate."""
    return float(iou_xyxy(a.as_array(), b.as_array()))


def giou_xyxy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise generalized IoU: IoU minus the enclosing-box penalty."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = np.maximum(0.0, np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]))
    ih = np.maximum(0.0, np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]))
    inter = iw * ih
    area_a = np.maximum(0.0, a[..., 2] - a[..., 0]) * np.maximum(0.0, a[..., 3] - a[..., 1])
    area_b = np.maximum(0.0, b[..., 2] - b[..., 0]) * np.maximum(0.0, b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    cw = np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])
    ch = np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    enclose = cw * ch
    iou_term = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    penalty = np.where(
        enclose > 0, (enclose - union) / np.where(enclose > 0, enclose, 1.0), 0.0
    )
    return iou_term - penalty


def giou(a: Box, b: Box) -> float:
    return float(giou_xyxy(a.as_array(), b.as_array()))


# ---------------------------------------------------------------------------
# GIoU loss in offset space


def giou_loss_batch(pred: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise ``1 - GIoU`` of offset-decoded boxes and d/d pred offsets.

    Both offset rows are taken around the same point; the loss and its
    offset gradients do not depend on the point or stride, so the boxes are
    formed at the origin with unit stride. Degenerate predictions (zero or
    inverted extent) get their area clamped to zero; gradients then flow
    only through the intersection/enclosure terms that still select a
    prediction edge.
    """
    po = np.asarray(pred, dtype=np.float64)
    to = np.asarray(target, dtype=np.float64)
    ax1, ay1, ax2, ay2 = -po[..., 0], -po[..., 1], po[..., 2], po[..., 3]
    bx1, by1, bx2, by2 = -to[..., 0], -to[..., 1], to[..., 2], to[..., 3]

    # Selection masks use >= / <= so that ties pick the prediction edge.
    ix1_a = ax1 >= bx1
    ix2_a = ax2 <= bx2
    iy1_a = ay1 >= by1
    iy2_a = ay2 <= by2
    iw = np.minimum(ax2, bx2) - np.maximum(ax1, bx1)
    ih = np.minimum(ay2, by2) - np.maximum(ay1, by1)
    ipos = (iw > 0) & (ih > 0)
    inter = np.where(ipos, iw * ih, 0.0)

    wa = ax2 - ax1
    ha = ay2 - ay1
    wa_pos = wa > 0
    ha_pos = ha > 0
    area_a = np.where(wa_pos, wa, 0.0) * np.where(ha_pos, ha, 0.0)
    area_b = (bx2 - bx1) * (by2 - by1)
    union = area_a + area_b - inter

    cx1_a = ax1 <= bx1
    cx2_a = ax2 >= bx2
    cy1_a = ay1 <= by1
    cy2_a = ay2 >= by2
    cw = np.maximum(ax2, bx2) - np.minimum(ax1, bx1)
    ch = np.maximum(ay2, by2) - np.minimum(ay1, by1)
    enclose = cw * ch

    values = 1.0 - (inter / union - (enclose - union) / enclose)

    # d inter / d corner (zero unless the overlap is open and the prediction
    # edge is the selected one).
    di = np.zeros(po.shape[:-1] + (4,))
    di[..., 0] = np.where(ipos & ix1_a, -ih, 0.0)
    di[..., 1] = np.where(ipos & iy1_a, -iw, 0.0)
    di[..., 2] = np.where(ipos & ix2_a, ih, 0.0)
    di[..., 3] = np.where(ipos & iy2_a, iw, 0.0)

    ha_c = np.where(ha_pos, ha, 0.0)
    wa_c = np.where(wa_pos, wa, 0.0)
    da = np.zeros_like(di)
    da[..., 0] = np.where(wa_pos, -ha_c, 0.0)
    da[..., 1] = np.where(ha_pos, -wa_c, 0.0)
    da[..., 2] = np.where(wa_pos, ha_c, 0.0)
    da[..., 3] = np.where(ha_pos, wa_c, 0.0)

    dc = np.zeros_like(di)
    dc[..., 0] = np.where(cx1_a, -ch, 0.0)
    dc[..., 1] = np.where(cy1_a, -cw, 0.0)
    dc[..., 2] = np.where(cx2_a, ch, 0.0)
    dc[..., 3] = np.where(cy2_a, cw, 0.0)

    du = da - di
    u2 = union * union
    c2 = enclose * enclose
    dgiou = (di * union[..., None] - inter[..., None] * du) / u2[..., None] + (
        du * enclose[..., None] - union[..., None] * dc
    ) / c2[..., None]
    dcorner = -dgiou

    # Corner -> offset: x1 = -l, y1 = -t, x2 = r, y2 = b.
    grads = np.empty_like(dcorner)
    grads[..., 0] = -dcorner[..., 0]
    grads[..., 1] = -dcorner[..., 1]
    grads[..., 2] = dcorner[..., 2]
    grads[..., 3] = dcorner[..., 3]
    return values, grads


def giou_loss(pred: SideOffsets, target: SideOffsets) -> LossEval:
    """``1 - GIoU`` between offset-decoded boxes around a shared point, with
    the gradient w.r.t. the four prediction offsets."""
    t = target.as_array()
    if np.any(t < 0):
        raise ValueError(f"target offsets must be non-negative, got {target}")
    values, grads = giou_loss_batch(pred.as_array()[None, :], t[None, :])
    return LossEval(float(values[0]), grads[0])


# ---------------------------------------------------------------------------
# Centerness and the offset codec


def centerness_batch(offsets: np.ndarray) -> np.ndarray:
    """sqrt of the product of per-axis min/max offset ratios; 0 whenever an
    offset is zero (point on a box edge)."""
    o = np.asarray(offsets, dtype=np.float64)
    lr_min = np.minimum(o[..., 0], o[..., 2])
    lr_max = np.maximum(o[..., 0], o[..., 2])
    tb_min = np.minimum(o[..., 1], o[..., 3])
    tb_max = np.maximum(o[..., 1], o[..., 3])
    ok = (lr_min > 0) & (tb_min > 0)
    ratio = np.where(ok, lr_min / np.where(lr_max > 0, lr_max, 1.0), 0.0) * np.where(
        ok, tb_min / np.where(tb_max > 0, tb_max, 1.0), 0.0
    )
    return np.sqrt(ratio)


def centerness(o: SideOffsets) -> float:
    arr = o.as_array()
    if np.any(arr < 0):
        raise ValueError(f"centerness needs non-negative offsets, got {o}")
    return float(centerness_batch(arr))


def decode_batch(px: np.ndarray, py: np.ndarray, offsets: np.ndarray, stride: float) -> np.ndarray:
    """Offsets around grid points -> corner-form boxes, shape (..., 4)."""
    o = np.asarray(offsets, dtype=np.float64)
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    return np.stack(
        [
            px - o[..., 0] * stride,
            py - o[..., 1] * stride,
            px + o[..., 2] * stride,
            py + o[..., 3] * stride,
        ],
        axis=-1,
    )


def decode(point: GridPoint, offsets: SideOffsets) -> Box:
    """Reconstruct the box whose edges sit ``offsets * stride`` away from the
    point. Offsets must describe a point inside the box."""
    corners = decode_batch(
        np.asarray([point.x]), np.asarray([point.y]), offsets.as_array()[None, :], point.stride
    )[0]
    return Box(*(float(c) for c in corners))


def encode_batch(px: np.ndarray, py: np.ndarray, boxes: np.ndarray, stride: float) -> np.ndarray:
    """Boxes -> stride-normalized side offsets around grid points."""
    b = np.asarray(boxes, dtype=np.float64)
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    return np.stack(
        [
            (px - b[..., 0]) / stride,
            (py - b[..., 1]) / stride,
            (b[..., 2] - px) / stride,
            (b[..., 3] - py) / stride,
        ],
        axis=-1,
    )


def encode(point: GridPoint, box: Box) -> SideOffsets:
    """Side offsets from a point to a box containing it."""
    if not (box.x1 <= point.x <= box.x2 and box.y1 <= point.y <= box.y2):
        raise ValueError(f"point ({point.x}, {point.y}) lies outside {box}")
    offs = encode_batch(
        np.asarray([point.x]), np.asarray([point.y]), box.as_array()[None, :], point.stride
    )[0]
    return SideOffsets(*(float(v) for v in offs))


# ---------------------------------------------------------------------------
# Histograms for label-shape studies


def label_histogram(values, bins: int) -> Histogram:
    """Histogram over uniform bins spanning [min, max] of the data.

    An empty input yields an empty histogram rather than an error; the
    counts always sum to the number of input values.
    """
    if bins < 1:
        raise ValueError(f"need at least one bin, got {bins}")
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        return Histogram(np.zeros(0, dtype=np.int64), np.zeros(0))
    if not np.all(np.isfinite(arr)):
        raise ValueError("histogram values must be finite")
    counts, edges = np.histogram(arr, bins=bins)
    return Histogram(counts.astype(np.int64), edges)
