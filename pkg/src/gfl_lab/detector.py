"""A toy dense one-stage detector head with hand-written backprop.

Two head modes share one loss:

* ``tabular`` -- the parameters *are* the per-point raw outputs (independent
  logits per grid point); useful for optimizing a single scene to its
  per-point optimum.
* ``mlp`` -- a shared two-layer tanh perceptron mapping point features to
  raw outputs.

Head variants differ in how classification and localization quality are
represented: ``joint`` supervises the class scores themselves with the
soft quality label; ``iou_branch`` / ``centerness_branch`` keep one-hot
focal classification plus a separate quality logit (BCE on positives only);
``no_quality`` is plain focal classification.

The total per-scene loss is

    L = sum(L_cls) / N_pos
      + sum_over_positives(w * (lambda_box * L_giou + lambda_dist * L_reg)) / N_pos

where ``w`` is the detached predicted quality of the positive (floored for
the joint head so no positive goes completely dead), ``L_reg`` sums the
per-side regression loss (two-knot projection loss for the general head,
Gaussian NLL for the gaussian head, absent for dirac), and quality targets
are the IoU between the *current* decoded box and its ground-truth box,
recomputed every call and treated as a constant by the gradients. Pass a
previously returned :class:`DetachedState` to evaluate the loss with those
constants frozen (finite-difference checks need this to probe the same
computation graph the analytic gradients describe).
"""

from __future__ import annotations

import base64
import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .distrib import RegressorKind, Support, expectation_batch, softmax_batch
from .geometry import centerness_batch, iou, iou_xyxy, giou_loss_batch, Box
from .losses import (
    binary_cross_entropy_batch,
    distribution_focal_loss_batch,
    focal_loss_batch,
    gaussian_nll_batch,
    quality_focal_loss_batch,
    sigmoid,
)
from .seeding import child_rng
from .synth import Grid, Scene

__all__ = [
    "HeadVariant",
    "TrainConfig",
    "Assignment",
    "RawOutputs",
    "HeadParams",
    "DetachedState",
    "LossBreakdown",
    "TrainResult",
    "TrainingDiverged",
    "assign",
    "quality_target",
    "forward",
    "decode_outputs",
    "total_loss",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

# Class logits start at zero (even odds) so the loss curve starts at its
# untrained maximum and decreases; a small-prior init would instead make the
# quality-weighted box terms ramp up from near zero as confidence grows.
REG_INIT = 2.0  # initial decoded offset, in stride units, for every representation
_W1_STD = 0.1
_W2_STD = 0.1


class HeadVariant(str, enum.Enum):
    JOINT = "joint"
    IOU_BRANCH = "iou_branch"
    CENTERNESS_BRANCH = "centerness_branch"
    NO_QUALITY = "no_quality"

    @property
    def has_quality_branch(self) -> bool:
        return self in (HeadVariant.IOU_BRANCH, HeadVariant.CENTERNESS_BRANCH)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    variant: HeadVariant = HeadVariant.JOINT
    regressor: RegressorKind = field(default_factory=RegressorKind.general)
    mode: str = "mlp"
    hidden: int = 64
    iterations: int = 2000
    lr: float | None = None  # None -> 0.05 tabular, 0.01 mlp
    momentum: float = 0.9
    batch_size: int = 8
    lambda_box: float = 2.0
    lambda_dist: float = 0.25
    beta: float = 2.0
    gamma: float = 2.0
    quality_floor: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("tabular", "mlp"):
            raise ValueError(f"unknown head mode {self.mode!r}")
        if self.iterations < 0 or self.batch_size < 1 or self.hidden < 1:
            raise ValueError("iterations must be >= 0, batch_size and hidden >= 1")

    @property
    def resolved_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        return 0.05 if self.mode == "tabular" else 0.01


@dataclass(frozen=True, eq=False)
class Assignment:
    """Per-point labels: 0 is background, otherwise class_id + 1."""

    labels: np.ndarray
    gt_index: np.ndarray
    offsets: np.ndarray

    @property
    def num_positives(self) -> int:
        return int((self.labels > 0).sum())


@dataclass(frozen=True, eq=False)
class RawOutputs:
    cls: np.ndarray  # (P, C) logits
    reg: np.ndarray  # (P, 4, arity)
    quality: np.ndarray | None  # (P,) logits, only for branch variants


@dataclass(frozen=True, eq=False)
class DetachedState:
    """Quantities the gradients treat as constants."""

    quality_weight: np.ndarray  # (num_pos,)
    quality_target: np.ndarray  # (num_pos,)


@dataclass(frozen=True)
class LossBreakdown:
    """Summed loss components; ``l_b``/``l_d`` include the quality weights."""

    l_q: float
    l_b: float
    l_d: float
    n_pos: int
    lambda_box: float
    lambda_dist: float

    @property
    def total(self) -> float:
        return (self.l_q + self.lambda_box * self.l_b + self.lambda_dist * self.l_d) / self.n_pos


@dataclass(frozen=True, eq=False)
class TrainResult:
    params: "HeadParams"
    curve: list[dict]
    config: TrainConfig


class HeadParams:
    """Parameter container for either head mode.

    ``arrays`` maps fixed names to float64 arrays: ``cls``/``reg``(/``quality``)
    for tabular mode, ``w1``/``b1``/``w2``/``b2`` for mlp mode. The flatten /
    ``with_vector`` pair gives finite-difference checks a single coordinate
    vector to probe.
    """

    def __init__(
        self,
        mode: str,
        variant: HeadVariant,
        regressor: RegressorKind,
        num_classes: int,
        arrays: dict[str, np.ndarray],
    ):
        self.mode = mode
        self.variant = variant
        self.regressor = regressor
        self.num_classes = num_classes
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
        expected = self._expected_keys(mode, variant)
        if list(self.arrays.keys()) != expected:
            raise ValueError(f"expected arrays {expected}, got {list(self.arrays.keys())}")

    @staticmethod
    def _expected_keys(mode: str, variant: HeadVariant) -> list[str]:
        if mode == "tabular":
            keys = ["cls", "reg"]
            if variant.has_quality_branch:
                keys.append("quality")
            return keys
        return ["w1", "b1", "w2", "b2"]

    # -- constructors ------------------------------------------------------

    @staticmethod
    def _reg_bias(regressor: RegressorKind) -> np.ndarray:
        """Per-side initial regression outputs decoding to roughly REG_INIT.

        All three representations start from the same sensible box (about
        REG_INIT stride units per side) so early quality targets are moderate
        instead of near zero.  For the general head that means a concave
        quadratic over the knots, i.e. a softmax bump centred at REG_INIT.
        """
        if regressor.name in ("dirac", "gaussian"):
            side = np.zeros(regressor.arity)
            side[0] = REG_INIT
        else:
            side = -0.5 * (regressor.support.knots() - REG_INIT) ** 2
        return side

    @classmethod
    def init_tabular(
        cls,
        num_points: int,
        num_classes: int,
        variant: HeadVariant,
        regressor: RegressorKind,
    ) -> "HeadParams":
        arity = regressor.arity
        cls_init = np.zeros((num_points, num_classes))
        reg = np.zeros((num_points, 4, arity))
        reg[:, :, :] = cls._reg_bias(regressor)
        arrays = {"cls": cls_init, "reg": reg}
        if variant.has_quality_branch:
            arrays["quality"] = np.zeros(num_points)
        return cls("tabular", variant, regressor, num_classes, arrays)

    @classmethod
    def init_mlp(
        cls,
        feature_dim: int,
        num_classes: int,
        variant: HeadVariant,
        regressor: RegressorKind,
        hidden: int,
        rng: np.random.Generator,
    ) -> "HeadParams":
        arity = regressor.arity
        out_dim = num_classes + 4 * arity + (1 if variant.has_quality_branch else 0)
        w1 = rng.normal(0.0, _W1_STD, size=(feature_dim, hidden))
        b1 = np.zeros(hidden)
        w2 = rng.normal(0.0, _W2_STD, size=(hidden, out_dim))
        b2 = np.zeros(out_dim)
        b2[num_classes : num_classes + 4 * arity] = np.tile(cls._reg_bias(regressor), 4)
        return cls("mlp", variant, regressor, num_classes, {"w1": w1, "b1": b1, "w2": w2, "b2": b2})

    # -- vector view -------------------------------------------------------

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in self.arrays])

    def with_vector(self, vec: np.ndarray) -> "HeadParams":
        out = {}
        pos = 0
        for k, a in self.arrays.items():
            out[k] = np.asarray(vec[pos : pos + a.size], dtype=np.float64).reshape(a.shape).copy()
            pos += a.size
        if pos != vec.size:
            raise ValueError(f"vector has {vec.size} entries, parameters need {pos}")
        return HeadParams(self.mode, self.variant, self.regressor, self.num_classes, out)

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(a) for k, a in self.arrays.items()}

    def copy(self) -> "HeadParams":
        return HeadParams(
            self.mode,
            self.variant,
            self.regressor,
            self.num_classes,
            {k: a.copy() for k, a in self.arrays.items()},
        )


# ---------------------------------------------------------------------------
# Assignment and quality targets


def assign(grid: Grid, gt: list[tuple[Box, int]]) -> Assignment:
    """Inside-box assignment: each point belongs to the smallest-area ground
    truth box containing it (ties to the lowest gt index), else background."""
    p = grid.px.size
    labels = np.zeros(p, dtype=np.int64)
    gt_index = np.full(p, -1, dtype=np.int64)
    offsets = np.zeros((p, 4))
    if gt:
        corners = np.stack([b.as_array() for b, _ in gt])
        areas = (corners[:, 2] - corners[:, 0]) * (corners[:, 3] - corners[:, 1])
        inside = (
            (grid.px[:, None] >= corners[None, :, 0])
            & (grid.px[:, None] <= corners[None, :, 2])
            & (grid.py[:, None] >= corners[None, :, 1])
            & (grid.py[:, None] <= corners[None, :, 3])
        )
        masked = np.where(inside, areas[None, :], np.inf)
        best = np.argmin(masked, axis=1)  # first minimum -> lowest index on ties
        has = inside[np.arange(p), best]
        gt_index[has] = best[has]
        cls_ids = np.asarray([c for _, c in gt], dtype=np.int64)
        labels[has] = cls_ids[best[has]] + 1
        if np.any(has):
            from .geometry import encode_batch

            offsets[has] = encode_batch(
                grid.px[has], grid.py[has], corners[best[has]], grid.stride
            )
    return Assignment(labels=labels, gt_index=gt_index, offsets=offsets)


def quality_target(pred_box: Box, gt_box: Box) -> float:
    """Localization quality label: plain IoU, treated as a constant by all
    gradients (it is recomputed from the live predictions every step but
    never differentiated through)."""
    return iou(pred_box, gt_box)


# ---------------------------------------------------------------------------
# Forward


def _forward_cached(params: HeadParams, features: np.ndarray):
    arity = params.regressor.arity
    c = params.num_classes
    if params.mode == "tabular":
        arr = params.arrays
        if arr["cls"].shape[0] != features.shape[0]:
            raise ValueError(
                f"tabular head sized for {arr['cls'].shape[0]} points, scene has {features.shape[0]}"
            )
        quality = arr["quality"] if params.variant.has_quality_branch else None
        return RawOutputs(cls=arr["cls"], reg=arr["reg"], quality=quality), None
    w1, b1, w2, b2 = (params.arrays[k] for k in ("w1", "b1", "w2", "b2"))
    if features.shape[1] != w1.shape[0]:
        raise ValueError(f"head expects {w1.shape[0]} features, scene has {features.shape[1]}")
    hidden = np.tanh(features @ w1 + b1)
    out = hidden @ w2 + b2
    p = features.shape[0]
    cls = out[:, :c]
    reg = out[:, c : c + 4 * arity].reshape(p, 4, arity)
    quality = out[:, -1] if params.variant.has_quality_branch else None
    return RawOutputs(cls=cls, reg=reg, quality=quality), (features, hidden)


def forward(params: HeadParams, features: np.ndarray) -> RawOutputs:
    """Raw per-point outputs for one scene's feature matrix."""
    outputs, _ = _forward_cached(params, np.asarray(features, dtype=np.float64))
    return outputs


def decode_outputs(reg: np.ndarray, regressor: RegressorKind) -> np.ndarray:
    """Raw regression outputs -> predicted side offsets, shape (..., 4)."""
    if regressor.name == "general":
        probs = softmax_batch(reg)
        return expectation_batch(probs, regressor.support)
    return reg[..., 0]


# ---------------------------------------------------------------------------
# Loss


def total_loss(
    params: HeadParams,
    scene: Scene,
    assignment: Assignment,
    cfg: TrainConfig,
    detached: DetachedState | None = None,
) -> tuple[LossBreakdown, dict[str, np.ndarray], DetachedState]:
    """Per-scene loss, full parameter gradient, and the detached constants
    actually used. The gradient is exact for the computation graph in which
    ``detached`` quantities are constants."""
    features = np.asarray(scene.features, dtype=np.float64)
    out, cache = _forward_cached(params, features)
    p, c = out.cls.shape
    arity = params.regressor.arity
    kind = params.regressor.name

    pos = assignment.labels > 0
    idx = np.flatnonzero(pos)
    n_pos = max(int(idx.size), 1)
    cls0 = assignment.labels[idx] - 1

    g_cls = np.zeros_like(out.cls)
    g_reg = np.zeros_like(out.reg)
    g_q = np.zeros(p) if out.quality is not None else None

    # Regression decode for positives.
    l_b = 0.0
    l_d = 0.0
    if idx.size:
        reg_pos = out.reg[idx]  # (m, 4, arity)
        tgt_off = assignment.offsets[idx]
        if kind == "general":
            probs = softmax_batch(reg_pos)
            pred_off = expectation_batch(probs, params.regressor.support)
        else:
            pred_off = reg_pos[..., 0]

        if detached is None:
            pred_xy = np.stack([-pred_off[:, 0], -pred_off[:, 1], pred_off[:, 2], pred_off[:, 3]], 1)
            tgt_xy = np.stack([-tgt_off[:, 0], -tgt_off[:, 1], tgt_off[:, 2], tgt_off[:, 3]], 1)
            q = iou_xyxy(pred_xy, tgt_xy)
            if params.variant == HeadVariant.JOINT:
                w = np.maximum(sigmoid(out.cls[idx, cls0]), cfg.quality_floor)
            elif params.variant.has_quality_branch:
                w = sigmoid(out.quality[idx])
            else:
                w = np.ones(idx.size)
            detached = DetachedState(quality_weight=w.copy(), quality_target=q.copy())
        w = detached.quality_weight
        q = detached.quality_target
    else:
        if detached is None:
            detached = DetachedState(quality_weight=np.zeros(0), quality_target=np.zeros(0))
        w = detached.quality_weight
        q = detached.quality_target

    # Classification (+ separate quality branch).
    if params.variant == HeadVariant.JOINT:
        targets = np.zeros((p, c))
        if idx.size:
            targets[idx, cls0] = q
        vals, grads = quality_focal_loss_batch(out.cls, targets, cfg.beta)
        l_q = float(vals.sum())
        g_cls += grads / n_pos
    else:
        targets = np.zeros((p, c))
        if idx.size:
            targets[idx, cls0] = 1.0
        vals, grads = focal_loss_batch(out.cls, targets, cfg.gamma)
        l_q = float(vals.sum())
        g_cls += grads / n_pos
        if params.variant.has_quality_branch and idx.size:
            if params.variant == HeadVariant.IOU_BRANCH:
                branch_target = q
            else:
                branch_target = centerness_batch(assignment.offsets[idx])
            bvals, bgrads = binary_cross_entropy_batch(out.quality[idx], branch_target)
            l_q += float(bvals.sum())
            g_q[idx] += bgrads / n_pos

    # Box and distribution losses on positives.
    if idx.size:
        box_vals, box_grads = giou_loss_batch(pred_off, tgt_off)
        l_b = float((w * box_vals).sum())
        goff = (cfg.lambda_box / n_pos) * w[:, None] * box_grads  # (m, 4)

        if kind == "general":
            sup = params.regressor.support
            flat_logits = reg_pos.reshape(-1, arity)
            flat_t = tgt_off.reshape(-1)
            dvals, dgrads = distribution_focal_loss_batch(flat_logits, flat_t, sup)
            dvals = dvals.reshape(idx.size, 4)
            dgrads = dgrads.reshape(idx.size, 4, arity)
            l_d = float((w * dvals.sum(axis=1)).sum())
            # Chain the box gradient through the softmax expectation.
            knots = sup.knots()
            g_reg[idx] += goff[:, :, None] * probs * (knots[None, None, :] - pred_off[:, :, None])
            g_reg[idx] += (cfg.lambda_dist / n_pos) * w[:, None, None] * dgrads
        elif kind == "gaussian":
            mu = reg_pos[..., 0]
            lv = reg_pos[..., 1]
            nvals, gmu, glv = gaussian_nll_batch(mu, lv, tgt_off)
            l_d = float((w * nvals.sum(axis=1)).sum())
            g_reg[idx, :, 0] += goff + (cfg.lambda_dist / n_pos) * w[:, None] * gmu
            g_reg[idx, :, 1] += (cfg.lambda_dist / n_pos) * w[:, None] * glv
        else:
            g_reg[idx, :, 0] += goff

    breakdown = LossBreakdown(
        l_q=l_q,
        l_b=l_b,
        l_d=l_d,
        n_pos=n_pos,
        lambda_box=cfg.lambda_box,
        lambda_dist=cfg.lambda_dist,
    )

    # Push output gradients through the head.
    if params.mode == "tabular":
        grads = {"cls": g_cls, "reg": g_reg}
        if params.variant.has_quality_branch:
            grads["quality"] = g_q
    else:
        pieces = [g_cls, g_reg.reshape(p, 4 * arity)]
        if params.variant.has_quality_branch:
            pieces.append(g_q[:, None])
        g_out = np.concatenate(pieces, axis=1)
        x, hidden = cache
        w2 = params.arrays["w2"]
        g_hidden = (g_out @ w2.T) * (1.0 - hidden * hidden)
        grads = {
            "w1": x.T @ g_hidden,
            "b1": g_hidden.sum(axis=0),
            "w2": hidden.T @ g_out,
            "b2": g_out.sum(axis=0),
        }
    return breakdown, grads, detached


# ---------------------------------------------------------------------------
# Training


class _BatchComposition:
    """Static per-mini-batch tensors: the stacked feature matrix plus the
    concatenated positive bookkeeping for a fixed tuple of scene indices."""

    def __init__(self, cache: "_BatchCache", picks: list[int]):
        b = len(picks)
        p = cache.points
        self.size = b
        self.x = np.ascontiguousarray(cache.features[picks].reshape(b * p, -1))
        self.n_pos_vec = cache.n_pos[picks]
        self.row_scale = np.repeat(1.0 / (b * self.n_pos_vec), p)
        self.pos_rows = np.concatenate(
            [slot * p + cache.idx[i] for slot, i in enumerate(picks)]
        ).astype(np.int64)
        self.pos_slot = np.concatenate(
            [np.full(cache.idx[i].size, slot, dtype=np.int64) for slot, i in enumerate(picks)]
        )
        self.cls0 = np.concatenate([cache.cls0[i] for i in picks]).astype(np.int64)
        self.tgt_off = (
            np.concatenate([cache.tgt_off[i] for i in picks])
            if self.pos_rows.size
            else np.zeros((0, 4))
        )
        self.center = np.concatenate([cache.center[i] for i in picks]) if self.pos_rows.size else np.zeros(0)
        self.pos_scale = 1.0 / (b * self.n_pos_vec[self.pos_slot])
        self.tgt_xy = np.stack(
            [-self.tgt_off[:, 0], -self.tgt_off[:, 1], self.tgt_off[:, 2], self.tgt_off[:, 3]], 1
        )


class _BatchCache:
    """Precomputed per-scene tensors so the mlp training step can run one
    fused forward/backward over a whole mini-batch of scenes. Batch
    compositions repeat cyclically, so they are memoized by start index."""

    _MAX_COMPOSITIONS = 64

    def __init__(self, dataset: list[Scene], assignments: list[Assignment]):
        self.features = np.stack([np.asarray(s.features, dtype=np.float64) for s in dataset])
        self.points = self.features.shape[1]
        self.idx = [np.flatnonzero(a.labels > 0) for a in assignments]
        self.cls0 = [a.labels[i] - 1 for a, i in zip(assignments, self.idx)]
        self.tgt_off = [a.offsets[i] for a, i in zip(assignments, self.idx)]
        self.n_pos = np.asarray([max(int(i.size), 1) for i in self.idx], dtype=np.float64)
        self.center = [centerness_batch(t) for t in self.tgt_off]
        self._compositions: dict[tuple[int, ...], _BatchComposition] = {}
        self.workspace: dict[str, np.ndarray] = {}

    def composition(self, picks: list[int]) -> _BatchComposition:
        key = tuple(picks)
        comp = self._compositions.get(key)
        if comp is None:
            comp = _BatchComposition(self, picks)
            if len(self._compositions) < self._MAX_COMPOSITIONS:
                self._compositions[key] = comp
        return comp

    def buffer(self, name: str, shape: tuple[int, ...]) -> np.ndarray:
        buf = self.workspace.get(name)
        if buf is None or buf.shape != shape:
            buf = np.empty(shape)
            self.workspace[name] = buf
        return buf


def _mlp_batch_step(
    params: HeadParams, cache: _BatchCache, picks: list[int], cfg: TrainConfig
) -> tuple[dict, dict[str, np.ndarray]]:
    """One mini-batch loss/gradient evaluation, numerically equivalent to
    averaging :func:`total_loss` over the picked scenes."""
    comp = cache.composition(picks)
    b = comp.size
    p = cache.points
    c = params.num_classes
    arity = params.regressor.arity
    kind = params.regressor.name
    rows = b * p
    x = comp.x
    pos_rows = comp.pos_rows
    cls0 = comp.cls0
    tgt_off = comp.tgt_off

    w1, b1, w2, b2 = (params.arrays[k] for k in ("w1", "b1", "w2", "b2"))
    hidden = cache.buffer("hidden", (rows, w1.shape[1]))
    np.matmul(x, w1, out=hidden)
    hidden += b1
    np.tanh(hidden, out=hidden)
    out = cache.buffer("out", (rows, w2.shape[1]))
    np.matmul(hidden, w2, out=out)
    out += b2
    cls = out[:, :c]
    reg = out[:, c : c + 4 * arity].reshape(rows, 4, arity)
    quality = out[:, -1] if params.variant.has_quality_branch else None

    # Decode, dynamic quality targets and detached weights.
    reg_pos = reg[pos_rows]
    if kind == "general":
        probs = softmax_batch(reg_pos)
        pred_off = expectation_batch(probs, params.regressor.support)
    else:
        pred_off = reg_pos[..., 0]
    pred_xy = np.stack([-pred_off[:, 0], -pred_off[:, 1], pred_off[:, 2], pred_off[:, 3]], 1)
    q = iou_xyxy(pred_xy, comp.tgt_xy)
    if params.variant == HeadVariant.JOINT:
        w = np.maximum(sigmoid(cls[pos_rows, cls0]), cfg.quality_floor)
    elif params.variant.has_quality_branch:
        w = sigmoid(quality[pos_rows])
    else:
        w = np.ones(pos_rows.size)

    # Output gradient buffer assembled in place, slice by slice.
    g_out = cache.buffer("g_out", (rows, w2.shape[1]))
    g_cls = g_out[:, :c]
    g_reg = g_out[:, c : c + 4 * arity].reshape(rows, 4, arity)

    lq_branch = np.zeros(b)
    targets = cache.buffer("targets", (rows, c))
    targets.fill(0.0)
    if params.variant == HeadVariant.JOINT:
        targets[pos_rows, cls0] = q
        vals, grads = quality_focal_loss_batch(cls, targets, cfg.beta)
        np.multiply(grads, comp.row_scale[:, None], out=g_cls)
    else:
        targets[pos_rows, cls0] = 1.0
        vals, grads = focal_loss_batch(cls, targets, cfg.gamma)
        np.multiply(grads, comp.row_scale[:, None], out=g_cls)
        if params.variant.has_quality_branch:
            g_q = g_out[:, -1]
            g_q.fill(0.0)
            if pos_rows.size:
                if params.variant == HeadVariant.IOU_BRANCH:
                    branch_target = q
                else:
                    branch_target = comp.center
                bvals, bgrads = binary_cross_entropy_batch(quality[pos_rows], branch_target)
                g_q[pos_rows] = bgrads * comp.pos_scale
                lq_branch = np.bincount(comp.pos_slot, weights=bvals, minlength=b)

    lq_scene = vals.reshape(b, -1).sum(axis=1) + lq_branch
    lb_scene = np.zeros(b)
    ld_scene = np.zeros(b)
    g_reg.fill(0.0)
    if pos_rows.size:
        box_vals, box_grads = giou_loss_batch(pred_off, tgt_off)
        lb_scene = np.bincount(comp.pos_slot, weights=w * box_vals, minlength=b)
        goff = (cfg.lambda_box * comp.pos_scale * w)[:, None] * box_grads
        if kind == "general":
            sup = params.regressor.support
            dvals, dgrads = distribution_focal_loss_batch(
                reg_pos.reshape(-1, arity), tgt_off.reshape(-1), sup
            )
            ld_scene = np.bincount(
                comp.pos_slot, weights=w * dvals.reshape(-1, 4).sum(axis=1), minlength=b
            )
            knots = sup.knots()
            g_pos = goff[:, :, None] * probs * (knots[None, None, :] - pred_off[:, :, None])
            g_pos += (cfg.lambda_dist * comp.pos_scale * w)[:, None, None] * dgrads.reshape(-1, 4, arity)
            g_reg[pos_rows] = g_pos
        elif kind == "gaussian":
            nvals, gmu, glv = gaussian_nll_batch(reg_pos[..., 0], reg_pos[..., 1], tgt_off)
            ld_scene = np.bincount(comp.pos_slot, weights=w * nvals.sum(axis=1), minlength=b)
            scale = (cfg.lambda_dist * comp.pos_scale * w)[:, None]
            g_reg[pos_rows, :, 0] = goff + scale * gmu
            g_reg[pos_rows, :, 1] = scale * glv
        else:
            g_reg[pos_rows, :, 0] = goff

    g_hidden = cache.buffer("g_hidden", (rows, w1.shape[1]))
    np.matmul(g_out, w2.T, out=g_hidden)
    tmp = cache.buffer("tanh_deriv", (rows, w1.shape[1]))
    np.multiply(hidden, hidden, out=tmp)
    np.subtract(1.0, tmp, out=tmp)
    g_hidden *= tmp
    grads = {
        "w1": np.matmul(x.T, g_hidden, out=cache.buffer("gw1", w1.shape)),
        "b1": g_hidden.sum(axis=0),
        "w2": np.matmul(hidden.T, g_out, out=cache.buffer("gw2", w2.shape)),
        "b2": g_out.sum(axis=0),
    }
    entry = {
        "total": float(
            np.mean(
                (lq_scene + cfg.lambda_box * lb_scene + cfg.lambda_dist * ld_scene) / comp.n_pos_vec
            )
        ),
        "cls": float(np.mean(lq_scene / comp.n_pos_vec)),
        "box": float(np.mean(cfg.lambda_box * lb_scene / comp.n_pos_vec)),
        "dist": float(np.mean(cfg.lambda_dist * ld_scene / comp.n_pos_vec)),
        "n_pos": float(np.mean(comp.n_pos_vec)),
    }
    return entry, grads


def train(dataset: list[Scene], cfg: TrainConfig, grid: Grid) -> TrainResult:
    """Plain SGD with momentum over cyclic mini-batches of scenes.

    Deterministic given the config seed; raises :class:`TrainingDiverged` on
    a non-finite loss.
    """
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    feature_count = dataset[0].features.shape[1]
    num_points = grid.px.size
    if cfg.mode == "tabular":
        params = HeadParams.init_tabular(num_points, _num_classes(dataset), cfg.variant, cfg.regressor)
    else:
        params = HeadParams.init_mlp(
            feature_count,
            _num_classes(dataset),
            cfg.variant,
            cfg.regressor,
            cfg.hidden,
            child_rng(cfg.seed, "init"),
        )
    assignments = [assign(grid, s.gt) for s in dataset]

    lr = cfg.resolved_lr
    vel = params.zero_grads()
    n = len(dataset)
    batch = min(cfg.batch_size, n)
    cache = _BatchCache(dataset, assignments) if cfg.mode == "mlp" else None
    curve: list[dict] = []
    for it in range(cfg.iterations):
        start = (it * batch) % n
        picks = [(start + j) % n for j in range(batch)]
        if cache is not None:
            entry, acc = _mlp_batch_step(params, cache, picks, cfg)
        else:
            acc = params.zero_grads()
            tot = lq = lb = ld = npos = 0.0
            for i in picks:
                bd, grads, _ = total_loss(params, dataset[i], assignments[i], cfg)
                tot += bd.total
                lq += bd.l_q / bd.n_pos
                lb += bd.lambda_box * bd.l_b / bd.n_pos
                ld += bd.lambda_dist * bd.l_d / bd.n_pos
                npos += bd.n_pos
                for k in acc:
                    acc[k] += grads[k]
            scale = 1.0 / batch
            for k in acc:
                acc[k] *= scale
            entry = {
                "total": tot * scale,
                "cls": lq * scale,
                "box": lb * scale,
                "dist": ld * scale,
                "n_pos": npos * scale,
            }
        if not np.isfinite(entry["total"]):
            raise TrainingDiverged(f"non-finite loss at iteration {it}: {entry['total']}")
        for k in acc:
            vel[k] = cfg.momentum * vel[k] + acc[k]
            params.arrays[k] -= lr * vel[k]
        curve.append({"iteration": it, **entry})
    return TrainResult(params=params, curve=curve, config=cfg)


def _num_classes(dataset: list[Scene]) -> int:
    top = -1
    for s in dataset:
        for _, cls in s.gt:
            top = max(top, cls)
    # Features carry the class one-hot width; infer from them instead when
    # the sampled scenes happen to miss the last class.
    fdim = dataset[0].features.shape[1]
    return max(top + 1, fdim - 9)


# ---------------------------------------------------------------------------
# Checkpoints

_CKPT_FORMAT = "gfl-lab-checkpoint"
_CKPT_VERSION = 1


def save_checkpoint(path, params: HeadParams) -> None:
    """Versioned JSON checkpoint: header fields plus row-major base64 arrays."""
    reg = params.regressor
    doc = {
        "format": _CKPT_FORMAT,
        "version": _CKPT_VERSION,
        "mode": params.mode,
        "variant": params.variant.value,
        "regressor": {
            "name": reg.name,
            "support": None
            if reg.support is None
            else {"y0": reg.support.y0, "n": reg.support.n, "delta": reg.support.delta},
        },
        "num_classes": params.num_classes,
        "arrays": {
            k: {
                "shape": list(a.shape),
                "data": base64.b64encode(np.ascontiguousarray(a).tobytes()).decode("ascii"),
            }
            for k, a in params.arrays.items()
        },
    }
    with open(path, "w", encoding="ascii") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> HeadParams:
    with open(path, "r", encoding="ascii") as fh:
        doc = json.load(fh)
    if doc.get("format") != _CKPT_FORMAT:
        raise ValueError(f"not a {_CKPT_FORMAT} file: {path}")
    if doc.get("version") != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    rd = doc["regressor"]
    support = None if rd["support"] is None else Support(**rd["support"])
    regressor = RegressorKind(rd["name"], support)
    arrays = {}
    for k, spec in doc["arrays"].items():
        raw = base64.b64decode(spec["data"])
        arrays[k] = np.frombuffer(raw, dtype=np.float64).reshape(spec["shape"]).copy()
    return HeadParams(doc["mode"], HeadVariant(doc["variant"]), regressor, doc["num_classes"], arrays)
