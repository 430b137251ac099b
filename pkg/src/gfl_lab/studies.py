"""Trained-model studies: benchmark assembly, evaluation, and the derived
artifacts (score scatter, label histograms, distribution dumps) that the CLI
writes and the acceptance suite asserts on."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .detector import (
    Assignment,
    HeadVariant,
    TrainResult,
    assign,
    decode_outputs,
    forward,
    total_loss,
    train,
)
from .geometry import Box, centerness_batch, iou_xyxy
from .inference import (
    Detection,
    EvalResult,
    build_candidates,
    evaluate_ap,
    nms,
    quality_scores,
    score_candidates,
)
from .losses import sigmoid
from .synth import Grid, Scene, generate, make_grid

__all__ = [
    "TrainedStudy",
    "build_datasets",
    "run_training",
    "evaluate_model",
    "scatter_rows",
    "background_quality_max",
    "label_stats",
    "distribution_rows",
]


@dataclass(frozen=True, eq=False)
class TrainedStudy:
    config: ExperimentConfig
    grid: Grid
    train_scenes: list[Scene]
    eval_scenes: list[Scene]
    result: TrainResult


def build_datasets(config: ExperimentConfig) -> tuple[list[Scene], list[Scene], Grid]:
    train_spec = config.scene_spec("train")
    eval_spec = config.scene_spec("eval")
    return (
        generate(train_spec, config.data.train_scenes),
        generate(eval_spec, config.data.eval_scenes),
        make_grid(train_spec),
    )


def run_training(config: ExperimentConfig) -> TrainedStudy:
    train_scenes, eval_scenes, grid = build_datasets(config)
    result = train(train_scenes, config.train_config(), grid)
    return TrainedStudy(
        config=config,
        grid=grid,
        train_scenes=train_scenes,
        eval_scenes=eval_scenes,
        result=result,
    )


def evaluate_model(
    study: TrainedStudy,
) -> tuple[EvalResult, dict[int, list[Detection]], dict[int, list[tuple[Box, int]]]]:
    """NMS detections and AP of the trained model over the eval scenes."""
    params = study.result.params
    bounds = (study.config.scene.width, study.config.scene.height)
    detections: dict[int, list[Detection]] = {}
    gts: dict[int, list[tuple[Box, int]]] = {}
    for scene_id, scene in enumerate(study.eval_scenes):
        outputs = forward(params, scene.features)
        candidates = build_candidates(outputs, params, study.grid, bounds)
        detections[scene_id] = nms(candidates, study.config.nms)
        gts[scene_id] = list(scene.gt)
    return evaluate_ap(detections, gts), detections, gts


def scatter_rows(study: TrainedStudy) -> list[tuple[int, int, float, float]]:
    """(scene, point, class score, predicted quality) for every positive
    eval point. For the joint head both entries are the same scalar by
    construction; for branch heads they come from different logits."""
    params = study.result.params
    rows = []
    for scene_id, scene in enumerate(study.eval_scenes):
        assignment = assign(study.grid, scene.gt)
        idx = np.flatnonzero(assignment.labels > 0)
        if not idx.size:
            continue
        outputs = forward(params, scene.features)
        cls0 = assignment.labels[idx] - 1
        class_score = sigmoid(outputs.cls[idx, cls0])
        if params.variant.has_quality_branch:
            quality = sigmoid(outputs.quality[idx])
        else:
            quality = class_score
        for z, cs, qs in zip(idx, class_score, quality):
            rows.append((scene_id, int(z), float(cs), float(qs)))
    return rows


def background_quality_max(study: TrainedStudy) -> float:
    """Highest predicted quality over background eval points."""
    params = study.result.params
    best = 0.0
    for scene in study.eval_scenes:
        assignment = assign(study.grid, scene.gt)
        bg = assignment.labels == 0
        if not np.any(bg):
            continue
        outputs = forward(params, scene.features)
        q = quality_scores(outputs, params.variant)
        best = max(best, float(q[bg].max()))
    return best


def label_stats(study: TrainedStudy) -> dict[str, np.ndarray]:
    """Label families over the training positives: static centerness labels,
    dynamic IoU labels under the current model, and raw offset targets."""
    params = study.result.params
    centerness_all: list[np.ndarray] = []
    iou_all: list[np.ndarray] = []
    offsets_all: list[np.ndarray] = []
    for scene in study.train_scenes:
        assignment = assign(study.grid, scene.gt)
        idx = np.flatnonzero(assignment.labels > 0)
        if not idx.size:
            continue
        tgt = assignment.offsets[idx]
        centerness_all.append(centerness_batch(tgt))
        outputs = forward(params, scene.features)
        pred = decode_outputs(outputs.reg[idx], params.regressor)
        pred_xy = np.stack([-pred[:, 0], -pred[:, 1], pred[:, 2], pred[:, 3]], 1)
        tgt_xy = np.stack([-tgt[:, 0], -tgt[:, 1], tgt[:, 2], tgt[:, 3]], 1)
        iou_all.append(iou_xyxy(pred_xy, tgt_xy))
        offsets_all.append(tgt.reshape(-1))
    cat = lambda parts: np.concatenate(parts) if parts else np.zeros(0)
    return {
        "centerness": cat(centerness_all),
        "iou": cat(iou_all),
        "offset_targets": cat(offsets_all),
    }


def distribution_rows(study: TrainedStudy, top_k: int = 4) -> list[tuple]:
    """Per-side knot probabilities for the highest-scoring positive points.

    Empty for non-distributional regressors. Rows are
    (scene, point, side, knot_index, knot_value, prob).
    """
    params = study.result.params
    if params.regressor.name != "general":
        return []
    from .distrib import softmax_batch

    support = params.regressor.support
    knots = support.knots()
    sides = ("left", "top", "right", "bottom")
    scored: list[tuple[float, int, int]] = []
    per_scene_outputs = {}
    for scene_id, scene in enumerate(study.eval_scenes):
        assignment = assign(study.grid, scene.gt)
        idx = np.flatnonzero(assignment.labels > 0)
        if not idx.size:
            continue
        outputs = forward(params, scene.features)
        per_scene_outputs[scene_id] = outputs
        scores = score_candidates(outputs, params.variant).max(axis=1)
        for z in idx:
            scored.append((float(scores[z]), scene_id, int(z)))
    scored.sort(key=lambda r: (-r[0], r[1], r[2]))
    rows: list[tuple] = []
    for _, scene_id, z in scored[:top_k]:
        outputs = per_scene_outputs[scene_id]
        probs = softmax_batch(outputs.reg[z])
        for s, side in enumerate(sides):
            for k in range(support.size):
                rows.append((scene_id, z, side, k, float(knots[k]), float(probs[s, k])))
    return rows
