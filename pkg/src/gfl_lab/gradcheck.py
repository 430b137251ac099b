"""Central finite-difference verification of every analytic gradient.

Convention: the reported error for a coordinate is

    |analytic - numeric| / max(|analytic|, |numeric|, 1e-3)

i.e. a true relative error for gradients above 1e-3 in magnitude and an
absolute error (scaled by 1e3) below that, where finite differences are
dominated by round-off rather than by the derivative itself.

``run_all_checks`` powers both the test suite and the ``gradcheck`` CLI
subcommand; ``inject_error=True`` deliberately biases one analytic gradient
so the harness can prove it would catch a wrong one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import detector as det
from .distrib import DiscreteDistribution, Support, expectation, expectation_jacobian, softmax
from .geometry import SideOffsets, giou_loss
from .losses import (
    focal_loss,
    gaussian_nll,
    generalized_focal_loss,
    GflNode,
    quality_focal_loss,
)
from .synth import SceneSpec, generate, make_grid

__all__ = [
    "STEP",
    "GradReport",
    "central_difference",
    "relative_error",
    "check_focal",
    "check_qfl",
    "check_dfl",
    "check_gfl",
    "check_gaussian_nll",
    "check_giou",
    "check_expectation",
    "check_total_loss",
    "run_all_checks",
]

STEP = 1e-6
_ERROR_FLOOR = 1e-3


def central_difference(f: Callable[[float], float], x: float, h: float = STEP) -> float:
    return (f(x + h) - f(x - h)) / (2.0 * h)


def relative_error(analytic: float, numeric: float) -> float:
    denom = max(abs(analytic), abs(numeric), _ERROR_FLOOR)
    return abs(analytic - numeric) / denom


@dataclass(frozen=True)
class GradReport:
    name: str
    checks: int
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _report(name: str, errs: list[float], tol: float) -> GradReport:
    return GradReport(name=name, checks=len(errs), max_rel_err=max(errs), tol=tol)


# ---------------------------------------------------------------------------
# Scalar loss suites


def check_focal(samples: int = 1000, seed: int = 0, tol: float = 1e-5, bias: float = 0.0) -> GradReport:
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(samples):
        x = float(rng.uniform(-6, 6))
        y = int(rng.integers(0, 2))
        gamma = float(rng.choice([0.0, 0.5, 1.0, 2.0, 4.0]))
        analytic = focal_loss(x, y, gamma).grad + bias
        numeric = central_difference(lambda v: focal_loss(v, y, gamma).value, x)
        errs.append(relative_error(analytic, numeric))
    return _report("focal_loss", errs, tol)


def check_qfl(samples: int = 1000, seed: int = 1, tol: float = 1e-5) -> GradReport:
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(samples):
        x = float(rng.uniform(-6, 6))
        y = float(rng.uniform(0, 1))
        beta = float(rng.choice([0.0, 1.0, 2.0, 4.0]))
        analytic = quality_focal_loss(x, y, beta).grad
        numeric = central_difference(lambda v: quality_focal_loss(v, y, beta).value, x)
        errs.append(relative_error(analytic, numeric))
    return _report("quality_focal_loss", errs, tol)


def check_dfl(samples: int = 150, seed: int = 2, tol: float = 1e-5, support: Support | None = None) -> GradReport:
    from .losses import distribution_focal_loss

    sup = support if support is not None else Support()
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(samples):
        logits = rng.uniform(-4, 4, size=sup.size)
        y = float(rng.uniform(sup.y0, sup.y_max))
        analytic = distribution_focal_loss(logits, y, sup).grad
        for k in range(sup.size):
            def f(v: float, k: int = k) -> float:
                probe = logits.copy()
                probe[k] = v
                return distribution_focal_loss(probe, y, sup).value

            errs.append(relative_error(float(analytic[k]), central_difference(f, float(logits[k]))))
    return _report("distribution_focal_loss", errs, tol)


def check_gfl(samples: int = 1000, seed: int = 3, tol: float = 1e-5) -> GradReport:
    errs = []
    rng = np.random.default_rng(seed)
    for _ in range(samples):
        y_left = float(rng.uniform(-3, 3))
        y_right = y_left + float(rng.uniform(0.5, 4.0))
        p_left = float(rng.uniform(0.05, 0.95))
        y = float(rng.uniform(y_left, y_right))
        beta = float(rng.choice([0.0, 1.0, 2.0]))

        def f(v: float) -> float:
            return generalized_focal_loss(GflNode(y_left, y_right, v, 1.0 - v, y), beta).value

        analytic = generalized_focal_loss(GflNode(y_left, y_right, p_left, 1.0 - p_left, y), beta).grad
        errs.append(relative_error(analytic, central_difference(f, p_left)))
    return _report("generalized_focal_loss", errs, tol)


def check_gaussian_nll(samples: int = 1000, seed: int = 4, tol: float = 1e-5) -> GradReport:
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(samples):
        mu = float(rng.uniform(-4, 4))
        lv = float(rng.uniform(-2, 2))
        y = float(rng.uniform(-4, 4))
        grad = gaussian_nll(mu, lv, y).grad
        errs.append(
            relative_error(float(grad[0]), central_difference(lambda v: gaussian_nll(v, lv, y).value, mu))
        )
        errs.append(
            relative_error(float(grad[1]), central_difference(lambda v: gaussian_nll(mu, v, y).value, lv))
        )
    return _report("gaussian_nll", errs, tol)


def check_giou(samples: int = 400, seed: int = 5, tol: float = 1e-5) -> GradReport:
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(samples):
        pred = rng.uniform(0.2, 6.0, size=4)
        target = rng.uniform(0.2, 6.0, size=4)
        analytic = giou_loss(SideOffsets(*pred), SideOffsets(*target)).grad
        for k in range(4):
            def f(v: float, k: int = k) -> float:
                probe = pred.copy()
                probe[k] = v
                return giou_loss(SideOffsets(*probe), SideOffsets(*target)).value

            errs.append(relative_error(float(analytic[k]), central_difference(f, float(pred[k]))))
    return _report("giou_loss", errs, tol)


def check_expectation(samples: int = 200, seed: int = 6, tol: float = 1e-5, support: Support | None = None) -> GradReport:
    sup = support if support is not None else Support(n=8)
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(samples):
        logits = rng.uniform(-3, 3, size=sup.size)
        jac = expectation_jacobian(softmax(logits).probs[None, :], sup)[0]
        for k in range(sup.size):
            def f(v: float, k: int = k) -> float:
                probe = logits.copy()
                probe[k] = v
                return expectation(softmax(probe), sup)

            errs.append(relative_error(float(jac[k]), central_difference(f, float(logits[k]))))
    return _report("expectation_of_softmax", errs, tol)


# ---------------------------------------------------------------------------
# Whole-model suite


def check_total_loss(
    variant: det.HeadVariant,
    regressor_name: str,
    mode: str = "tabular",
    coords: int | None = None,
    seed: int = 11,
    tol: float = 1e-4,
) -> GradReport:
    """Finite-difference the full per-scene loss on a small 4x4-grid scene.

    ``coords=None`` probes every parameter coordinate (tabular-sized heads);
    otherwise that many randomly chosen coordinates. Detached quantities are
    frozen at the base point so numeric and analytic gradients describe the
    same computation graph.
    """
    rng = np.random.default_rng(seed)
    spec = SceneSpec(
        width=32.0,
        height=32.0,
        stride=8.0,
        num_classes=2,
        boxes_per_scene=(1, 2),
        box_size_range=(10.0, 24.0),
        ambiguity_sigma=0.5,
        seed=seed,
    )
    scene = generate(spec, 1)[0]
    grid = make_grid(spec)
    assignment = det.assign(grid, scene.gt)

    if regressor_name == "general":
        kind = det.RegressorKind.general(Support(n=6, delta=1.0))
    elif regressor_name == "gaussian":
        kind = det.RegressorKind.gaussian()
    else:
        kind = det.RegressorKind.dirac()
    cfg = det.TrainConfig(variant=variant, regressor=kind, mode=mode, hidden=8, seed=seed)

    if mode == "tabular":
        params = det.HeadParams.init_tabular(grid.px.size, spec.num_classes, variant, kind)
    else:
        params = det.HeadParams.init_mlp(
            scene.features.shape[1], spec.num_classes, variant, kind, cfg.hidden, rng
        )
    # Perturb away from the symmetric init so the check point is generic.
    base = params.flatten() + rng.normal(0.0, 0.5, size=params.flatten().size)
    params = params.with_vector(base)

    _, grads, frozen = det.total_loss(params, scene, assignment, cfg)
    flat_grad = np.concatenate([grads[k].ravel() for k in params.arrays])

    def f(vec: np.ndarray) -> float:
        bd, _, _ = det.total_loss(params.with_vector(vec), scene, assignment, cfg, detached=frozen)
        return bd.total

    total = base.size
    picks = range(total) if coords is None else rng.choice(total, size=min(coords, total), replace=False)
    errs = []
    for k in picks:
        probe = base.copy()
        probe[k] = base[k] + STEP
        up = f(probe)
        probe[k] = base[k] - STEP
        down = f(probe)
        errs.append(relative_error(float(flat_grad[k]), (up - down) / (2.0 * STEP)))
    return _report(f"total_loss[{variant.value},{regressor_name},{mode}]", errs, tol)


def run_all_checks(seed: int = 0, inject_error: bool = False, quick: bool = False) -> list[GradReport]:
    """Every finite-difference suite; the negative control biases the focal
    gradient by 1e-3 so at least one report must fail."""
    n = 200 if quick else 1000
    reports = [
        check_focal(samples=n, seed=seed, bias=1e-3 if inject_error else 0.0),
        check_qfl(samples=n, seed=seed + 1),
        check_dfl(samples=30 if quick else 150, seed=seed + 2),
        check_gfl(samples=n, seed=seed + 3),
        check_gaussian_nll(samples=n, seed=seed + 4),
        check_giou(samples=100 if quick else 400, seed=seed + 5),
        check_expectation(samples=40 if quick else 200, seed=seed + 6),
    ]
    combos = [
        (det.HeadVariant.JOINT, "general", "tabular", None),
        (det.HeadVariant.JOINT, "dirac", "mlp", 120),
        (det.HeadVariant.IOU_BRANCH, "gaussian", "tabular", None),
        (det.HeadVariant.IOU_BRANCH, "general", "mlp", 120),
        (det.HeadVariant.CENTERNESS_BRANCH, "dirac", "tabular", None),
        (det.HeadVariant.CENTERNESS_BRANCH, "gaussian", "mlp", 120),
        (det.HeadVariant.NO_QUALITY, "gaussian", "tabular", None),
        (det.HeadVariant.NO_QUALITY, "general", "tabular", None),
        (det.HeadVariant.NO_QUALITY, "dirac", "tabular", None),
        (det.HeadVariant.JOINT, "gaussian", "mlp", 120),
        (det.HeadVariant.IOU_BRANCH, "dirac", "tabular", None),
        (det.HeadVariant.CENTERNESS_BRANCH, "general", "tabular", None),
    ]
    for variant, reg, mode, coords in combos:
        if quick and mode == "tabular" and coords is None:
            coords = 60
        reports.append(check_total_loss(variant, reg, mode, coords=coords, seed=seed + 11))
    return reports
