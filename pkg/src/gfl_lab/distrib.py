"""Discrete distributions over an evenly spaced regression support.

A continuous regression value is represented by a categorical distribution
over knots ``y0 + i * delta`` for ``i = 0..n``; the decoded value is the
expectation under that distribution. Dirac (one raw value per side) and
Gaussian (mean plus log-variance) parameterizations are kept alongside as
baselines, and :func:`disturbance_experiment` contrasts their robustness to
input perturbations after fitting fixed targets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "CLAMP_MARGIN",
    "Support",
    "DiscreteDistribution",
    "ProjectedTarget",
    "RegressorKind",
    "DisturbanceRow",
    "softmax",
    "log_softmax",
    "expectation",
    "expectation_batch",
    "expectation_jacobian",
    "project_target",
    "project_targets",
    "minimize_dfl",
    "disturbance_experiment",
]

# Targets at or above the top knot are pulled just inside the support so the
# projection always has a right-hand knot to lean on.
CLAMP_MARGIN = 1e-6


@dataclass(frozen=True)
class Support:
    """Evenly spaced knots ``y0 + i * delta`` for ``i = 0..n`` (n+1 knots)."""

    y0: float = 0.0
    n: int = 16
    delta: float = 1.0

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError(f"support needs at least two knots, got n={self.n}")
        if not (self.delta > 0) or not np.isfinite(self.delta):
            raise ValueError(f"knot spacing must be finite and positive, got {self.delta}")
        if not np.isfinite(self.y0):
            raise ValueError(f"support origin must be finite, got {self.y0}")

    @property
    def y_max(self) -> float:
        return self.y0 + self.n * self.delta

    @property
    def size(self) -> int:
        """Number of knots (and of logits parameterizing a distribution)."""
        return self.n + 1

    def knots(self) -> np.ndarray:
        return self.y0 + self.delta * np.arange(self.n + 1, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class DiscreteDistribution:
    """Probability vector over the knots of a :class:`Support`."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", p)
        if p.ndim != 1 or p.size < 2:
            raise ValueError(f"expected a 1-d probability vector with >= 2 entries, got shape {p.shape}")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("probabilities must be finite and non-negative")
        if abs(float(p.sum()) - 1.0) > 1e-9:
            raise ValueError(f"probabilities must sum to 1, got {p.sum()!r}")


@dataclass(frozen=True)
class ProjectedTarget:
    """A target split onto its two enclosing knots with interpolation weights."""

    left_index: int
    w_left: float
    w_right: float


def softmax(logits: np.ndarray) -> DiscreteDistribution:
    """Softmax over a 1-d logit vector, shift-stabilized."""
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-d logit vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("logits must be finite")
    return DiscreteDistribution(softmax_batch(x[None, :])[0])


def softmax_batch(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis (no validation; hot path)."""
    x = np.asarray(logits, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax over the last axis."""
    x = np.asarray(logits, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return shifted - lse


def expectation(dist: DiscreteDistribution, support: Support) -> float:
    """Decoded value: the mean of the distribution over the support knots."""
    p = dist.probs
    if p.size != support.size:
        raise ValueError(f"distribution has {p.size} entries but support has {support.size} knots")
    return float(p @ support.knots())


def expectation_batch(probs: np.ndarray, support: Support) -> np.ndarray:
    """Expectation along the last axis for stacked probability rows."""
    return np.asarray(probs, dtype=np.float64) @ support.knots()


def expectation_jacobian(probs: np.ndarray, support: Support) -> np.ndarray:
    """d expectation / d logit_k = p_k * (y_k - expectation), per row."""
    p = np.asarray(probs, dtype=np.float64)
    mean = expectation_batch(p, support)
    return p * (support.knots() - mean[..., None])


def project_target(y: float, support: Support) -> ProjectedTarget:
    """Project a scalar target onto its two enclosing knots.

    The target is first clamped to ``[y0, y_max - CLAMP_MARGIN]``; the weights
    are the barycentric coordinates within the enclosing knot interval, so
    ``w_left * y_i + w_right * y_{i+1}`` reconstructs the clamped target.
    """
    if not np.isfinite(y):
        raise ValueError(f"target must be finite, got {y}")
    idx, w_left, w_right = project_targets(np.asarray([y], dtype=np.float64), support)
    return ProjectedTarget(int(idx[0]), float(w_left[0]), float(w_right[0]))

def project_targets(y: np.ndarray, support: Support) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized :func:`project_target`: returns (left_index, w_left, w_right)."""
    y = np.asarray(y, dtype=np.float64)
    clamped = np.clip(y, support.y0, support.y_max - CLAMP_MARGIN)
    t = (clamped - support.y0) / support.delta
    idx = np.minimum(np.floor(t).astype(np.int64), support.n - 1)
    w_right = t - idx
    w_left = 1.0 - w_right
    return idx, w_left, w_right


@dataclass(frozen=True)
class RegressorKind:
    """How one box side is parameterized: `dirac`, `gaussian`, or `general`.

    `general` carries the discrete support; the per-side parameter count is 1
    (dirac: the value itself), 2 (gaussian: mean, log-variance) or n+1
    (general: one logit per knot).
    """

    name: str
    support: Support | None = None

    _ARITIES = {"dirac": 1, "gaussian": 2}

    def __post_init__(self) -> None:
        if self.name not in ("dirac", "gaussian", "general"):
            raise ValueError(f"unknown regressor kind {self.name!r}")
        if self.name == "general" and self.support is None:
            raise ValueError("general regressor needs a support")
        if self.name != "general" and self.support is not None:
            raise ValueError(f"{self.name} regressor takes no support")

    @classmethod
    def dirac(cls) -> "RegressorKind":
        return cls("dirac")

    @classmethod
    def gaussian(cls) -> "RegressorKind":
        return cls("gaussian")

    @classmethod
    def general(cls, support: Support | None = None) -> "RegressorKind":
        return cls("general", support if support is not None else Support())

    @property
    def arity(self) -> int:
        """Parameters per box side."""
        if self.name == "general":
            return self.support.size
        return self._ARITIES[self.name]


def minimize_dfl(
    targets: np.ndarray,
    support: Support,
    *,
    lr: float = 1.0,
    momentum: float = 0.9,
    max_iters: int = 300_000,
    tol: float = 1e-4,
    mass_tol: float | None = 1e-3,
    check_every: int = 250,
    init_logits: np.ndarray | None = None,
) -> dict:
    """Fit per-target distributions by descending the two-knot projection loss.

    Starts from uniform logits (or ``init_logits``) and runs heavy-ball
    gradient descent until every row satisfies |expectation - target| < tol
    and, when ``mass_tol`` is given, the mass off the two enclosing knots is
    below ``mass_tol``. The off-knot mass decays like 1/iterations for plain
    descent, so momentum is load-bearing here, not a tuning nicety.

    Returns a dict with ``logits``, ``probs``, ``decoded``, ``iterations``,
    ``converged``.
    """
    from .losses import distribution_focal_loss_batch

    t = np.atleast_1d(np.asarray(targets, dtype=np.float64))
    m = t.shape[0]
    k = support.size
    logits = np.zeros((m, k)) if init_logits is None else np.array(init_logits, dtype=np.float64)
    vel = np.zeros_like(logits)
    idx, w_left, w_right = project_targets(t, support)
    rows = np.arange(m)

    def _stats(lg: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        probs = softmax_batch(lg)
        decoded = expectation_batch(probs, support)
        mass = probs[rows, idx] + probs[rows, idx + 1]
        return probs, decoded, mass

    done_iters = 0
    for start in range(0, max_iters, check_every):
        steps = min(check_every, max_iters - start)
        for _ in range(steps):
            _, grads = distribution_focal_loss_batch(logits, t, support)
            vel = momentum * vel + grads
            logits = logits - lr * vel
        done_iters = start + steps
        probs, decoded, mass = _stats(logits)
        ok = np.abs(decoded - np.clip(t, support.y0, support.y_max - CLAMP_MARGIN)) < tol
        if mass_tol is not None:
            ok &= (1.0 - mass) < mass_tol
        if bool(np.all(ok)):
            return {
                "logits": logits,
                "probs": probs,
                "decoded": decoded,
                "iterations": done_iters,
                "converged": True,
            }
    probs, decoded, _ = _stats(logits)
    return {
        "logits": logits,
        "probs": probs,
        "decoded": decoded,
        "iterations": done_iters,
        "converged": False,
    }


@dataclass(frozen=True)
class DisturbanceRow:
    """One cell of the perturbation-robustness table."""

    representation: str
    target: float
    median_error: float
    trials: int
    seed: int
    converged: bool


def disturbance_experiment(
    targets: tuple[float, ...] = (1.5, 2.5, 3.5),
    perturb_norm: float = 0.1,
    trials: int = 100,
    seed: int = 0,
    *,
    feature_dim: int = 16,
    support: Support | None = None,
    lr: float = 1.0,
    momentum: float = 0.9,
    max_iters: int = 20_000,
    tol: float = 1e-3,
) -> list[DisturbanceRow]:
    """Compare output stability of Dirac vs general-distribution heads.

    A single unit-norm feature vector is drawn from the run seed. For each
    target value, a Dirac linear head (w . x) and a general-distribution
    linear head (softmax expectation of W x over the support) are trained from
    zero init until the decoded value is within ``tol`` of the target, then
    probed with ``trials`` random perturbations of norm ``perturb_norm``; the
    cell reports the median absolute output change. Cells that fail to reach
    ``tol`` within ``max_iters`` are reported with ``converged=False`` and a
    NaN error instead of raising.
    """
    if perturb_norm < 0:
        raise ValueError(f"perturbation norm must be >= 0, got {perturb_norm}")
    if trials < 1:
        raise ValueError(f"need at least one trial, got {trials}")
    sup = support if support is not None else Support()
    for t in targets:
        if not (sup.y0 <= t <= sup.y_max):
            raise ValueError(f"target {t} outside support [{sup.y0}, {sup.y_max}]")

    root = np.random.SeedSequence(seed)
    children = root.spawn(1 + 2 * len(targets))
    feat_rng = np.random.default_rng(children[0])
    x = feat_rng.normal(size=feature_dim)
    x = x / np.linalg.norm(x)

    knots = sup.knots()
    rows: list[DisturbanceRow] = []
    child_iter = iter(children[1:])
    for rep in ("dirac", "general"):
        for t in targets:
            rng = np.random.default_rng(next(child_iter))
            deltas = rng.normal(size=(trials, feature_dim))
            norms = np.linalg.norm(deltas, axis=1, keepdims=True)
            deltas = np.where(norms > 0, deltas / norms, 0.0) * perturb_norm

            if rep == "dirac":
                w = np.zeros(feature_dim)
                vel = np.zeros_like(w)
                converged = False
                for _ in range(max_iters):
                    pred = float(w @ x)
                    if abs(pred - t) < tol:
                        converged = True
                        break
                    vel = momentum * vel + (pred - t) * x
                    w = w - lr * vel
                base = float(w @ x)
                outputs = (x + deltas) @ w
            else:
                from .losses import distribution_focal_loss_batch

                weights = np.zeros((sup.size, feature_dim))
                vel = np.zeros_like(weights)
                converged = False
                tarr = np.asarray([t])
                for _ in range(max_iters):
                    logits = weights @ x
                    decoded = float(softmax_batch(logits[None, :])[0] @ knots)
                    if abs(decoded - t) < tol:
                        converged = True
                        break
                    _, grads = distribution_focal_loss_batch(logits[None, :], tarr, sup)
                    vel = momentum * vel + np.outer(grads[0], x)
                    weights = weights - lr * vel
                base_logits = weights @ x
                base = float(softmax_batch(base_logits[None, :])[0] @ knots)
                pert_logits = (x + deltas) @ weights.T
                outputs = softmax_batch(pert_logits) @ knots

            if converged:
                median_error = float(np.median(np.abs(outputs - base)))
            else:
                median_error = float("nan")
            rows.append(
                DisturbanceRow(
                    representation=rep,
                    target=float(t),
                    median_error=median_error,
                    trials=trials,
                    seed=seed,
                    converged=converged,
                )
            )
    return rows
