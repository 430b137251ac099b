"""Classification-quality losses and their distributional generalization.

Four losses share one algebraic family:

* ``focal_loss`` -- hard binary labels, down-weighting easy examples by
  ``(1 - p_t) ** gamma``.
* ``quality_focal_loss`` -- the same idea with a continuous label
  ``y in [0, 1]`` and modulating factor ``|y - sigma| ** beta``.
* ``distribution_focal_loss`` -- cross entropy against a target projected
  onto the two support knots that enclose it, sharpening a discrete
  distribution around a continuous regression target.
* ``generalized_focal_loss`` -- the two-variable ancestor defined on an
  interval ``[y_left, y_right]`` with complementary probabilities; each of
  the three above is an exact substitution instance, which
  :func:`check_specialization` verifies numerically.

Everything is evaluated in logit space through ``softplus``/``log-sum-exp``
so no probability is ever clamped. Gradients are hand-derived; the test
suite checks each against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distrib import Support, project_targets, softmax_batch

__all__ = [
    "LossEval",
    "FocusParams",
    "GflNode",
    "sigmoid",
    "softplus",
    "focal_loss",
    "focal_loss_batch",
    "quality_focal_loss",
    "quality_focal_loss_batch",
    "distribution_focal_loss",
    "distribution_focal_loss_batch",
    "generalized_focal_loss",
    "generalized_focal_loss_batch",
    "generalized_focal_minimizer",
    "gaussian_nll",
    "gaussian_nll_batch",
    "binary_cross_entropy_batch",
    "minimize_qfl",
    "check_specialization",
]


@dataclass(frozen=True)
class LossEval:
    """A loss value with its gradient.

    ``grad`` is a scalar for single-logit losses, a vector for losses over a
    logit vector, and a pair ``(d_mu, d_log_var)`` for the Gaussian NLL.
    ``saturated`` marks an infinite-barrier evaluation (a zero probability
    multiplying a log with non-zero coefficient); the value is ``+inf`` and
    the gradient is meaningless there.
    """

    value: float
    grad: float | np.ndarray
    saturated: bool = False


@dataclass(frozen=True)
class FocusParams:
    """Focusing exponents: ``gamma`` for hard labels, ``beta`` for soft ones."""

    gamma: float = 2.0
    beta: float = 2.0

    def __post_init__(self) -> None:
        if self.gamma < 0 or not np.isfinite(self.gamma):
            raise ValueError(f"gamma must be finite and >= 0, got {self.gamma}")
        if self.beta < 0 or not np.isfinite(self.beta):
            raise ValueError(f"beta must be finite and >= 0, got {self.beta}")


@dataclass(frozen=True)
class GflNode:
    """An interval ``[y_left, y_right]`` with complementary probabilities on
    its endpoints and a label ``y`` inside it."""

    y_left: float
    y_right: float
    p_left: float
    p_right: float
    y: float

    def __post_init__(self) -> None:
        if not all(np.isfinite(v) for v in (self.y_left, self.y_right, self.p_left, self.p_right, self.y)):
            raise ValueError("all node fields must be finite")
        if not self.y_left < self.y_right:
            raise ValueError(f"need y_left < y_right, got [{self.y_left}, {self.y_right}]")
        if self.p_left < 0 or self.p_right < 0:
            raise ValueError("endpoint probabilities must be non-negative")
        if abs(self.p_left + self.p_right - 1.0) > 1e-12:
            raise ValueError(f"endpoint probabilities must sum to 1, got {self.p_left + self.p_right}")
        if not (self.y_left <= self.y <= self.y_right):
            raise ValueError(f"label {self.y} outside [{self.y_left}, {self.y_right}]")


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    """log(1 + exp(x)) without overflow."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _require_finite(name: str, *values: float) -> None:
    for v in values:
        if not np.isfinite(v):
            raise ValueError(f"{name} must be finite, got {v}")


# ---------------------------------------------------------------------------
# Focal loss (hard binary labels)


def focal_loss_batch(
    logits: np.ndarray, labels: np.ndarray, gamma: float | np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise focal loss and d/d logit for hard labels in {0, 1}.

    With ``u = logit`` for label 0 and ``u = -logit`` for label 1, the value
    is ``sigmoid(u)**gamma * softplus(u)``: ``sigmoid(u)`` is the probability
    of the wrong class and ``softplus(u)`` the cross entropy.
    """
    x = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    sign = 1.0 - 2.0 * y  # +1 for label 0, -1 for label 1
    u = sign * x
    s = sigmoid(u)
    ce = softplus(u)
    mod = _pow(s, gamma)
    values = mod * ce
    grads = sign * mod * (gamma * (1.0 - s) * ce + s)
    return values, grads


def _pow(base: np.ndarray, exponent: float | np.ndarray) -> np.ndarray:
    """``base ** exponent`` with fast paths for the common small exponents."""
    if np.ndim(exponent) == 0:
        e = float(exponent)
        if e == 0.0:
            return np.ones_like(base)
        if e == 1.0:
            return base
        if e == 2.0:
            return base * base
    return base**exponent


def focal_loss(logit: float, label: int, gamma: float = 2.0) -> LossEval:
    """Focal loss for one logit and a hard binary label."""
    _require_finite("logit", logit)
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    FocusParams(gamma=gamma)
    values, grads = focal_loss_batch(np.asarray([logit]), np.asarray([label]), gamma)
    return LossEval(float(values[0]), float(grads[0]))


# ---------------------------------------------------------------------------
# Quality focal loss (soft label in [0, 1])


def quality_focal_loss_batch(
    logits: np.ndarray, targets: np.ndarray, beta: float | np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise soft-label focal loss and d/d logit.

    value = |sigma - y| ** beta * BCE(sigma, y), with the BCE evaluated via
    softplus. At ``sigma == y`` the modulating-factor derivative is taken as
    zero (the loss and its one-sided derivatives vanish there for beta > 1;
    for smaller beta this is the deterministic subgradient choice).
    """
    x = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    s = sigmoid(x)
    ce = (1.0 - y) * softplus(x) + y * softplus(-x)
    diff = s - y
    adiff = np.abs(diff)
    mod = _pow(adiff, beta)
    values = mod * ce
    grads = mod * diff
    if np.ndim(beta) == 0 and float(beta) == 2.0:
        # beta * |d|**(beta-1) * sign(d) == 2 d, smooth through d = 0.
        return values, grads + 2.0 * diff * (s * (1.0 - s)) * ce
    if np.ndim(beta) == 0 and float(beta) == 0.0:
        return values, grads
    beta = np.asarray(beta, dtype=np.float64)
    nz = adiff > 0
    if np.any(nz):
        b = np.broadcast_to(beta, adiff.shape)[nz]
        grads = np.array(grads)
        grads[nz] += (
            b * adiff[nz] ** (b - 1.0) * np.sign(diff[nz]) * (s[nz] * (1.0 - s[nz])) * ce[nz]
        )
    return values, grads


def quality_focal_loss(logit: float, target: float, beta: float = 2.0) -> LossEval:
    """Soft-label focal loss for one logit and a quality target in [0, 1]."""
    _require_finite("logit", logit)
    if not (0.0 <= target <= 1.0) or not np.isfinite(target):
        raise ValueError(f"target must lie in [0, 1], got {target}")
    FocusParams(beta=beta)
    values, grads = quality_focal_loss_batch(np.asarray([logit]), np.asarray([target]), beta)
    return LossEval(float(values[0]), float(grads[0]))


def binary_cross_entropy_batch(
    logits: np.ndarray, targets: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Plain BCE with soft targets: the beta = 0 slice of the quality loss."""
    return quality_focal_loss_batch(logits, targets, 0.0)


# ---------------------------------------------------------------------------
# Distribution focal loss (projection onto two knots)


def distribution_focal_loss_batch(
    logits: np.ndarray, targets: np.ndarray, support: Support
) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise two-knot projection loss and d/d logits.

    Each target is clamped into the support and projected onto its enclosing
    knots with barycentric weights; the loss is the cross entropy of the
    row softmax against that two-point target, so the gradient is
    ``softmax - projected_target`` and sums to zero across each row.
    """
    x = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    idx, w_left, w_right = project_targets(t, support)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=-1)
    rows = np.arange(x.shape[0])
    # log-softmax evaluated only at the two target knots keeps full precision
    # even where the softmax itself underflows.
    log_z = np.log(z)
    values = -(
        w_left * (shifted[rows, idx] - log_z) + w_right * (shifted[rows, idx + 1] - log_z)
    )
    grads = e / z[:, None]
    grads[rows, idx] -= w_left
    grads[rows, idx + 1] -= w_right
    return values, grads


def distribution_focal_loss(dist_logits: np.ndarray, y: float, support: Support) -> LossEval:
    """Two-knot projection loss for one logit vector and scalar target."""
    x = np.asarray(dist_logits, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-d logit vector, got shape {x.shape}")
    if x.size != support.size:
        raise ValueError(f"got {x.size} logits for a support with {support.size} knots")
    if not np.all(np.isfinite(x)):
        raise ValueError("logits must be finite")
    _require_finite("target", y)
    values, grads = distribution_focal_loss_batch(x[None, :], np.asarray([y]), support)
    return LossEval(float(values[0]), grads[0])


# ---------------------------------------------------------------------------
# Generalized focal loss on an interval node


def generalized_focal_loss_batch(
    y_left: np.ndarray,
    y_right: np.ndarray,
    p_left: np.ndarray,
    p_right: np.ndarray,
    y: np.ndarray,
    beta: float | np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Elementwise interval loss, d/d p_left along the constraint, and a
    saturation mask.

    value = |y - (y_left p_left + y_right p_right)| ** beta
            * -((y_right - y) log p_left + (y - y_left) log p_right)

    A zero probability under a log with non-zero coefficient is an infinite
    barrier: the value is +inf and the row is flagged saturated. A zero
    probability whose coefficient is zero contributes nothing (0 * log 0 = 0).
    """
    yl = np.asarray(y_left, dtype=np.float64)
    yr = np.asarray(y_right, dtype=np.float64)
    pl = np.asarray(p_left, dtype=np.float64)
    pr = np.asarray(p_right, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)

    a = yr - y  # coefficient of log p_left
    b = y - yl  # coefficient of log p_right
    sat = ((pl <= 0) & (a != 0)) | ((pr <= 0) & (b != 0))

    safe_pl = np.where(pl > 0, pl, 1.0)
    safe_pr = np.where(pr > 0, pr, 1.0)
    ce = -(np.where(a != 0, a * np.log(safe_pl), 0.0) + np.where(b != 0, b * np.log(safe_pr), 0.0))

    diff = y - (yl * pl + yr * pr)
    adiff = np.abs(diff)
    mod = adiff**beta
    values = np.where(sat, np.inf, mod * ce)

    # d value / d p_left with p_right = 1 - p_left:
    #   d|D|^beta = beta |D|^(beta-1) sign(D) (y_right - y_left)
    #   d ce      = -a / p_left + b / p_right
    dce = -a / safe_pl + b / safe_pr
    grads = mod * dce
    nz = (adiff > 0) & ~sat
    if np.any(nz):
        bexp = np.broadcast_to(beta, adiff.shape)[nz]
        grads = np.array(grads)
        grads[nz] += (
            bexp * adiff[nz] ** (bexp - 1.0) * np.sign(diff[nz]) * (yr - yl)[nz] * ce[nz]
        )
    grads = np.where(sat, np.nan, grads)
    return values, grads, sat


def generalized_focal_loss(node: GflNode, beta: float = 2.0) -> LossEval:
    """Interval loss for one node; gradient is d/d p_left along the
    complementary-probability constraint."""
    FocusParams(beta=beta)
    values, grads, sat = generalized_focal_loss_batch(
        np.asarray([node.y_left]),
        np.asarray([node.y_right]),
        np.asarray([node.p_left]),
        np.asarray([node.p_right]),
        np.asarray([node.y]),
        beta,
    )
    return LossEval(float(values[0]), float(grads[0]), bool(sat[0]))


def generalized_focal_minimizer(y_left: float, y_right: float, y: float) -> tuple[float, float]:
    """Closed-form global minimizer of the interval loss.

    Returns the endpoint probabilities whose expectation reproduces the label:
    ``((y_right - y) / (y_right - y_left), (y - y_left) / (y_right - y_left))``.
    """
    _require_finite("y_left", y_left)
    _require_finite("y_right", y_right)
    _require_finite("y", y)
    if not y_left < y_right:
        raise ValueError(f"need y_left < y_right, got [{y_left}, {y_right}]")
    if not (y_left <= y <= y_right):
        raise ValueError(f"label {y} outside [{y_left}, {y_right}]")
    width = y_right - y_left
    return (y_right - y) / width, (y - y_left) / width


# ---------------------------------------------------------------------------
# Gaussian negative log-likelihood (constant terms dropped)


def gaussian_nll_batch(
    mu: np.ndarray, log_var: np.ndarray, targets: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Elementwise NLL ``(mu - y)^2 / (2 e^lv) + lv / 2`` and its gradients."""
    mu = np.asarray(mu, dtype=np.float64)
    lv = np.asarray(log_var, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    inv_var = np.exp(-lv)
    resid = mu - y
    values = 0.5 * resid * resid * inv_var + 0.5 * lv
    grad_mu = resid * inv_var
    grad_lv = -0.5 * resid * resid * inv_var + 0.5
    return values, grad_mu, grad_lv


def gaussian_nll(mu: float, log_var: float, y: float) -> LossEval:
    """Gaussian NLL for one (mean, log-variance) pair; grad is (d_mu, d_lv)."""
    _require_finite("mu", mu)
    _require_finite("log_var", log_var)
    _require_finite("y", y)
    values, gm, gv = gaussian_nll_batch(
        np.asarray([mu]), np.asarray([log_var]), np.asarray([y])
    )
    return LossEval(float(values[0]), np.asarray([gm[0], gv[0]]))


# ---------------------------------------------------------------------------
# Optimization and identity checks


def minimize_qfl(
    targets: np.ndarray,
    beta: float = 2.0,
    *,
    lr: float = 4.0,
    momentum: float = 0.9,
    max_iters: int = 20_000,
    tol: float = 1e-4,
) -> dict:
    """Descend the soft-label loss in logit space for a batch of targets.

    Returns ``logits``, ``probs``, ``converged`` (all rows within ``tol`` of
    their targets in probability space).
    """
    t = np.atleast_1d(np.asarray(targets, dtype=np.float64))
    logits = np.zeros_like(t)
    vel = np.zeros_like(t)
    for _ in range(max_iters):
        _, grads = quality_focal_loss_batch(logits, t, beta)
        vel = momentum * vel + grads
        logits = logits - lr * vel
        if np.max(np.abs(sigmoid(logits) - t)) < tol:
            break
    probs = sigmoid(logits)
    return {"logits": logits, "probs": probs, "converged": bool(np.max(np.abs(probs - t)) < tol)}


def check_specialization(sample_count: int = 10_000, seed: int = 7) -> float:
    """Numerically verify the three substitution identities.

    Draws random valid inputs and evaluates both sides through the public
    loss implementations:

    * hard-label focal loss vs the interval loss on [0, 1] with the
      focusing exponent carried over,
    * soft-label focal loss vs the interval loss on [0, 1],
    * two-knot projection loss (unit spacing) vs the interval loss with
      beta = 0 on the knot interval.

    Returns the maximum absolute discrepancy over all samples. Logits are
    drawn from [-8, 8]: the interval loss receives rounded probabilities as
    inputs, so beyond that range the comparison would measure float
    subtraction error in ``1 - sigmoid`` rather than the identity itself.
    """
    if sample_count < 1:
        raise ValueError(f"need at least one sample, got {sample_count}")
    rng = np.random.default_rng(seed)
    worst = 0.0
    zeros = np.zeros
    betas = np.asarray([0.0, 0.5, 1.0, 2.0, 4.0])

    # Hard labels: modulating exponent gamma, label in {0, 1}.
    x = rng.uniform(-8.0, 8.0, size=sample_count)
    y01 = rng.integers(0, 2, size=sample_count).astype(np.float64)
    gamma = rng.choice(betas, size=sample_count)
    fl_vals, _ = focal_loss_batch(x, y01, gamma)
    p = sigmoid(x)
    g_vals, _, _ = generalized_focal_loss_batch(
        zeros(sample_count), np.ones(sample_count), 1.0 - p, p, y01, gamma
    )
    worst = max(worst, float(np.max(np.abs(fl_vals - g_vals))))

    # Soft labels in [0, 1].
    x = rng.uniform(-8.0, 8.0, size=sample_count)
    yq = rng.uniform(0.0, 1.0, size=sample_count)
    beta = rng.choice(betas, size=sample_count)
    q_vals, _ = quality_focal_loss_batch(x, yq, beta)
    p = sigmoid(x)
    g_vals, _, _ = generalized_focal_loss_batch(
        zeros(sample_count), np.ones(sample_count), 1.0 - p, p, yq, beta
    )
    worst = max(worst, float(np.max(np.abs(q_vals - g_vals))))

    # Two-knot projection with unit spacing, several support origins.
    groups = 10
    per = max(sample_count // groups, 1)
    for _ in range(groups):
        origin = float(rng.uniform(-5.0, 5.0))
        sup = Support(y0=origin, n=1, delta=1.0)
        logits = rng.uniform(-6.0, 6.0, size=(per, 2))
        yv = rng.uniform(origin, origin + 1.0, size=per)
        d_vals, _ = distribution_focal_loss_batch(logits, yv, sup)
        probs = softmax_batch(logits)
        g_vals, _, _ = generalized_focal_loss_batch(
            np.full(per, origin),
            np.full(per, origin + 1.0),
            probs[:, 0],
            probs[:, 1],
            yv,
            0.0,
        )
        worst = max(worst, float(np.max(np.abs(d_vals - g_vals))))
    return worst
