"""Training objectives: threshold-weighted regression losses, the
sub-threshold balanced term, discriminator/adversarial cross-entropies and
the composite objective.

All regression losses run in physical units (mm/hr): the bracket weights
(2, 5, 10, 30 mm/hr) are physical quantities, so predictions are
denormalized before scoring.  Each loss ships its gradient with respect to
the prediction; weights depend on the target only, so no gradient flows
through them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConflictingSpec, DomainError, ShapeMismatch

LOG_EPS = 1e-7   # clamp inside logs; sigmoid saturation would otherwise give -inf

WEIGHT_EDGES = (2.0, 5.0, 10.0, 30.0)
WEIGHT_VALUES = (1.0, 2.0, 5.0, 10.0, 30.0)


@dataclass(frozen=True)
class LossSpec:
    """Which objectives are active, with their mixing weights."""

    base: str = "WMAE"            # WMAE | WMSE
    threshold: float = 0.5        # mm/hr
    use_bal: bool = False
    w_bal: float = 0.01
    use_adv: bool = False
    w_adv: float = 0.05

    def __post_init__(self):
        if self.base not in ("WMAE", "WMSE"):
            raise ValueError(f"base loss must be WMAE or WMSE, got {self.base!r}")
        if not (0 <= self.w_adv < 1 and 0 <= self.w_bal < 1):
            raise ValueError("mixing weights must lie in [0, 1)")
        if self.use_adv and self.use_bal:
            raise ConflictingSpec("adversarial and balanced terms are never combined")


def weight(x, th: float = 0.5):
    """Bracket weight of a target rain rate: 0 below th, then 1/2/5/10/30.

    Vectorized; ``x`` may be a scalar or an array.
    """
    scalar = np.isscalar(x) or np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    w = np.zeros_like(x)
    w[x >= th] = WEIGHT_VALUES[0]
    for edge, val in zip(WEIGHT_EDGES, WEIGHT_VALUES[1:]):
        w[x >= max(edge, th)] = val
    if scalar:
        return float(w[0])
    return w


def _check_pair(y, yhat):
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ShapeMismatch(f"target {y.shape} vs prediction {yhat.shape}")
    return y, yhat


def wmae(y, yhat, th: float = 0.5) -> float:
    """Mean absolute error weighted by the target's bracket weight."""
    y, yhat = _check_pair(y, yhat)
    return float(np.mean(weight(y, th) * np.abs(y - yhat)))


def wmae_grad(y, yhat, th: float = 0.5) -> np.ndarray:
    """d wmae / d yhat (subgradient 0 where prediction equals target)."""
    y, yhat = _check_pair(y, yhat)
    return -weight(y, th) * np.sign(y - yhat) / y.size


def wmse(y, yhat, th: float = 0.5) -> float:
    """Squared-error twin of wmae."""
    y, yhat = _check_pair(y, yhat)
    return float(np.mean(weight(y, th) * (y - yhat) ** 2))


def wmse_grad(y, yhat, th: float = 0.5) -> np.ndarray:
    y, yhat = _check_pair(y, yhat)
    return -2.0 * weight(y, th) * (y - yhat) / y.size


def balanced_loss(y, yhat) -> float:
    """MAE restricted to sub-threshold (target < 0.5 mm/hr) pixels."""
    y, yhat = _check_pair(y, yhat)
    mask = (y < 0.5).astype(np.float64)
    return float(np.mean(mask * np.abs(y - yhat)))


def balanced_loss_grad(y, yhat) -> np.ndarray:
    y, yhat = _check_pair(y, yhat)
    mask = (y < 0.5).astype(np.float64)
    return -mask * np.sign(y - yhat) / y.size


def _check_scores(scores):
    s = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)) or np.any(s < 0) or np.any(s > 1):
        raise DomainError("scores must lie in (0, 1)")
    return np.clip(s, LOG_EPS, 1 - LOG_EPS)


def d_loss(real_scores, fake_scores) -> float:
    """Discriminator cross-entropy, summed over hours, averaged over batch.

    -sum_t [log D(Y_t) + log(1 - D(Yhat_t))]
    """
    r = _check_scores(real_scores)
    f = _check_scores(fake_scores)
    per = -(np.log(r) + np.log1p(-f))
    if per.ndim <= 1:
        return float(per.sum())
    return float(per.sum(axis=tuple(range(1, per.ndim))).mean())


def d_loss_grads(real_scores, fake_scores):
    """(d/d real, d/d fake) of d_loss."""
    r = _check_scores(real_scores)
    f = _check_scores(fake_scores)
    batch = 1 if r.ndim <= 1 else r.shape[0]
    return -1.0 / r / batch, 1.0 / (1.0 - f) / batch


def g_adv_loss(fake_scores) -> float:
    """Generator-side adversarial term: -sum_t log D(Yhat_t).

    Gradient flows into the predictor only; the discriminator's own
    parameters are frozen during this step.
    """
    f = _check_scores(fake_scores)
    per = -np.log(f)
    if per.ndim <= 1:
        return float(per.sum())
    return float(per.sum(axis=tuple(range(1, per.ndim))).mean())


def g_adv_loss_grad(fake_scores) -> np.ndarray:
    f = _check_scores(fake_scores)
    batch = 1 if f.ndim <= 1 else f.shape[0]
    return -1.0 / f / batch


def bce(labels, probs) -> float:
    """Pixelwise binary cross-entropy (classifier head training)."""
    labels, probs = _check_pair(labels, probs)
    p = np.clip(probs, LOG_EPS, 1 - LOG_EPS)
    return float(-np.mean(labels * np.log(p) + (1 - labels) * np.log1p(-p)))


def bce_grad(labels, probs) -> np.ndarray:
    labels, probs = _check_pair(labels, probs)
    p = np.clip(probs, LOG_EPS, 1 - LOG_EPS)
    return (-(labels / p) + (1 - labels) / (1 - p)) / labels.size


def pred_loss(spec: LossSpec, y, yhat) -> float:
    """The base regression term selected by the spec."""
    if spec.base == "WMAE":
        return wmae(y, yhat, spec.threshold)
    return wmse(y, yhat, spec.threshold)


def pred_loss_grad(spec: LossSpec, y, yhat) -> np.ndarray:
    if spec.base == "WMAE":
        return wmae_grad(y, yhat, spec.threshold)
    return wmse_grad(y, yhat, spec.threshold)


def composite_loss(spec: LossSpec, y, yhat, fake_scores=None) -> float:
    """Full predictor objective under the given spec.

    (1-w_adv)*L_pred + w_adv*L_GD with the discriminator active,
    (1-w_bal)*L_pred + w_bal*L_bal with the balanced term, else L_pred.
    """
    lp = pred_loss(spec, y, yhat)
    if spec.use_adv and spec.use_bal:
        raise ConflictingSpec("adversarial and balanced terms are never combined")
    if spec.use_adv:
        if fake_scores is None:
            raise DomainError("adversarial spec needs discriminator scores")
        return (1 - spec.w_adv) * lp + spec.w_adv * g_adv_loss(fake_scores)
    if spec.use_bal:
        return (1 - spec.w_bal) * lp + spec.w_bal * balanced_loss(y, yhat)
    return lp
