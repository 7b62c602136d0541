"""Loss functions: Dice, binary cross-entropy, mean squared error.

Each returns the scalar value together with the analytic gradient with
respect to the prediction.  Sums and means accumulate in float64; the
gradient comes back in the prediction's dtype.

Dice here is the squared-norm form

    1 - 2<p, p_hat> / (||p||_2^2 + ||p_hat||_2^2)

evaluated exactly, with epsilon = 1e-7 acting as a guard on the
denominator: when ||p||^2 + ||p_hat||^2 < epsilon (both masks empty)
the loss is defined as 0 with zero gradient.  Folding epsilon into the
denominator additively instead would shift the exact algebraic values
(perfect overlap would no longer give exactly 0) while guarding the
same degenerate case, so the guard form is used.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError
from .tensor import Tensor, _wrap

DICE_EPS = 1e-7
BCE_DELTA = 1e-7


@dataclass
class LossValue:
    value: float
    d_pred: Tensor


def _check_pair(p: Tensor, p_hat: Tensor, binary_p: bool = True):
    if p.data.shape != p_hat.data.shape:
        raise ShapeError(f"loss shape mismatch: {p.shape} vs {p_hat.shape}")
    pd = p.data
    if binary_p and not np.all((pd == 0) | (pd == 1)):
        raise DomainError("ground truth must be binary (0 or 1)")
    qd = p_hat.data
    if qd.min() < 0 or qd.max() > 1:
        raise DomainError("prediction values must lie in [0, 1]")


def dice_loss(p: Tensor, p_hat: Tensor) -> LossValue:
    _check_pair(p, p_hat)
    pd, qd = p.data, p_hat.data
    inter = float(np.sum(pd * qd, dtype=np.float64))
    den = float(np.sum(pd * pd, dtype=np.float64)) + float(np.sum(qd * qd, dtype=np.float64))
    if den < DICE_EPS:
        return LossValue(0.0, _wrap(np.zeros_like(qd)))
    value = 1.0 - 2.0 * inter / den
    # quotient rule: d/dq [ -2<p,q> / den ] with den = ||p||^2 + ||q||^2
    c_q = qd.dtype.type(4.0 * inter / (den * den))
    c_p = qd.dtype.type(2.0 / den)
    grad = c_q * qd - c_p * pd
    return LossValue(value, _wrap(grad.astype(qd.dtype, copy=False)))


def bce_loss(p: Tensor, p_hat: Tensor) -> LossValue:
    _check_pair(p, p_hat)
    pd = p.data.astype(np.float64, copy=False)
    qd = np.clip(p_hat.data.astype(np.float64, copy=False), BCE_DELTA, 1.0 - BCE_DELTA)
    n = pd.size
    value = float(-np.sum(pd * np.log(qd) + (1.0 - pd) * np.log1p(-qd), dtype=np.float64)) / n
    grad = (qd - pd) / (qd * (1.0 - qd) * n)
    # clamped elements sit on a plateau of the clipped objective
    grad[(p_hat.data < BCE_DELTA) | (p_hat.data > 1.0 - BCE_DELTA)] = 0.0
    return LossValue(value, _wrap(grad.astype(p_hat.data.dtype)))


def mse_loss(p: Tensor, p_hat: Tensor) -> LossValue:
    _check_pair(p, p_hat)
    pd, qd = p.data, p_hat.data
    diff = qd.astype(np.float64, copy=False) - pd.astype(np.float64, copy=False)
    n = pd.size
    value = float(np.sum(diff * diff, dtype=np.float64)) / n
    grad = (2.0 / n) * diff
    return LossValue(value, _wrap(grad.astype(qd.dtype)))
