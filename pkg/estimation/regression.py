"""Weighted per-condition regressions on degree, solved from per-degree sufficient statistics.

weight[d] is the total responsibility placed on degree d and sums[d] the
responsibility-weighted outcome total at that degree.
"""

import logging
from typing import Optional, Tuple

import numpy as np
from scipy.special import expit, log_expit, logit

from config import Config

logger = logging.getLogger(__name__)

# Weighted degree variance below this means the slope is not identified
DEGENERATE_VARIANCE = 1e-12


def _moments(degrees: np.ndarray, weight: np.ndarray, sums: np.ndarray) -> Tuple[float, float, float, float, float]:
    total = float(weight.sum())
    d_bar = float(weight @ degrees) / total
    y_bar = float(sums.sum()) / total
    d2_bar = float(weight @ degrees**2) / total
    dy_bar = float(sums @ degrees) / total
    return total, d_bar, y_bar, d2_bar, dy_bar


def weighted_linear(
    degrees: np.ndarray,
    weight: np.ndarray,
    sums: np.ndarray,
    previous: Optional[Tuple[float, float]] = None,
) -> Tuple[float, float, bool]:
    """Closed-form weighted least squares of y on degree: (alpha, beta, degenerate)"""
    if weight.sum() <= 0.0:
        alpha, beta = previous if previous is not None else (0.0, 0.0)
        return alpha, beta, True
    _, d_bar, y_bar, d2_bar, dy_bar = _moments(degrees, weight, sums)
    spread = d2_bar - d_bar**2
    if spread < DEGENERATE_VARIANCE:
        return y_bar, 0.0, True
    beta = (dy_bar - d_bar * y_bar) / spread
    return y_bar - beta * d_bar, beta, False


def logit_objective(alpha: float, beta: float, degrees, weight, successes, trials: int) -> float:
    """Weighted binomial log-likelihood in (alpha, beta), constants dropped"""
    eta = alpha + beta * degrees
    return float(successes @ eta + trials * (weight @ log_expit(-eta)))


def weighted_logit(
    degrees: np.ndarray,
    weight: np.ndarray,
    successes: np.ndarray,
    trials: int,
    start: Tuple[float, float] = (0.0, 0.0),
    bound: float = Config.LOGIT_BOUND,
    tol: float = Config.NEWTON_TOL,
    max_steps: int = 100,
) -> Tuple[float, float, bool]:
    """Weighted logistic regression of successes/trials on degree by damped Newton.

    Returns (alpha, beta, clamped); clamped is set when a coefficient hit
    +/- bound, which is how separation shows up.
    """
    total = float(weight.sum())
    if total <= 0.0:
        return start[0], start[1], False
    _, d_bar, y_bar, d2_bar, _ = _moments(degrees, weight, successes)
    if d2_bar - d_bar**2 < DEGENERATE_VARIANCE:
        rate = y_bar / trials
        if 0.0 < rate < 1.0:
            alpha = float(logit(rate))
        else:
            alpha = bound if rate >= 1.0 else -bound
        clamped = abs(alpha) >= bound
        return float(np.clip(alpha, -bound, bound)), 0.0, clamped

    x = np.clip(np.asarray(start, dtype=float), -bound, bound)
    design = np.stack([np.ones_like(degrees, dtype=float), degrees.astype(float)], axis=1)
    current = logit_objective(x[0], x[1], degrees, weight, successes, trials)
    clamped = False
    for _ in range(max_steps):
        prob = expit(design @ x)
        residual = successes - trials * weight * prob
        grad = design.T @ residual
        if np.linalg.norm(grad) < tol * max(1.0, total):
            break
        curvature = trials * weight * prob * (1.0 - prob)
        info = design.T @ (curvature[:, None] * design)
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, grad, rcond=None)[0]
        scale = 1.0
        while scale > 1e-10:
            candidate = x + scale * step
            value = logit_objective(candidate[0], candidate[1], degrees, weight, successes, trials)
            if value >= current:
                break
            scale *= 0.5
        else:
            break
        x, current = candidate, value
        if np.any(np.abs(x) > bound):
            x = np.clip(x, -bound, bound)
            clamped = True
            break
    return float(x[0]), float(x[1]), clamped
