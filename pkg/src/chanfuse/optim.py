"""
Limited-memory BFGS with a backtracking Armijo line search, and a central
finite-difference gradient used to check analytic gradients.
"""

from collections import deque
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

CONVERGED = "converged"
MAX_ITERS = "max_iters"
LINE_SEARCH_FAILED = "line_search_failed"

# curvature pairs with s'y at or below this are not stored
_CURVATURE_EPS = 1e-12


@dataclass(frozen=True)
class LbfgsConfig:
    history: int = 7
    max_iters: int = 100
    gtol: float = 1e-6
    armijo: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 40

    def __post_init__(self):
        if self.history < 1:
            raise ValueError("history must be >= 1")
        if self.gtol <= 0 or self.armijo <= 0:
            raise ValueError("tolerances must be positive")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")


class LbfgsResult(NamedTuple):
    x: np.ndarray
    fun: float
    status: str
    n_iter: int


def _two_loop(grad, pairs):
    """Apply the inverse-Hessian approximation to grad."""
    q = grad.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def _armijo_ok(f_new, fx, alpha, slope, cfg):
    return np.isfinite(f_new) and f_new <= fx + cfg.armijo * alpha * slope


def _line_search(f, g, x, fx, d, slope, alpha, cfg):
    for n_back in range(cfg.max_backtracks):
        f_new = f(x + alpha * d)
        if _armijo_ok(f_new, fx, alpha, slope, cfg):
            break
        alpha *= cfg.shrink
    else:
        return None, None, None
    g_new = np.asarray(g(x + alpha * d), dtype=np.float64)
    # Secant refinement on the directional derivative (exact on quadratics).
    # A first-trial acceptance may also grow the step, at most 4x per try.
    for _ in range(1 if n_back else cfg.max_backtracks):
        s1 = g_new @ d
        cand = alpha * slope / (slope - s1) if s1 > slope else 4.0 * alpha
        cand = min(cand, 4.0 * alpha)
        if abs(cand - alpha) <= 1e-12 * alpha:
            break
        f_c = f(x + cand * d)
        if not (_armijo_ok(f_c, fx, cand, slope, cfg) and f_c <= f_new):
            break
        grew = cand > alpha
        alpha, f_new = cand, f_c
        g_new = np.asarray(g(x + alpha * d), dtype=np.float64)
        if not grew:
            break
    return alpha, f_new, g_new


def lbfgs_minimize(f, g, x0, cfg=LbfgsConfig(), callback=None):
    """Minimize f from x0.

    ``f`` returns a float and ``g`` its gradient.  Returns an
    :class:`LbfgsResult`; ``status`` is one of ``converged``, ``max_iters`` or
    ``line_search_failed``.  ``callback(x, fx)`` is called after every
    accepted step.
    """
    x = np.array(x0, dtype=np.float64)
    fx = float(f(x))
    gx = np.asarray(g(x), dtype=np.float64)
    if not np.isfinite(fx) or not np.all(np.isfinite(gx)):
        raise ValueError("objective or gradient is not finite at the starting point")
    pairs = deque(maxlen=cfg.history)
    for k in range(cfg.max_iters):
        gnorm = np.linalg.norm(gx)
        if gnorm <= cfg.gtol:
            return LbfgsResult(x, fx, CONVERGED, k)
        d = -_two_loop(gx, pairs)
        slope = gx @ d
        if not slope < 0:
            pairs.clear()
            d = -gx
            slope = -gnorm * gnorm
        alpha0 = 1.0 if pairs else min(1.0, 1.0 / gnorm)
        alpha, f_new, g_new = _line_search(f, g, x, fx, d, slope, alpha0, cfg)
        if alpha is None:
            return LbfgsResult(x, fx, LINE_SEARCH_FAILED, k)
        x_new = x + alpha * d
        s, y = x_new - x, g_new - gx
        sy = s @ y
        if sy > _CURVATURE_EPS:
            pairs.append((s, y, 1.0 / sy))
        x, fx, gx = x_new, float(f_new), g_new
        if callback is not None:
            callback(x, fx)
    status = CONVERGED if np.linalg.norm(gx) <= cfg.gtol else MAX_ITERS
    return LbfgsResult(x, fx, status, cfg.max_iters)


def finite_diff_grad(f, x, h=1e-6):
    """Central-difference gradient of f at x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.shape[0]):
        e = np.zeros_like(x)
        e[i] = h
        hi, lo = f(x + e), f(x - e)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ValueError(f"non-finite objective within h of x along coordinate {i}")
        grad[i] = (hi - lo) / (2.0 * h)
    return grad
