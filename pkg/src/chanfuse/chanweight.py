"""
Maximum-likelihood channel weighting in the log-Mel domain.

All channels share one weight per utterance and the fused frame is
``o_t = X_t w`` with ``X_t`` the D x C matrix of channel features at frame
``t``.  Three estimators are provided:

* raw ML weights from per-frame least-squares solves inside an EM loop,
* the same weights mapped onto the simplex by a softmax,
* weights maximising the likelihood plus ``beta/2 * log|C_hat|``, where
  ``C_hat`` is the covariance of the fused features; optimised by L-BFGS.
"""

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp, softmax

from chanfuse.errors import DataError
from chanfuse.featkit import FeatureMatrix
from chanfuse.gmm import log_joint
from chanfuse.optim import LINE_SEARCH_FAILED, LbfgsConfig, lbfgs_minimize

logger = logging.getLogger(__name__)

RAW_ML, SOFTMAX, JACOBIAN = "raw_ml", "softmax", "jacobian"

# frames whose regularised accumulator has a larger condition number are skipped
_MAX_COND = 1e14


class DegenerateFrame(DataError):
    pass


@dataclass(frozen=True)
class WeightVector:
    w: np.ndarray
    kind: str = RAW_ML
    warning: str | None = None

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        if self.kind == SOFTMAX and (np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9):
            raise ValueError("softmax weights must be positive and sum to 1")
        object.__setattr__(self, "w", w)

    def __len__(self):
        return self.w.shape[0]


@dataclass(frozen=True)
class FrameAccumulators:
    A: np.ndarray
    B: np.ndarray


@dataclass(frozen=True)
class WeightedStats:
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class JacobianConfig:
    beta: float = 1.0
    eps: float = 1e-6
    em_iters: int = 3
    init_weights: tuple | None = None
    ridge: float = 1e-8
    ml_mode: str = "average"

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.em_iters < 1:
            raise ValueError("em_iters must be >= 1")
        if self.ml_mode not in ("average", "pooled"):
            raise ValueError("ml_mode must be 'average' or 'pooled'")


def _weights(w):
    return w.w if isinstance(w, WeightVector) else np.asarray(w, dtype=np.float64).reshape(-1)


def _initial(u, cfg):
    if cfg.init_weights is None:
        return np.full(u.C, 1.0 / u.C)
    w0 = np.asarray(cfg.init_weights, dtype=np.float64)
    if w0.shape != (u.C,):
        raise DataError(f"init_weights has length {w0.shape[0]}, utterance has {u.C} channels")
    return w0.copy()


def apply_weights(u, w):
    """Fused features: frame t is sum_c w_c x_c(t)."""
    w = _weights(w)
    if w.shape[0] != u.C:
        raise DataError(f"weight length {w.shape[0]} != channel count {u.C}")
    out = w[0] * u.channels[0].frames
    for wc, ch in zip(w[1:], u.channels[1:]):
        out = out + wc * ch.frames
    return FeatureMatrix(out, u.channels[0].state)


def _fused(X, w):
    return np.einsum("tdc,c->td", X, w)


def _frame_terms(model, G):
    """Per-frame precision P_t = sum_m g_m / var_m and q_t = sum_m g_m mu_m / var_m."""
    inv_var = 1.0 / model.variances
    return G @ inv_var, G @ (model.means * inv_var)


def accumulators(model, X, G):
    """Batched accumulators: A of shape (T, C, C) and B of shape (T, C)."""
    if X.shape[1] != model.dim:
        raise DataError(f"dimension mismatch: features D={X.shape[1]}, model D={model.dim}")
    P, q = _frame_terms(model, G)
    A = np.einsum("tdc,td,tde->tce", X, P, X)
    B = np.einsum("tdc,td->tc", X, q)
    return A, B


def frame_accumulators(model, X_t, gamma):
    """A_t = sum_m g_m X_t' inv(S_m) X_t and B_t = sum_m g_m X_t' inv(S_m) mu_m for one frame."""
    X_t = np.asarray(X_t, dtype=np.float64)
    if X_t.ndim == 1:
        X_t = X_t[:, None]
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape != (model.M,):
        raise DataError(f"posterior length {gamma.shape} != mixture count {model.M}")
    A, B = accumulators(model, X_t[None], gamma[None])
    return FrameAccumulators(0.5 * (A[0] + A[0].T), B[0])


def solve_frame_weight(acc, ridge=1e-8):
    """Maximiser of -w'Aw/2 + B'w, regularised: (A + ridge I)^-1 B."""
    A = acc.A + ridge * np.eye(acc.A.shape[0])
    if not np.isfinite(np.linalg.cond(A)) or np.linalg.cond(A) > _MAX_COND:
        raise DegenerateFrame("degenerate frame")
    return np.linalg.solve(A, acc.B)


def _solve_frames(A, B, ridge):
    """Solve every frame; returns (weights, ok-mask) with degenerate frames masked out."""
    C = A.shape[1]
    Ar = A + ridge * np.eye(C)
    cond = np.linalg.cond(Ar)
    ok = np.isfinite(cond) & (cond <= _MAX_COND)
    W = np.zeros((A.shape[0], C))
    if np.any(ok):
        W[ok] = np.linalg.solve(Ar[ok], B[ok][..., None])[..., 0]
    return W, ok


def _uniform_fallback(u, kind, reason):
    warnings.warn(f"weighting failed, fall back to uniform: {reason}", RuntimeWarning, stacklevel=3)
    return WeightVector(np.full(u.C, 1.0 / u.C), kind, warning=reason)


def estimate_weights_ml(model, u, cfg=JacobianConfig()):
    """EM estimate of raw ML channel weights.

    Each iteration computes posteriors on the current fused features, solves
    every frame's C x C system and averages the per-frame solutions
    (``ml_mode="pooled"`` solves the summed system instead).
    """
    if u.dim != model.dim:
        raise DataError(f"dimension mismatch: utterance D={u.dim}, model D={model.dim}")
    X = u.stack()
    w = _initial(u, cfg)
    for _ in range(cfg.em_iters):
        G = np.exp(_log_posteriors(model, _fused(X, w)))
        A, B = accumulators(model, X, G)
        if cfg.ml_mode == "pooled":
            try:
                w = solve_frame_weight(FrameAccumulators(A.sum(axis=0), B.sum(axis=0)), cfg.ridge * A.shape[0])
            except DegenerateFrame:
                return _uniform_fallback(u, RAW_ML, "pooled system is singular")
            continue
        W, ok = _solve_frames(A, B, cfg.ridge)
        if not np.any(ok):
            return _uniform_fallback(u, RAW_ML, "all frames degenerate")
        w = W[ok].mean(axis=0)
    return WeightVector(w, RAW_ML)


def softmax_constrain(w):
    """Map raw weights onto the open simplex.

    Entries that underflow to zero are raised to the smallest normal float so
    every weight stays strictly positive.
    """
    return WeightVector(np.maximum(softmax(_weights(w)), np.finfo(np.float64).tiny), SOFTMAX)


def _stats(O, eps):
    T = O.shape[0]
    mean = O.mean(axis=0)
    dev = O - mean
    cov = dev.T @ dev / T
    cov[np.diag_indices_from(cov)] += eps
    return mean, dev, cov


def weighted_stats(u, w, eps=1e-6):
    """Sample mean and eps-regularised (1/T) covariance of the fused features."""
    if u.T < 2:
        raise DataError("need at least two frames for a covariance")
    w = _weights(w)
    if w.shape[0] != u.C:
        raise DataError(f"weight length {w.shape[0]} != channel count {u.C}")
    mean, _, cov = _stats(_fused(u.stack(), w), eps)
    return WeightedStats(mean, cov)


def _log_posteriors(model, O):
    lj = log_joint(model, O)
    return lj - logsumexp(lj, axis=1, keepdims=True)


def _chol(cov):
    try:
        return cho_factor(cov, lower=True)
    except np.linalg.LinAlgError as exc:
        raise DataError("factorization failure: fused covariance not positive definite") from exc


def _logdet(cov):
    L, _ = _chol(cov)
    return 2.0 * np.sum(np.log(np.diag(L)))


def _mean_loglik(model, O, gamma):
    lj = log_joint(model, O)
    if gamma is None:
        return float(np.mean(logsumexp(lj, axis=1)))
    # EM auxiliary with the posterior entropy added back: equals the true
    # log-likelihood at the point where gamma was computed
    with np.errstate(divide="ignore"):
        log_g = np.where(gamma > 0, np.log(gamma), 0.0)
    return float(np.mean(np.sum(gamma * (lj - log_g), axis=1)))


def jacobian_objective(model, u, w, cfg=JacobianConfig(), gamma=None):
    """Mean fused log-likelihood plus beta/2 * log det of the fused covariance.

    With ``gamma`` (a T x M posterior matrix) the likelihood term is the EM
    auxiliary function with those posteriors held fixed.
    """
    w = _weights(w)
    O = _fused(u.stack(), w)
    value = _mean_loglik(model, O, gamma)
    if cfg.beta:
        value += 0.5 * cfg.beta * _logdet(_stats(O, cfg.eps)[2])
    return value


def _logdet_grad(X, O, eps):
    """d log|C_hat| / dw = 2/T sum_t xc_t' C_hat^-1 (o_t - mean), using centred channels."""
    T = X.shape[0]
    _, dev, cov = _stats(O, eps)
    Z = cho_solve(_chol(cov), dev.T).T
    Xc = X - X.mean(axis=0)
    return 2.0 / T * np.einsum("tdc,td->c", Xc, Z)


def jacobian_gradient(model, u, w, cfg=JacobianConfig(), gamma=None):
    """Gradient of :func:`jacobian_objective` with respect to w.

    The likelihood part is (1/T) sum_t (B_t - A_t w) with posteriors taken
    from ``gamma`` or, if omitted, computed at w (which is then the exact
    gradient of the mean log-likelihood).
    """
    w = _weights(w)
    X = u.stack()
    O = _fused(X, w)
    if gamma is None:
        gamma = np.exp(_log_posteriors(model, O))
    P, q = _frame_terms(model, gamma)
    grad = np.einsum("tdc,td->c", X, q - P * O) / X.shape[0]
    if cfg.beta:
        grad += 0.5 * cfg.beta * _logdet_grad(X, O, cfg.eps)
    return grad


class _FrozenProblem:
    """Negated objective with posteriors fixed; the likelihood is a pooled quadratic."""

    def __init__(self, model, X, gamma, cfg):
        T = X.shape[0]
        A, B = accumulators(model, X, gamma)
        self.A = A.sum(axis=0) / T
        self.B = B.sum(axis=0) / T
        inv_var = 1.0 / model.variances
        const_m = model.log_norm - 0.5 * np.sum(model.means**2 * inv_var, axis=1)
        with np.errstate(divide="ignore"):
            log_g = np.where(gamma > 0, np.log(gamma), 0.0)
        self.c = float(np.sum(gamma * (const_m - log_g)) / T)
        self.X = X
        self.cfg = cfg

    def value(self, w):
        v = -0.5 * w @ self.A @ w + self.B @ w + self.c
        if self.cfg.beta:
            v += 0.5 * self.cfg.beta * _logdet(_stats(_fused(self.X, w), self.cfg.eps)[2])
        return float(v)

    def grad(self, w):
        g = self.B - self.A @ w
        if self.cfg.beta:
            g = g + 0.5 * self.cfg.beta * _logdet_grad(self.X, _fused(self.X, w), self.cfg.eps)
        return g


def estimate_weights_jacobian(model, u, cfg=JacobianConfig(), lbfgs_cfg=LbfgsConfig(), trace=None):
    """Generalised EM for the Jacobian-constrained objective.

    Each outer iteration freezes the posteriors at the current fused features
    and runs L-BFGS on the negated objective.  If ``trace`` is a list, the
    true objective at the start and after every outer iteration is appended.
    """
    if u.dim != model.dim:
        raise DataError(f"dimension mismatch: utterance D={u.dim}, model D={model.dim}")
    if u.T < 2:
        return _uniform_fallback(u, JACOBIAN, "fewer than two frames")
    X = u.stack()
    w = _initial(u, cfg)
    warning = None
    if trace is not None:
        trace.append(jacobian_objective(model, u, w, cfg))
    for _ in range(cfg.em_iters):
        gamma = np.exp(_log_posteriors(model, _fused(X, w)))
        prob = _FrozenProblem(model, X, gamma, cfg)
        res = lbfgs_minimize(lambda v: -prob.value(v), lambda v: -prob.grad(v), w, lbfgs_cfg)
        if res.status == LINE_SEARCH_FAILED:
            warning = "line search failed; returning best iterate"
            logger.warning("jacobian weighting: %s", warning)
        w = res.x
        if trace is not None:
            trace.append(jacobian_objective(model, u, w, cfg))
    return WeightVector(w, JACOBIAN, warning)


def pooled_weight(model, u, gamma, ridge=0.0):
    """Exact maximiser of the frozen-posterior quadratic: (sum A_t)^-1 sum B_t."""
    A, B = accumulators(model, u.stack(), gamma)
    return solve_frame_weight(FrameAccumulators(A.sum(axis=0), B.sum(axis=0)), ridge)


def fused_posteriors(model, u, w):
    """Posterior matrix (T x M) of the GMM on the fused features."""
    return np.exp(_log_posteriors(model, _fused(u.stack(), _weights(w))))
