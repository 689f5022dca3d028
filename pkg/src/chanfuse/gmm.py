"""
Diagonal-covariance Gaussian mixture model.

Used as the clean-speech density for scoring and weighting channels.  All
density computations are done in the log domain.
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from chanfuse.errors import DataError, FormatError

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)

# frames per block when materialising (T, M, D) differences
_CHUNK = 1024
# components whose soft count falls below this are re-seeded
_EMPTY = 1e-8


@dataclass(frozen=True)
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        var = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if mu.shape != var.shape or mu.shape[0] != w.shape[0]:
            raise ValueError(f"inconsistent GMM shapes: weights {w.shape}, means {mu.shape}, variances {var.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(var))):
            raise ValueError("GMM parameters must be finite")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be positive and sum to 1")
        if np.any(var <= 0):
            raise ValueError("variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def M(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def log_norm(self):
        """log(w_m) - 0.5 * log|2 pi Sigma_m| for every component."""
        return np.log(self.weights) - 0.5 * (self.dim * LOG_2PI + np.log(self.variances).sum(axis=1))


@dataclass(frozen=True)
class EmConfig:
    max_iters: int = 20
    var_floor: float = 1e-3
    tol: float = 1e-4
    seed: int = 0
    kmeans_passes: int = 2

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.var_floor <= 0:
            raise ValueError("var_floor must be positive")


def _as_frames(x, D=None):
    x = np.asarray(getattr(x, "frames", x), dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if D is not None and x.shape[1] != D:
        raise DataError(f"dimension mismatch: features have D={x.shape[1]}, model has D={D}")
    return x


def log_joint(model, X):
    """log(w_m N(x_t; mu_m, Sigma_m)) for every frame and component, shape (T, M)."""
    X = _as_frames(X, model.dim)
    inv_var = 1.0 / model.variances
    out = np.empty((X.shape[0], model.M))
    for s in range(0, X.shape[0], _CHUNK):
        diff = X[s:s + _CHUNK, None, :] - model.means[None, :, :]
        out[s:s + _CHUNK] = -0.5 * np.einsum("tmd,md->tm", diff * diff, inv_var)
    return out + model.log_norm


def frame_log_likelihoods(model, X):
    return logsumexp(log_joint(model, X), axis=1)


def frame_log_likelihood(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DataError("expected a single D-vector")
    return float(frame_log_likelihoods(model, x)[0])


def utterance_score(model, f):
    """Mean per-frame log-likelihood of an utterance."""
    return float(np.mean(frame_log_likelihoods(model, f)))


def posterior_matrix(model, X):
    lj = log_joint(model, X)
    return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))


def posteriors(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DataError("expected a single D-vector")
    return posterior_matrix(model, x)[0]


def _stack(features):
    if isinstance(features, (list, tuple)):
        return np.vstack([_as_frames(f) for f in features])
    return _as_frames(features)


def _kmeans_init(X, M, cfg, rng):
    T = X.shape[0]
    means = X[np.sort(rng.choice(T, size=M, replace=False))].copy()
    for _ in range(cfg.kmeans_passes):
        labels = np.argmin(_chunked_d2(X, means), axis=1)
        for m in range(M):
            members = X[labels == m]
            if members.shape[0]:
                means[m] = members.mean(axis=0)
    labels = np.argmin(_chunked_d2(X, means), axis=1)
    global_var = np.maximum(X.var(axis=0), cfg.var_floor)
    variances = np.tile(global_var, (M, 1))
    counts = np.bincount(labels, minlength=M).astype(np.float64)
    for m in range(M):
        members = X[labels == m]
        if members.shape[0] >= 2:
            variances[m] = np.maximum(members.var(axis=0), cfg.var_floor)
    weights = np.maximum(counts, 1.0)
    return GmmModel(weights / weights.sum(), means, variances)


def _chunked_d2(X, means):
    out = np.empty((X.shape[0], means.shape[0]))
    for s in range(0, X.shape[0], _CHUNK):
        out[s:s + _CHUNK] = ((X[s:s + _CHUNK, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return out


def _m_step(X, gamma, cfg):
    counts = gamma.sum(axis=0)
    M, D = gamma.shape[1], X.shape[1]
    means = np.zeros((M, D))
    variances = np.ones((M, D))
    live = counts >= _EMPTY
    means[live] = (gamma[:, live].T @ X) / counts[live, None]
    sq = np.zeros((M, D))
    for s in range(0, X.shape[0], _CHUNK):
        diff = X[s:s + _CHUNK, None, :] - means[None, :, :]
        sq += np.einsum("tm,tmd->md", gamma[s:s + _CHUNK], diff * diff)
    variances[live] = np.maximum(sq[live] / counts[live, None], cfg.var_floor)
    weights = counts.copy()
    for m in np.flatnonzero(~live):
        # split the widest live component in two along its widest dimension
        j = int(np.argmax(np.where(live, variances.sum(axis=1), -np.inf)))
        d = int(np.argmax(variances[j]))
        step = np.sqrt(variances[j, d])
        means[m] = means[j]
        means[m, d] += step
        means[j, d] -= step
        variances[m] = variances[j]
        weights[m] = weights[j] = weights[j] / 2.0
        live[m] = True
        logger.warning("EM: component %d emptied; re-seeded from component %d", m, j)
    return GmmModel(weights / weights.sum(), means, variances)


def train_with_trace(features, M, cfg=EmConfig()):
    """EM training; returns (model, trace of mean per-frame log-likelihood)."""
    X = _stack(features)
    if not np.all(np.isfinite(X)):
        raise DataError("training features contain non-finite values")
    if X.shape[0] < M:
        raise DataError(f"insufficient data: {X.shape[0]} frames for {M} mixtures")
    rng = np.random.default_rng(cfg.seed)
    model = _kmeans_init(X, M, cfg, rng)
    trace = []
    for it in range(cfg.max_iters):
        lj = log_joint(model, X)
        ll = logsumexp(lj, axis=1, keepdims=True)
        trace.append(float(ll.mean()))
        if it > 0 and trace[-1] - trace[-2] < cfg.tol:
            return model, trace
        model = _m_step(X, np.exp(lj - ll), cfg)
    trace.append(float(frame_log_likelihoods(model, X).mean()))
    return model, trace


def gmm_train(features, M, cfg=EmConfig()):
    return train_with_trace(features, M, cfg)[0]


_CGM_MAGIC = b"CGM1"
_CGM_HEADER = struct.Struct("<4sII")


def dump_gmm(model):
    head = _CGM_HEADER.pack(_CGM_MAGIC, model.M, model.dim)
    return head + b"".join(a.astype("<f8").tobytes() for a in (model.weights, model.means, model.variances))


def load_gmm(data):
    if len(data) < _CGM_HEADER.size:
        raise FormatError("truncated CGM1 header")
    magic, M, D = _CGM_HEADER.unpack_from(data)
    if magic != _CGM_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {_CGM_MAGIC!r}")
    body = np.frombuffer(data[_CGM_HEADER.size:], dtype="<f8")
    if body.shape[0] != M + 2 * M * D:
        raise FormatError("CGM1 body length does not match header")
    w = body[:M]
    mu = body[M:M + M * D].reshape(M, D)
    var = body[M + M * D:].reshape(M, D)
    try:
        return GmmModel(w.copy(), mu.copy(), var.copy())
    except ValueError as exc:
        raise FormatError(f"invalid CGM1 parameters: {exc}") from exc


def write_gmm(path, model):
    Path(path).write_bytes(dump_gmm(model))


def read_gmm(path):
    return load_gmm(Path(path).read_bytes())
