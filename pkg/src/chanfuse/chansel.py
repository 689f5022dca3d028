"""
Per-utterance channel selection.

Channels are numbered from 1.  Ties always go to the lowest channel id.
"""

from dataclasses import dataclass

import numpy as np

from chanfuse.autoencoder import reconstruction_error
from chanfuse.errors import DataError
from chanfuse.featkit import FeatureMatrix, normalize
from chanfuse.gmm import utterance_score

ML, AE, ORACLE = "ml", "ae", "oracle"


@dataclass(frozen=True)
class MultichannelUtterance:
    channels: tuple

    def __post_init__(self):
        chans = tuple(c if isinstance(c, FeatureMatrix) else FeatureMatrix(c) for c in self.channels)
        if not chans:
            raise DataError("an utterance needs at least one channel")
        shape = chans[0].shape
        for k, c in enumerate(chans, 1):
            if c.shape != shape:
                raise DataError(f"channel {k} has shape {c.shape}, channel 1 has {shape}")
        if len({c.state for c in chans}) > 1:
            raise DataError("channels are not normalized consistently")
        object.__setattr__(self, "channels", chans)

    @property
    def C(self):
        return len(self.channels)

    @property
    def T(self):
        return self.channels[0].T

    @property
    def dim(self):
        return self.channels[0].dim

    def stack(self):
        """Feature tensor of shape (T, D, C); ``stack()[t]`` is the D x C frame matrix."""
        return np.stack([c.frames for c in self.channels], axis=2)

    def normalized(self, mode="cmn+cvn"):
        """Per-channel CMN (and CVN) of every channel."""
        return MultichannelUtterance(tuple(normalize(c, mode) for c in self.channels))


@dataclass(frozen=True)
class SelectionResult:
    chosen: int
    scores: tuple
    method: str


def _pick(scores, method, maximize):
    scores = np.asarray(scores, dtype=np.float64)
    best = np.argmax(scores) if maximize else np.argmin(scores)  # first occurrence wins ties
    return SelectionResult(int(best) + 1, tuple(float(s) for s in scores), method)


def select_ml(model, u):
    """Pick the channel with the largest mean log-likelihood under the clean GMM."""
    if u.dim != model.dim:
        raise DataError(f"dimension mismatch: utterance D={u.dim}, model D={model.dim}")
    return _pick([utterance_score(model, c) for c in u.channels], ML, maximize=True)


def select_ae(model, u):
    """Pick the channel the clean autoencoder reconstructs best."""
    if u.dim != model.out_dim:
        raise DataError(f"dimension mismatch: utterance D={u.dim}, model output {model.out_dim}")
    return _pick([reconstruction_error(model, c) for c in u.channels], AE, maximize=False)


def select_oracle(u, clean):
    """Pick the channel closest to the clean reference in Frobenius norm."""
    ref = clean.frames if isinstance(clean, FeatureMatrix) else np.asarray(clean, dtype=np.float64)
    if ref.shape != (u.T, u.dim):
        raise DataError(f"shape mismatch: clean {ref.shape}, channels {(u.T, u.dim)}")
    return _pick([np.linalg.norm(c.frames - ref) for c in u.channels], ORACLE, maximize=False)
