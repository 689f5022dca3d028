"""
Feedforward autoencoder over 9-frame context windows.

The net maps a window of stacked frames to the centre frame.  It is trained
on clean features only; its reconstruction error on a channel measures how
clean-like that channel looks.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from chanfuse.errors import DataError, FormatError

CONTEXT = 9


def sigmoid(z):
    # split by sign to avoid overflow in exp
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _identity(z):
    return z


_ACTIVATIONS = {"sigmoid": sigmoid, "linear": _identity}


@dataclass(frozen=True)
class AutoencoderModel:
    """Layer ``k`` maps ``weights[k].shape[0]`` inputs to ``weights[k].shape[1]`` outputs."""

    weights: tuple
    biases: tuple
    hidden_activation: str = "sigmoid"

    def __post_init__(self):
        if self.hidden_activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.hidden_activation!r}")
        W = tuple(np.asarray(w, dtype=np.float64) for w in self.weights)
        b = tuple(np.asarray(v, dtype=np.float64).reshape(-1) for v in self.biases)
        if len(W) != len(b) or not W:
            raise ValueError("need one bias vector per weight matrix")
        for k, (w, v) in enumerate(zip(W, b)):
            if w.ndim != 2 or w.shape[1] != v.shape[0]:
                raise ValueError(f"layer {k}: weight {w.shape} incompatible with bias {v.shape}")
            if k and W[k - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {k}: input width {w.shape[0]} != previous output {W[k - 1].shape[1]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(v))):
                raise ValueError("autoencoder parameters must be finite")
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "biases", b)

    @property
    def layer_sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def in_dim(self):
        return self.weights[0].shape[0]

    @property
    def out_dim(self):
        return self.weights[-1].shape[1]

    @classmethod
    def init(cls, D, hidden=64, n_hidden=3, context=CONTEXT, seed=0):
        """Random init with Glorot-uniform weights and zero biases."""
        rng = np.random.default_rng(seed)
        sizes = [context * D] + [hidden] * n_hidden + [D]
        W, b = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            lim = np.sqrt(6.0 / (n_in + n_out))
            W.append(rng.uniform(-lim, lim, size=(n_in, n_out)))
            b.append(np.zeros(n_out))
        return cls(tuple(W), tuple(b))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 0.05
    batch_size: int = 32
    seed: int = 0
    hidden: int = 64
    context: int = CONTEXT

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.context != CONTEXT:
            raise ValueError(f"context is fixed at {CONTEXT} frames")


def _frames(f):
    return np.asarray(getattr(f, "frames", f), dtype=np.float64)


def windowize(f, context=CONTEXT):
    """Stack each frame with its neighbours; edges repeat the first/last frame.

    Returns a (T, context * D) matrix whose row t holds frames t-4 .. t+4.
    """
    x = _frames(f)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DataError("cannot windowize an empty feature matrix")
    half = context // 2
    T = x.shape[0]
    idx = np.clip(np.arange(T)[:, None] + np.arange(-half, half + 1)[None, :], 0, T - 1)
    return x[idx].reshape(T, context * x.shape[1])


def _forward(weights, biases, X, activation="sigmoid"):
    act = _ACTIVATIONS[activation]
    acts = [X]
    h = X
    last = len(weights) - 1
    for k, (W, b) in enumerate(zip(weights, biases)):
        z = h @ W + b
        h = z if k == last else act(z)
        acts.append(h)
    return acts


def ae_forward(model, window):
    """Forward pass for one window vector or a (N, in_dim) batch."""
    x = np.asarray(window, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != model.in_dim:
        raise DataError(f"dimension mismatch: input width {X.shape[1]}, model expects {model.in_dim}")
    out = _forward(model.weights, model.biases, X, model.hidden_activation)[-1]
    return out[0] if single else out


def mse_loss(model, X, Y):
    """Mean over frames and dimensions of the squared reconstruction error."""
    R = ae_forward(model, X) - Y
    return float(np.mean(R * R))


def mse_grad(model, X, Y):
    """Loss and backprop gradients (lists of dW, db) of :func:`mse_loss`."""
    return _backprop(model.weights, model.biases, X, Y, model.hidden_activation)


def _backprop(weights, biases, X, Y, activation="sigmoid"):
    acts = _forward(weights, biases, X, activation)
    R = acts[-1] - Y
    loss = float(np.mean(R * R))
    delta = 2.0 * R / R.size
    dW, db = [], []
    for k in range(len(weights) - 1, -1, -1):
        dW.append(acts[k].T @ delta)
        db.append(delta.sum(axis=0))
        if k:
            delta = delta @ weights[k].T
            if activation == "sigmoid":
                delta *= acts[k] * (1.0 - acts[k])
    return loss, dW[::-1], db[::-1]


def _corpus(clean, context):
    if not clean:
        raise DataError("empty training corpus")
    X = np.vstack([windowize(f, context) for f in clean])
    Y = np.vstack([_frames(f) for f in clean])
    return X, Y


def train_with_trace(clean, cfg=TrainConfig()):
    """Minibatch SGD on the window-to-centre-frame MSE.

    Returns the model and the full-corpus MSE before training and after each
    epoch (``epochs + 1`` values).
    """
    if isinstance(clean, np.ndarray) or hasattr(clean, "frames"):
        clean = [clean]
    X, Y = _corpus(list(clean), cfg.context)
    rng = np.random.default_rng(cfg.seed)
    model = AutoencoderModel.init(Y.shape[1], cfg.hidden, context=cfg.context, seed=int(rng.integers(2**31)))
    W = [w.copy() for w in model.weights]
    b = [v.copy() for v in model.biases]
    trace = [mse_loss(model, X, Y)]
    N = X.shape[0]
    for _ in range(cfg.epochs):
        order = rng.permutation(N)
        for s in range(0, N, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            _, dW, db = _backprop(W, b, X[idx], Y[idx])
            for k in range(len(W)):
                W[k] -= cfg.learning_rate * dW[k]
                b[k] -= cfg.learning_rate * db[k]
        R = _forward(W, b, X)[-1] - Y
        trace.append(float(np.mean(R * R)))
        if not np.isfinite(trace[-1]):
            raise FloatingPointError("autoencoder training diverged; lower the learning rate")
    return AutoencoderModel(tuple(w.copy() for w in W), tuple(v.copy() for v in b)), trace


def ae_train(clean, cfg=TrainConfig()):
    return train_with_trace(clean, cfg)[0]


def reconstruction_error(model, f):
    """Sum over frames of the squared error between reconstruction and frame."""
    x = _frames(f)
    if x.shape[1] != model.out_dim or model.in_dim % x.shape[1]:
        raise DataError(f"dimension mismatch: features D={x.shape[1]}, model output {model.out_dim}")
    R = ae_forward(model, windowize(x, model.in_dim // x.shape[1])) - x
    return float(np.sum(R * R))


_CAE_MAGIC = b"CAE1"


def dump_autoencoder(model):
    if model.hidden_activation != "sigmoid":
        raise FormatError("CAE1 stores sigmoid networks only")
    sizes = model.layer_sizes
    parts = [_CAE_MAGIC, struct.pack(f"<I{len(sizes)}I", len(model.weights), *sizes)]
    for W, b in zip(model.weights, model.biases):
        parts.append(W.astype("<f8").tobytes())
        parts.append(b.astype("<f8").tobytes())
    return b"".join(parts)


def load_autoencoder(data):
    if data[:4] != _CAE_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {_CAE_MAGIC!r}")
    try:
        (n_layers,) = struct.unpack_from("<I", data, 4)
        sizes = struct.unpack_from(f"<{n_layers + 1}I", data, 8)
    except struct.error as exc:
        raise FormatError("truncated CAE1 header") from exc
    pos = 8 + 4 * (n_layers + 1)
    W, b = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        need = 8 * (n_in * n_out + n_out)
        if len(data) < pos + need:
            raise FormatError("truncated CAE1 body")
        W.append(np.frombuffer(data, "<f8", n_in * n_out, pos).reshape(n_in, n_out).copy())
        pos += 8 * n_in * n_out
        b.append(np.frombuffer(data, "<f8", n_out, pos).copy())
        pos += 8 * n_out
    if pos != len(data):
        raise FormatError("trailing bytes after CAE1 body")
    return AutoencoderModel(tuple(W), tuple(b))


def write_autoencoder(path, model):
    Path(path).write_bytes(dump_autoencoder(model))


def read_autoencoder(path):
    return load_autoencoder(Path(path).read_bytes())
