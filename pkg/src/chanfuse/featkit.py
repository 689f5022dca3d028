"""
Log-Mel filterbank front-end and per-utterance mean/variance normalization.

Frames are rows: a FeatureMatrix holds a T x D array of log-Mel energies.
"""

import struct
import warnings
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import get_window

from chanfuse.errors import DataError, FormatError

RAW, CMN, CMN_CVN = "raw", "cmn", "cmn+cvn"
_STATE_CODES = {RAW: 0, CMN: 1, CMN_CVN: 2}
_CODE_STATES = {v: k for k, v in _STATE_CODES.items()}

# columns with a standard deviation at or below this are treated as constant
_CONST_STD = 1e-12


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self):
        return self.samples.shape[0]


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 40
    n_fft: int = 512
    frame_len: int = 400
    hop: int = 160
    fmin: float = 0.0
    fmax: float | None = None
    floor: float = 1e-10

    def __post_init__(self):
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.frame_len > self.n_fft:
            raise ValueError("frame_len must not exceed n_fft")
        if self.hop < 1:
            raise ValueError("hop must be >= 1")
        if self.floor <= 0:
            raise ValueError("floor must be positive")


@dataclass(frozen=True)
class FeatureMatrix:
    frames: np.ndarray
    state: str = RAW

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim == 1:
            frames = frames[:, None]
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise DataError("feature matrix needs shape (T, D) with T >= 1")
        if not np.all(np.isfinite(frames)):
            raise DataError("feature matrix contains non-finite values")
        if self.state not in _STATE_CODES:
            raise ValueError(f"unknown normalization state {self.state!r}")
        object.__setattr__(self, "frames", frames)

    @property
    def T(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]

    @property
    def shape(self):
        return self.frames.shape


def n_frames(n_samples, cfg):
    if n_samples < cfg.frame_len:
        return 0
    return (n_samples - cfg.frame_len) // cfg.hop + 1


def stft_power(audio, cfg=MelConfig()):
    """Power spectrogram of Hann-windowed frames, shape (T, n_fft // 2 + 1)."""
    x = audio.samples if isinstance(audio, AudioBuffer) else np.asarray(audio, dtype=np.float64)
    T = n_frames(x.shape[0], cfg)
    if T == 0:
        raise DataError("utterance too short")
    idx = np.arange(cfg.frame_len)[None, :] + cfg.hop * np.arange(T)[:, None]
    frames = x[idx] * get_window("hann", cfg.frame_len, fftbins=True)
    spec = np.fft.rfft(frames, n=cfg.n_fft, axis=1)
    return spec.real**2 + spec.imag**2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_matrix(cfg, sample_rate):
    """Triangular filters on the HTK Mel scale, shape (n_mels, n_fft // 2 + 1)."""
    fmax = sample_rate / 2.0 if cfg.fmax is None else cfg.fmax
    n_bins = cfg.n_fft // 2 + 1
    bin_hz = np.arange(n_bins) * sample_rate / cfg.n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(fmax), cfg.n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bin_hz[None, :] - lo) / (mid - lo)
    down = (hi - bin_hz[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def log_mel(audio, cfg=MelConfig()):
    power = stft_power(audio, cfg)
    fb = mel_matrix(cfg, audio.sample_rate)
    energies = power @ fb.T
    return FeatureMatrix(np.log(np.maximum(energies, cfg.floor)), RAW)


def cmn(f):
    """Subtract the per-utterance mean of every feature dimension."""
    x = f.frames - f.frames.mean(axis=0)
    state = CMN if f.state == RAW else f.state
    return FeatureMatrix(x, state)


def cvn(f):
    """Scale each column to unit population variance.

    Constant columns are left as they are, with a warning.
    """
    if f.state == RAW:
        raise DataError("cvn expects mean-normalized features; apply cmn first")
    std = f.frames.std(axis=0)
    const = std <= _CONST_STD
    if np.any(const):
        warnings.warn(f"cvn: {int(const.sum())} constant column(s) left unscaled", RuntimeWarning, stacklevel=2)
    scale = np.where(const, 1.0, std)
    return FeatureMatrix(f.frames / scale, CMN_CVN)


def normalize(f, mode=CMN_CVN):
    if mode == RAW:
        return f
    out = cmn(f)
    return cvn(out) if mode == CMN_CVN else out


def read_wav(path):
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1:
            raise FormatError(f"{path}: expected mono audio, got {wf.getnchannels()} channels")
        if wf.getsampwidth() != 2:
            raise FormatError(f"{path}: expected 16-bit PCM")
        rate = wf.getframerate()
        if rate != 16000:
            raise FormatError(f"{path}: sample rate {rate} Hz not supported (resample to 16000 Hz first)")
        raw = wf.readframes(wf.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioBuffer(samples, rate)


def write_wav(path, audio):
    pcm = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(audio.sample_rate)
        wf.writeframes(pcm.tobytes())


_CFB_MAGIC = b"CFB1"
_CFB_HEADER = struct.Struct("<4sIIB")


def dump_features(f):
    head = _CFB_HEADER.pack(_CFB_MAGIC, f.T, f.dim, _STATE_CODES[f.state])
    return head + f.frames.astype("<f4").tobytes()


def load_features(data):
    if len(data) < _CFB_HEADER.size:
        raise FormatError("truncated CFB1 header")
    magic, T, D, code = _CFB_HEADER.unpack_from(data)
    if magic != _CFB_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {_CFB_MAGIC!r}")
    if code not in _CODE_STATES:
        raise FormatError(f"unknown normalization state code {code}")
    body = data[_CFB_HEADER.size:]
    if len(body) != 4 * T * D:
        raise FormatError(f"CFB1 body has {len(body)} bytes, expected {4 * T * D}")
    frames = np.frombuffer(body, dtype="<f4").reshape(T, D).astype(np.float64)
    return FeatureMatrix(frames, _CODE_STATES[code])


def write_features(path, f):
    Path(path).write_bytes(dump_features(f))


def read_features(path):
    return load_features(Path(path).read_bytes())
