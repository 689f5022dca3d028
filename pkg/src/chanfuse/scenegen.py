"""
Synthetic multichannel scenes with known per-channel quality.

A scene is ``channel_c = gain_c * clean + noise_c`` with white Gaussian
noise, either on log-Mel features directly (``feature`` mode) or on the
waveform before feature extraction (``signal`` mode).  Everything is
reproducible from the seed.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from chanfuse.chansel import MultichannelUtterance
from chanfuse.errors import DataError, FormatError
from chanfuse.featkit import AudioBuffer, FeatureMatrix, MelConfig, log_mel, read_features, write_features
from chanfuse.gmm import GmmModel

FEATURE, SIGNAL = "feature", "signal"
GMM_SAMPLES, TONES = "gmm_samples", "tones+noise"

FRAME_RATE = 100  # frames per second at a 10 ms hop


@dataclass(frozen=True)
class SceneSpec:
    C: int = 6
    gains: tuple = (1.0,) * 6
    sigmas: tuple = (0.0,) * 6
    mode: str = FEATURE
    degraded_channel: int | None = None
    degrade_factor: float = 10.0
    length: float = 7.0
    seed: int = 0

    def __post_init__(self):
        if self.C < 1:
            raise DataError("scene needs at least one channel")
        if len(self.gains) != self.C or len(self.sigmas) != self.C:
            raise DataError(f"need {self.C} gains and sigmas, got {len(self.gains)} and {len(self.sigmas)}")
        if any(g <= 0 for g in self.gains):
            raise DataError("gains must be positive")
        if any(s < 0 for s in self.sigmas):
            raise DataError("noise sigmas must be non-negative")
        if self.mode not in (FEATURE, SIGNAL):
            raise DataError(f"unknown scene mode {self.mode!r}")
        if self.degraded_channel is not None and not 1 <= self.degraded_channel <= self.C:
            raise DataError(f"degraded channel {self.degraded_channel} outside 1..{self.C}")
        if self.length <= 0:
            raise DataError("length must be positive")

    def effective_sigmas(self):
        s = np.array(self.sigmas, dtype=np.float64)
        if self.degraded_channel is not None:
            s[self.degraded_channel - 1] *= self.degrade_factor
        return s


@dataclass(frozen=True)
class SceneMeta:
    snr_db: tuple
    oracle: int
    clean: FeatureMatrix = field(repr=False)


def reference_model(seed=0, M=8, D=40, spread=1.5, var_range=(0.1, 0.4)):
    """A random diagonal GMM used as the generator of clean feature frames."""
    rng = np.random.default_rng(seed)
    return GmmModel(
        rng.dirichlet(np.full(M, 5.0)),
        rng.normal(scale=spread, size=(M, D)),
        rng.uniform(*var_range, size=(M, D)),
    )


def model_power(model):
    """Per-dimension variance of the GMM, averaged over dimensions."""
    mean = model.weights @ model.means
    second = model.weights @ (model.means**2 + model.variances)
    return float(np.mean(second - mean**2))


def sample_gmm(model, n, rng, stickiness=0.0):
    """Draw n frames; the component persists with probability ``stickiness``.

    Each frame's marginal distribution is the GMM itself for any stickiness.
    """
    comps = rng.choice(model.M, size=n, p=model.weights)
    if stickiness > 0:
        stay = rng.random(n) < stickiness
        for t in range(1, n):
            if stay[t]:
                comps[t] = comps[t - 1]
    noise = rng.standard_normal((n, model.dim))
    return model.means[comps] + noise * np.sqrt(model.variances[comps])


def _tone_period(f0_period, sample_rate):
    # envelope period is a whole number of tone periods so the product stays periodic
    return f0_period * max(1, round(0.25 * sample_rate / f0_period))


def synth_clean(seed, length, kind=GMM_SAMPLES, model=None, stickiness=0.0, sigma=0.0, sample_rate=16000):
    """Clean material of ``length`` seconds.

    ``gmm_samples`` returns a FeatureMatrix drawn from ``model`` (default:
    :func:`reference_model`).  ``tones+noise`` returns an AudioBuffer holding a
    harmonic tone under a periodic envelope plus white noise of std ``sigma``.
    """
    if length <= 0:
        raise DataError("length must be positive")
    rng = np.random.default_rng(seed)
    if kind == GMM_SAMPLES:
        model = model if model is not None else reference_model()
        n = max(1, int(round(length * FRAME_RATE)))
        return FeatureMatrix(sample_gmm(model, n, rng, stickiness))
    if kind != TONES:
        raise DataError(f"unknown clean kind {kind!r}")
    f0_period = int(rng.integers(40, 160))  # 100-400 Hz at 16 kHz
    period = _tone_period(f0_period, sample_rate)
    n = np.arange(period)
    amps = rng.uniform(0.2, 1.0, size=8) / np.arange(1, 9)
    phases = rng.uniform(0, 2 * np.pi, size=8)
    tone = sum(a * np.sin(2 * np.pi * (h + 1) * n / f0_period + p) for h, (a, p) in enumerate(zip(amps, phases)))
    env = 0.55 - 0.45 * np.cos(2 * np.pi * n / period)
    one = 0.3 * tone * env / np.max(np.abs(tone))
    total = int(round(length * sample_rate))
    x = np.tile(one, total // period + 1)[:total]
    if sigma > 0:
        x = x + sigma * rng.standard_normal(total)
    return AudioBuffer(x, sample_rate)


def tone_period(seed, sample_rate=16000):
    """Exact period in samples of the noiseless ``tones+noise`` waveform for ``seed``."""
    rng = np.random.default_rng(seed)
    return _tone_period(int(rng.integers(40, 160)), sample_rate)


def _snr_db(signal_power, noise_power):
    if noise_power == 0:
        return math.inf
    return 10.0 * math.log10(signal_power / noise_power)


def _oracle(snr):
    return int(np.argmax(snr)) + 1


def make_scene(clean, spec, mel_cfg=MelConfig()):
    """Mix ``clean`` into ``spec.C`` channels.

    Returns the (un-normalized) channels and the ground truth: realised
    per-channel SNR in dB (``inf`` for a noiseless channel), the id of the
    highest-SNR channel, and the clean reference features.
    """
    sigmas = spec.effective_sigmas()
    if spec.mode == FEATURE:
        if not isinstance(clean, FeatureMatrix):
            raise DataError("feature-mode scenes need clean features")
        x = clean.frames
        power = float(np.mean((x - x.mean(axis=0)) ** 2))
        ref = clean
    else:
        if not isinstance(clean, AudioBuffer):
            raise DataError("signal-mode scenes need clean audio")
        x = clean.samples
        power = float(np.mean(x * x))
        ref = log_mel(clean, mel_cfg)
    channels, snr = [], []
    for c in range(spec.C):
        rng = np.random.default_rng([spec.seed, c + 1])
        noise = sigmas[c] * rng.standard_normal(x.shape)
        mixed = spec.gains[c] * x + noise
        snr.append(_snr_db(spec.gains[c] ** 2 * power, float(np.mean(noise * noise))))
        if spec.mode == FEATURE:
            channels.append(FeatureMatrix(mixed))
        else:
            channels.append(log_mel(AudioBuffer(mixed, clean.sample_rate), mel_cfg))
    return MultichannelUtterance(tuple(channels)), SceneMeta(tuple(snr), _oracle(snr), ref)


def suite_specs(n, seed=0, C=6, degraded_channel=2, snr_range=(0.0, 10.0), gap_range=(6.0, 12.0),
                gain_range=(0.5, 2.0), clean_power=1.0, length=7.0):
    """Scene specs with one best channel, every other channel >= ``gap_range[0]`` dB worse,
    and one degraded channel whose noise std is ``degrade_factor`` times larger."""
    rng = np.random.default_rng(seed)
    specs = []
    for k in range(n):
        gains = rng.uniform(*gain_range, size=C)
        top = rng.uniform(*snr_range)
        snr = top - rng.uniform(*gap_range, size=C)
        candidates = [c for c in range(C) if c + 1 != degraded_channel]
        snr[int(rng.choice(candidates))] = top
        sigmas = gains * math.sqrt(clean_power) * 10.0 ** (-snr / 20.0)
        specs.append(SceneSpec(C, tuple(gains.round(6)), tuple(sigmas.round(6)), FEATURE,
                               degraded_channel, 10.0, length, seed * 100003 + k))
    return specs


def parse_manifest_line(line):
    """Parse ``seed C gains sigmas degraded length mode``; lists are comma-separated,
    ``degraded`` is ``-`` or ``0`` for none."""
    parts = line.split()
    if len(parts) != 7:
        raise FormatError(f"manifest line needs 7 fields, got {len(parts)}: {line!r}")
    try:
        seed, C = int(parts[0]), int(parts[1])
        gains = tuple(float(v) for v in parts[2].split(","))
        sigmas = tuple(float(v) for v in parts[3].split(","))
        degraded = None if parts[4] in ("-", "0") else int(parts[4])
        length = float(parts[5])
    except ValueError as exc:
        raise FormatError(f"bad manifest line {line!r}: {exc}") from exc
    return SceneSpec(C, gains, sigmas, parts[6], degraded, 10.0, length, seed)


def format_manifest_line(spec):
    nums = lambda xs: ",".join(repr(float(v)) for v in xs)  # noqa: E731
    degraded = "-" if spec.degraded_channel is None else str(spec.degraded_channel)
    return f"{spec.seed} {spec.C} {nums(spec.gains)} {nums(spec.sigmas)} {degraded} {spec.length!r} {spec.mode}"


def read_manifest(path):
    specs = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            specs.append(parse_manifest_line(line))
    return specs


def write_manifest(path, specs):
    Path(path).write_text("".join(format_manifest_line(s) + "\n" for s in specs))


def _fmt(v):
    return "inf" if v == math.inf else repr(float(v))


def write_scene(directory, u, meta, spec=None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for c, ch in enumerate(u.channels, 1):
        write_features(d / f"ch{c}.cfb", ch)
    write_features(d / "clean.cfb", meta.clean)
    lines = [f"C={u.C}", f"T={u.T}", f"D={u.dim}", f"oracle={meta.oracle}",
             "snr_db=" + ",".join(_fmt(s) for s in meta.snr_db)]
    if spec is not None:
        lines += [f"seed={spec.seed}", f"mode={spec.mode}",
                  "gains=" + ",".join(_fmt(g) for g in spec.gains),
                  "sigmas=" + ",".join(_fmt(s) for s in spec.sigmas),
                  f"degraded={spec.degraded_channel or '-'}", f"length={spec.length!r}"]
    (d / "meta.txt").write_text("\n".join(lines) + "\n")


def read_meta(path):
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def read_scene(directory):
    d = Path(directory)
    try:
        meta = read_meta(d / "meta.txt")
        C = int(meta["C"])
        u = MultichannelUtterance(tuple(read_features(d / f"ch{c}.cfb") for c in range(1, C + 1)))
        snr = tuple(float(s) for s in meta["snr_db"].split(","))
        return u, SceneMeta(snr, int(meta["oracle"]), read_features(d / "clean.cfb"))
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"cannot read scene {d}: {exc}") from exc
