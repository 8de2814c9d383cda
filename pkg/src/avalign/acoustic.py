"""Waveform ingestion, additive noise at a target SNR, and log-mel + delta features.

Framing at 22050 Hz: 551-sample Hann windows (25 ms), 220-sample hop (10 ms),
1024-point FFT, 30 HTK-mel triangular bands between 80 and 11025 Hz, then first
and second order regression deltas for a 90-dimensional frame.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

SAMPLE_RATE = 22050
WIN_LENGTH = 551
HOP_LENGTH = 220
N_FFT = 1024
N_MELS = 30
FMIN, FMAX = 80.0, 11025.0
LOG_FLOOR = 1e-10
DELTA_WIDTH = 2
FEATURE_DIM = 3 * N_MELS
NOISE_KINDS = ("none", "white_gaussian", "cafeteria", "street")


class AudioDataError(ValueError):
    """Raised for empty, too-short or otherwise unusable audio."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "none"
    snr_db: float = float("inf")
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; choose from {NOISE_KINDS}")
        if self.kind != "none" and not np.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite when a noise kind is set")


# ---------------------------------------------------------------------------
# I/O


def read_wav(path) -> Waveform:
    """Read mono 16-bit PCM or 32-bit float WAV into [-1, 1] samples."""
    try:
        rate, data = wavfile.read(path)
    except (ValueError, OSError) as exc:
        raise AudioDataError(f"{path}: unreadable WAV ({exc})") from exc
    if data.ndim != 1:
        raise AudioDataError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise AudioDataError(f"{path}: unsupported sample type {data.dtype}")
    if samples.size == 0:
        raise AudioDataError(f"{path}: empty WAV")
    return Waveform(samples, int(rate))


def write_wav(path, w: Waveform, pcm16: bool = True) -> None:
    x = np.clip(w.samples, -1.0, 1.0)
    if pcm16:
        wavfile.write(path, w.sample_rate, np.round(x * 32767).astype(np.int16))
    else:
        wavfile.write(path, w.sample_rate, x.astype(np.float32))


def write_feature_cache(path, feats: np.ndarray) -> None:
    """Header ``int32 T, int32 dim`` then little-endian float32 values."""
    feats = np.asarray(feats, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<ii", *feats.shape))
        fh.write(feats.tobytes())


def read_feature_cache(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    T, dim = struct.unpack_from("<ii", buf, 0)
    return np.frombuffer(buf, dtype="<f4", count=T * dim, offset=8).reshape(T, dim).astype(np.float64)


# ---------------------------------------------------------------------------
# resampling and mixing


def resample(w: Waveform, target_hz: int = SAMPLE_RATE) -> Waveform:
    if w.sample_rate <= 0:
        raise AudioDataError(f"invalid sample rate {w.sample_rate}")
    if w.samples.size == 0:
        raise AudioDataError("cannot resample an empty waveform")
    if w.sample_rate == target_hz:
        return Waveform(w.samples.copy(), target_hz)
    g = np.gcd(int(w.sample_rate), int(target_hz))
    y = signal.resample_poly(w.samples, target_hz // g, w.sample_rate // g)
    return Waveform(y, target_hz)


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def fit_length(noise: np.ndarray, n: int) -> np.ndarray:
    """Loop or truncate ``noise`` to exactly ``n`` samples."""
    reps = int(np.ceil(n / noise.size))
    return np.tile(noise, reps)[:n]


def noise_gain(p_signal: float, p_noise: float, snr_db: float) -> float:
    return float(np.sqrt(p_signal / (p_noise * 10.0 ** (snr_db / 10.0))))


def mix_at_snr(sig: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """Return ``signal + k * noise`` whose whole-utterance SNR equals ``snr_db``."""
    if np.isinf(snr_db) and snr_db > 0:
        return Waveform(sig.samples.copy(), sig.sample_rate)
    if noise.sample_rate != sig.sample_rate:
        raise AudioDataError(
            f"sample rates differ: signal {sig.sample_rate} Hz, noise {noise.sample_rate} Hz"
        )
    n = fit_length(noise.samples, sig.samples.size)
    pn = power(n)
    if pn <= 0.0:
        raise AudioDataError("noise has zero power; cannot reach a finite SNR")
    k = noise_gain(power(sig.samples), pn, snr_db)
    return Waveform(sig.samples + k * n, sig.sample_rate)


def measured_snr(clean: np.ndarray, mixed: np.ndarray) -> float:
    return 10.0 * np.log10(power(clean) / power(mixed - clean))


# ---------------------------------------------------------------------------
# synthetic noise sources


def white_gaussian_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(n)


def babble_noise(n: int, rng: np.random.Generator, sr: int = SAMPLE_RATE, voices: int = 20) -> np.ndarray:
    """Cafeteria-like babble: amplitude-modulated tones in the speech band."""
    t = np.arange(n) / sr
    out = np.zeros(n)
    for _ in range(voices):
        f0 = rng.uniform(100.0, 3500.0)
        fm = rng.uniform(2.0, 8.0)
        env = 0.5 * (1.0 + np.sin(2 * np.pi * fm * t + rng.uniform(0, 2 * np.pi)))
        out += env * np.sin(2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi))
    return out


def pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.size, dtype=np.float64)
    f[0] = 1.0
    return np.fft.irfft(spec / np.sqrt(f), n)


def street_noise(n: int, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Street-like noise: pink background plus sparse decaying transient bursts."""
    base = pink_noise(n, rng)
    base /= np.sqrt(power(base)) + 1e-12
    n_bursts = max(1, int(n / sr * 2))
    for _ in range(n_bursts):
        start = int(rng.integers(0, n))
        length = min(n - start, int(sr * rng.uniform(0.05, 0.3)))
        decay = np.exp(-np.arange(length) / (0.3 * length + 1))
        base[start:start + length] += 3.0 * decay * rng.standard_normal(length)
    return base


def make_noise(kind: str, n: int, seed: int, sr: int = SAMPLE_RATE) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if kind == "white_gaussian":
        return white_gaussian_noise(n, rng)
    if kind == "cafeteria":
        return babble_noise(n, rng, sr)
    if kind == "street":
        return street_noise(n, rng, sr)
    raise ValueError(f"no generator for noise kind {kind!r}")


def apply_noise(w: Waveform, spec: NoiseSpec, noise: Waveform | None = None) -> Waveform:
    """Corrupt ``w`` per ``spec``; a real noise recording may be passed as ``noise``."""
    if spec.kind == "none":
        return Waveform(w.samples.copy(), w.sample_rate)
    if noise is None:
        noise = Waveform(make_noise(spec.kind, w.samples.size, spec.seed, w.sample_rate), w.sample_rate)
    return mix_at_snr(w, noise, spec.snr_db)


# ---------------------------------------------------------------------------
# features


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=4)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sr: int = SAMPLE_RATE,
                   fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """Triangular HTK-mel filters, shape ``(n_mels, n_fft // 2 + 1)``, unit peak."""
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def mel_centers(n_mels: int = N_MELS) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(FMIN), hz_to_mel(FMAX), n_mels + 2))[1:-1]


def num_frames(n_samples: int) -> int:
    return 1 + (n_samples - WIN_LENGTH) // HOP_LENGTH


def frame_signal(x: np.ndarray) -> np.ndarray:
    if x.size < WIN_LENGTH:
        raise AudioDataError(f"utterance has {x.size} samples, shorter than one {WIN_LENGTH}-sample window")
    T = num_frames(x.size)
    idx = np.arange(WIN_LENGTH)[None, :] + HOP_LENGTH * np.arange(T)[:, None]
    return x[idx]


def log_mel_spectrogram(w: Waveform) -> np.ndarray:
    """``(T, 30)`` log mel energies of the magnitude spectrum (floored at 1e-10)."""
    if w.sample_rate != SAMPLE_RATE:
        raise AudioDataError(f"expected {SAMPLE_RATE} Hz audio, got {w.sample_rate} Hz; resample first")
    frames = frame_signal(w.samples) * signal.windows.hann(WIN_LENGTH, sym=False)
    mag = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1))
    return np.log(np.maximum(mag, LOG_FLOOR) @ mel_filterbank().T)


def deltas(x: np.ndarray, width: int = DELTA_WIDTH) -> np.ndarray:
    """Regression deltas over +-``width`` frames with edge replication."""
    T = x.shape[0]
    padded = np.pad(x, ((width, width), (0, 0)), mode="edge")
    denom = 2.0 * sum(n * n for n in range(1, width + 1))
    out = np.zeros_like(x, dtype=np.float64)
    for n in range(1, width + 1):
        out += n * (padded[width + n:width + n + T] - padded[width - n:width - n + T])
    return out / denom


def append_deltas(mel: np.ndarray) -> np.ndarray:
    """Stack ``[mel | delta | delta-delta]`` into ``(T, 90)``."""
    d1 = deltas(mel)
    return np.concatenate([mel, d1, deltas(d1)], axis=1)


def audio_features(w: Waveform) -> np.ndarray:
    """Resample, then log-mel + deltas: the full acoustic front-end."""
    return append_deltas(log_mel_spectrogram(resample(w, SAMPLE_RATE)))


@dataclass
class FeatureNormalizer:
    """Global per-dimension mean/variance normalisation fitted on training data."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, sequences) -> "FeatureNormalizer":
        stacked = np.concatenate(list(sequences), axis=0)
        return cls(stacked.mean(axis=0), np.maximum(stacked.std(axis=0), 1e-5))

    def __call__(self, feats: np.ndarray) -> np.ndarray:
        return (feats - self.mean) / self.std
