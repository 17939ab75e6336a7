"""Waveform algebra and the log-mel filterbank front-end.

Waveforms are 1-D float32 numpy arrays at ``SAMPLE_RATE``; amplitudes live
in [-1, 1].
"""

from __future__ import annotations

import struct
from functools import lru_cache
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
WINDOW_SAMPLES = 400  # 25 ms
SHIFT_SAMPLES = 160  # 10 ms
N_FFT = 512
N_MELS = 80
MEL_LOW_HZ = 20.0
MEL_HIGH_HZ = 8000.0
LOG_FLOOR = 1e-10


def _as_waveform(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float32)
    if w.ndim != 1:
        raise ValueError(f"waveform must be 1-D, got shape {w.shape}")
    return w


def scale(w, omega: float) -> np.ndarray:
    """Multiply every sample by ``omega`` (must be non-negative)."""
    if omega < 0:
        raise ValueError(f"scale factor must be >= 0, got {omega}")
    return _as_waveform(w) * np.float32(omega)


def mix(w1, omega1: float, w2, omega2: float) -> np.ndarray:
    """Return the superposition ``omega1 * w1 + omega2 * w2``.

    Both inputs must already have the same length; cropping and padding are
    the caller's job.
    """
    w1 = _as_waveform(w1)
    w2 = _as_waveform(w2)
    if w1.shape != w2.shape:
        raise ValueError(f"length mismatch: {w1.shape[0]} vs {w2.shape[0]} samples")
    if omega1 < 0 or omega2 < 0:
        raise ValueError(f"scale factors must be >= 0, got ({omega1}, {omega2})")
    out = w1.astype(np.float64) * omega1 + w2.astype(np.float64) * omega2
    return out.astype(np.float32)


def peak(w) -> float:
    w = _as_waveform(w)
    if w.size == 0:
        raise ValueError("peak of an empty waveform is undefined")
    return float(np.max(np.abs(w)))


def rms(w) -> float:
    w = _as_waveform(w)
    if w.size == 0:
        raise ValueError("rms of an empty waveform is undefined")
    return float(np.sqrt(np.mean(np.square(w, dtype=np.float64))))


def peak_normalize(w) -> np.ndarray:
    """Scale ``w`` so its peak is exactly 1."""
    p = peak(w)
    if p == 0.0:
        raise ValueError("cannot peak-normalize a silent waveform")
    return (_as_waveform(w).astype(np.float64) / p).astype(np.float32)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int = N_MELS, low_hz: float = MEL_LOW_HZ, high_hz: float = MEL_HIGH_HZ):
    edges = np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz), n_mels + 2)
    return mel_to_hz(edges[1:-1])


@lru_cache(maxsize=4)
def mel_filterbank(
    n_mels: int = N_MELS,
    n_fft: int = N_FFT,
    sample_rate: int = SAMPLE_RATE,
    low_hz: float = MEL_LOW_HZ,
    high_hz: float = MEL_HIGH_HZ,
) -> np.ndarray:
    """Triangular mel filters, shape ``(n_fft // 2 + 1, n_mels)``.

    Triangles are evaluated on the mel axis at each FFT bin frequency, peak
    weight 1 at the filter center.
    """
    mel_edges = np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz), n_mels + 2)
    bin_mel = hz_to_mel(np.arange(n_fft // 2 + 1) * sample_rate / n_fft)
    left = mel_edges[:-2][None, :]
    center = mel_edges[1:-1][None, :]
    right = mel_edges[2:][None, :]
    m = bin_mel[:, None]
    up = (m - left) / (center - left)
    down = (right - m) / (right - center)
    weights = np.maximum(0.0, np.minimum(up, down))
    weights.setflags(write=False)
    return weights


@lru_cache(maxsize=1)
def _window() -> np.ndarray:
    n = np.arange(WINDOW_SAMPLES)
    win = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / WINDOW_SAMPLES)
    win.setflags(write=False)
    return win


def num_frames(num_samples: int) -> int:
    if num_samples < WINDOW_SAMPLES:
        return 0
    return (num_samples - WINDOW_SAMPLES) // SHIFT_SAMPLES + 1


def fbank(w) -> np.ndarray:
    """80-bin log-mel power filterbank, shape ``(T, 80)``, float32.

    25 ms Hann windows every 10 ms, no pre-emphasis and no mean/variance
    normalization, so a volume change ``scale(w, a)`` shifts every
    unfloored entry by ``2 * log(a)``.
    """
    w = _as_waveform(w)
    if w.shape[0] < WINDOW_SAMPLES:
        raise ValueError(
            f"waveform has {w.shape[0]} samples, fewer than one {WINDOW_SAMPLES}-sample window; pad it first"
        )
    t = num_frames(w.shape[0])
    frames = np.lib.stride_tricks.sliding_window_view(w.astype(np.float64), WINDOW_SAMPLES)[::SHIFT_SAMPLES][:t]
    spec = np.fft.rfft(frames * _window(), n=N_FFT, axis=1)
    power = spec.real**2 + spec.imag**2
    energies = power @ mel_filterbank()
    return np.log(np.maximum(energies, LOG_FLOOR)).astype(np.float32)


def fbank_batch(waves) -> np.ndarray:
    return np.stack([fbank(w) for w in waves])


# Feature cache layout: int32 LE T, int32 LE n_bins, then T*n_bins float32 LE, row-major.
_HEADER = struct.Struct("<ii")


def write_feature_cache(path, feats: np.ndarray) -> None:
    feats = np.asarray(feats)
    if feats.ndim != 2:
        raise ValueError(f"feature map must be 2-D, got shape {feats.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(*feats.shape))
        fh.write(np.ascontiguousarray(feats, dtype="<f4").tobytes())


def read_feature_cache(path) -> np.ndarray:
    data = Path(path).read_bytes()
    t, n_bins = _HEADER.unpack_from(data)
    body = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    if body.size != t * n_bins:
        raise ValueError(f"{path}: header says {t}x{n_bins} but body has {body.size} values")
    return body.reshape(t, n_bins).astype(np.float32)
