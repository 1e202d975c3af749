"""Morlet CWT feature extraction and tokenization of raw multichannel windows."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.signal import fftconvolve

from .errors import ConfigError, DegenerateInputError, DimensionError

BANK_PRESETS = {
    "human_c": (10.0, 30.0, 50.0, 60.0, 70.0, 80.0, 90.0, 120.0, 150.0, 200.0),
    "monkey_r": (10.0, 30.0, 60.0, 80.0, 100.0),
    "human_d": (10.0, 20.0, 40.0, 60.0, 80.0, 100.0, 125.0),
}

STD_FLOOR = 1e-12


@dataclass
class SignalWindow:
    samples: np.ndarray  # (T, C)
    sample_rate_hz: float
    label: Optional[float] = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or min(self.samples.shape) < 1:
            raise DimensionError(f"window must be T x C with T, C >= 1, got {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise DegenerateInputError("window contains non-finite samples")


@dataclass
class MorletBank:
    center_freqs_hz: tuple
    n_cycles: float
    kernels: list  # complex128 arrays of odd length
    sample_rate_hz: float

    @property
    def n_freqs(self) -> int:
        return len(self.kernels)


def zscore(window: SignalWindow) -> SignalWindow:
    """Per-channel z-score using the population (1/T) standard deviation."""
    x = window.samples
    if x.shape[0] < 2:
        raise DegenerateInputError("z-scoring needs at least 2 samples")
    centered = x - x.mean(axis=0)
    std = centered.std(axis=0)
    out = np.where(std > STD_FLOOR, centered / np.maximum(std, STD_FLOOR), 0.0)
    return SignalWindow(out, window.sample_rate_hz, window.label)


def morlet_half_length(freq: float, fs: float, n_cycles: float) -> int:
    sigma = n_cycles / (2.0 * np.pi * freq)
    return int(np.floor(4.0 * sigma * fs))


def build_morlet_bank(freqs: Sequence[float], fs: float, n_cycles: float = 7.0) -> MorletBank:
    freqs = tuple(float(f) for f in freqs)
    if not freqs:
        raise ConfigError("a wavelet bank needs at least one frequency")
    kernels = []
    for f in freqs:
        if not 0.0 < f < fs / 2.0:
            raise ConfigError(f"center frequency {f} Hz outside (0, {fs / 2}) Hz")
        sigma = n_cycles / (2.0 * np.pi * f)
        half = morlet_half_length(f, fs, n_cycles)
        t = np.arange(-half, half + 1) / fs
        psi = np.exp(2j * np.pi * f * t) * np.exp(-(t**2) / (2.0 * sigma**2))
        kernels.append(psi / np.linalg.norm(psi))
    return MorletBank(freqs, float(n_cycles), kernels, float(fs))


def preset_bank(name: str, fs: float, n_cycles: float = 7.0) -> MorletBank:
    try:
        freqs = BANK_PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown wavelet bank preset {name!r}; choose from {sorted(BANK_PRESETS)}") from None
    return build_morlet_bank(freqs, fs, n_cycles)


def same_conv(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Zero-padded convolution along axis 0 keeping the input length.

    Works for kernels longer than the signal as well.
    """
    t = x.shape[0]
    half = (len(kernel) - 1) // 2
    k = kernel.reshape((-1,) + (1,) * (x.ndim - 1))
    full = fftconvolve(x, k, axes=0)
    return full[half:half + t]


def cwt(window: SignalWindow, bank: MorletBank) -> np.ndarray:
    """Wavelet magnitudes, shape (N, T, C)."""
    x = window.samples
    out = np.empty((bank.n_freqs,) + x.shape)
    for n, psi in enumerate(bank.kernels):
        out[n] = np.abs(same_conv(x, psi))
    return out


def pool_bounds(t: int, n_tokens: int) -> list:
    """Contiguous bin edges; the last bin absorbs the remainder."""
    if n_tokens < 1 or n_tokens > t:
        raise ConfigError(f"cannot split {t} samples into {n_tokens} tokens")
    size = t // n_tokens
    edges = [(i * size, (i + 1) * size) for i in range(n_tokens)]
    edges[-1] = (edges[-1][0], t)
    return edges


def pool_and_tokenize(spectro: np.ndarray, n_tokens: int) -> np.ndarray:
    """Average-pool (N, T, C) magnitudes into L tokens of width C*N.

    Token features are channel-major, frequency-minor: column c*N + n.
    """
    n, t, c = spectro.shape
    pooled = np.stack([spectro[:, a:b, :].mean(axis=1) for a, b in pool_bounds(t, n_tokens)])
    # pooled: (L, N, C) -> (L, C, N)
    return np.ascontiguousarray(pooled.transpose(0, 2, 1).reshape(n_tokens, c * n))


def extract_tokens(window: SignalWindow, bank: MorletBank, n_tokens: int) -> np.ndarray:
    return pool_and_tokenize(cwt(zscore(window), bank), n_tokens)


def extract_batch(windows: np.ndarray, fs: float, bank: MorletBank, n_tokens: int,
                  workers: Optional[int] = None) -> np.ndarray:
    """Tokenize a (n, T, C) stack of windows; output order follows input order."""
    windows = np.asarray(windows, dtype=np.float64)
    if workers is None:
        workers = int(os.environ.get("BD_THREADS", "1") or 1)

    def one(x):
        return extract_tokens(SignalWindow(x, fs), bank, n_tokens)

    if workers <= 1 or len(windows) < 2:
        return np.stack([one(x) for x in windows])
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return np.stack(list(pool.map(one, windows)))
