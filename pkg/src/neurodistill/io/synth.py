"""Synthetic ECoG-like windows and a wide synthetic teacher.

Each window is white Gaussian noise plus, for its class, a band-limited
sinusoid burst on that class's channels. The teacher is a two-layer ReLU
network on oracle band-power features; its hidden layer is the exported
embedding.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..distill import TeacherExport
from ..errors import ConfigError
from ..numeric import make_rng
from ..optim import AdamState, adam_step, cross_entropy
from .formats import Dataset


@dataclass
class ClassSpec:
    band_hz: tuple  # (low, high); equal ends give a pure tone
    active_channels: Sequence[int]
    amplitude: float


@dataclass
class SynthSpec:
    n_windows: int
    T: int
    C: int
    fs: float
    classes: list
    noise_std: float = 1.0
    class_priors: Optional[Sequence[float]] = None
    seed: int = 42
    task: str = "classification"

    def priors(self) -> np.ndarray:
        k = len(self.classes)
        p = np.full(k, 1.0 / k) if self.class_priors is None else np.asarray(self.class_priors, float)
        if p.shape != (k,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ConfigError("class priors must be nonnegative, one per class, and sum to 1")
        return p

    def validate(self):
        if self.n_windows < 0 or self.T < 1 or self.C < 1 or self.fs <= 0:
            raise ConfigError("invalid window geometry")
        for cls in self.classes:
            lo, hi = cls.band_hz
            if not 0 < lo <= hi < self.fs / 2:
                raise ConfigError(f"band {cls.band_hz} must lie inside (0, {self.fs / 2}) Hz")
            if any(not 0 <= ch < self.C for ch in cls.active_channels):
                raise ConfigError(f"active channel out of range for C={self.C}")
        self.priors()


def default_spec(n_windows=400, T=500, C=4, fs=500.0, n_classes=4, noise_std=1.0,
                 class_priors=None, seed=42, task="classification") -> SynthSpec:
    """A ready-made spec: class k has a burst in its own band on its own channels.

    Class 0 is a low-amplitude "rest" class.
    """
    bands = [(8.0, 12.0), (25.0, 35.0), (55.0, 65.0), (75.0, 90.0), (95.0, 110.0), (140.0, 160.0)]
    classes = []
    for k in range(n_classes):
        chans = sorted({k % C, (k + 1) % C})
        amp = 0.3 if k == 0 else 1.2
        classes.append(ClassSpec(bands[k % len(bands)], chans, amp))
    return SynthSpec(n_windows, T, C, fs, classes, noise_std, class_priors, seed, task)


def _burst_envelope(T: int, rng: np.random.Generator) -> np.ndarray:
    length = int(rng.uniform(0.4, 0.8) * T)
    start = int(rng.integers(0, T - length + 1))
    ramp = max(length // 5, 1)
    env = np.zeros(T)
    env[start:start + length] = 1.0
    edge = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
    env[start:start + ramp] *= edge
    env[start + length - ramp:start + length] *= edge[::-1]
    return env


def gen_synthetic(spec: SynthSpec) -> Dataset:
    spec.validate()
    rng = make_rng(spec.seed)
    k = len(spec.classes)
    labels = rng.choice(k, size=spec.n_windows, p=spec.priors())
    t = np.arange(spec.T) / spec.fs
    windows = spec.noise_std * rng.standard_normal((spec.n_windows, spec.T, spec.C))
    targets = np.zeros(spec.n_windows)
    for i, y in enumerate(labels):
        cls = spec.classes[y]
        gain = rng.uniform(0.7, 1.3)
        targets[i] = gain * cls.amplitude
        env = _burst_envelope(spec.T, rng)
        for ch in cls.active_channels:
            f = rng.uniform(*cls.band_hz)
            phase = rng.uniform(0, 2 * np.pi)
            windows[i, :, ch] += gain * cls.amplitude * env * np.sin(2 * np.pi * f * t + phase)
    if spec.task == "regression":
        return Dataset(windows, spec.fs, "regression", targets)
    return Dataset(windows, spec.fs, "classification", labels.astype(np.int64))


def band_power_features(windows, fs: float, bands: Sequence[tuple]) -> np.ndarray:
    """Log band power per (channel, band) from the periodogram."""
    windows = np.asarray(windows, dtype=np.float64)
    spec = np.abs(np.fft.rfft(windows, axis=1)) ** 2
    freqs = np.fft.rfftfreq(windows.shape[1], 1.0 / fs)
    feats = []
    for lo, hi in bands:
        sel = (freqs >= lo - 2.0) & (freqs <= hi + 2.0)
        feats.append(np.log(spec[:, sel, :].mean(axis=1) + 1e-12))
    return np.concatenate(feats, axis=1)


@dataclass
class SyntheticTeacher:
    bands: list
    fs: float
    mu: np.ndarray
    sd: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    train_accuracy: float = float("nan")
    history: list = field(default_factory=list)

    def embed(self, windows) -> np.ndarray:
        x = (band_power_features(windows, self.fs, self.bands) - self.mu) / self.sd
        return np.maximum(x @ self.w1 + self.b1, 0.0)

    def export(self, windows, labels=None) -> TeacherExport:
        z = self.embed(windows)
        return TeacherExport(z, self.w2, self.b2, z @ self.w2 + self.b2, labels)


def train_synthetic_teacher(ds: Dataset, spec: SynthSpec, d_t: int = 128, seed: int = 0,
                            max_epochs: int = 400, target_accuracy: float = 0.99,
                            lr: float = 3e-3) -> SyntheticTeacher:
    """Two-layer ReLU network on band-power features, trained until it fits."""
    rng = make_rng(seed)
    bands = sorted({tuple(c.band_hz) for c in spec.classes})
    x = band_power_features(ds.windows, ds.sample_rate_hz, bands)
    mu, sd = x.mean(0), x.std(0) + 1e-8
    x = (x - mu) / sd
    y = np.asarray(ds.labels, dtype=np.int64)
    k = len(spec.classes)
    p = {"W_1": rng.standard_normal((x.shape[1], d_t)) * np.sqrt(2.0 / x.shape[1]),
         "b_1": np.zeros(d_t),
         "W_2": rng.standard_normal((d_t, k)) / np.sqrt(d_t),
         "b_2": np.zeros(k)}
    state = AdamState(lr=lr)
    acc, history = 0.0, []
    for epoch in range(max_epochs):
        h_pre = x @ p["W_1"] + p["b_1"]
        h = np.maximum(h_pre, 0)
        logits = h @ p["W_2"] + p["b_2"]
        loss, g = cross_entropy(logits, y)
        acc = float(np.mean(logits.argmax(1) == y))
        history.append(loss)
        if acc >= target_accuracy and epoch >= 50:
            break
        dh = (g @ p["W_2"].T) * (h_pre > 0)
        grads = {"W_2": h.T @ g, "b_2": g.sum(0), "W_1": x.T @ dh, "b_1": dh.sum(0)}
        p, state = adam_step(state, p, grads)
    return SyntheticTeacher(bands, ds.sample_rate_hz, mu, sd, p["W_1"], p["b_1"], p["W_2"], p["b_2"],
                            acc, history)
