"""Spectral inputs: one full-signal amplitude spectrum plus amplitude spectrograms
at several DFT sizes, all cropped to the same frequency band."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import SAMPLE_RATE, AudioClip
from .errors import ClipTooShort, UsageError


@dataclass(frozen=True)
class SpectralConfig:
    dft_sizes: tuple[int, ...] = (256, 4096)
    spectrum_size: int = 160000  # waveform is cropped / zero-padded to this length before the DFT
    min_spectrum_samples: int = 16000
    low_hz: float = 200.0
    high_hz: float = 8000.0
    sample_rate: int = SAMPLE_RATE
    crop_frames: dict[int, int] | None = field(default=None, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "dft_sizes", tuple(int(n) for n in self.dft_sizes))
        if not 0 < self.low_hz < self.high_hz <= self.sample_rate / 2:
            raise UsageError(f"invalid band [{self.low_hz}, {self.high_hz}] Hz")
        if any(n < 2 or n % 2 for n in self.dft_sizes):
            raise UsageError("DFT sizes must be even and >= 2")
        if self.crop_frames is not None:
            object.__setattr__(self, "crop_frames", {int(k): int(v) for k, v in self.crop_frames.items()})

    @property
    def n_inputs(self) -> int:
        return 1 + len(self.dft_sizes)

    def hop(self, dft_size: int) -> int:
        return dft_size // 2


@dataclass
class FeatureSet:
    spectrum: np.ndarray
    spectrograms: list[np.ndarray]

    @property
    def inputs(self) -> list[np.ndarray]:
        return [self.spectrum, *self.spectrograms]


def band_bins(n_fft: int, cfg: SpectralConfig) -> tuple[int, int]:
    """Half-open index range of rfft bins whose center lies in [low_hz, high_hz]."""
    spacing = cfg.sample_rate / n_fft
    lo = math.ceil(cfg.low_hz / spacing - 1e-9)
    hi = math.floor(cfg.high_hz / spacing + 1e-9)
    return lo, min(hi, n_fft // 2) + 1


def n_frames(n_samples: int, dft_size: int) -> int:
    return (n_samples - dft_size) // (dft_size // 2) + 1


def _samples(clip) -> np.ndarray:
    x = clip.samples if isinstance(clip, AudioClip) else clip
    if x is None:
        raise UsageError("clip has no audio loaded")
    return np.asarray(x, dtype=np.float64)


def compute_spectrum(clip, cfg: SpectralConfig) -> np.ndarray:
    x = _samples(clip)
    if len(x) < cfg.min_spectrum_samples:
        raise ClipTooShort(f"{len(x)} samples, spectrum needs at least {cfg.min_spectrum_samples}")
    n = cfg.spectrum_size
    x = x[:n] if len(x) >= n else np.pad(x, (0, n - len(x)))
    lo, hi = band_bins(n, cfg)
    return np.abs(np.fft.rfft(x))[lo:hi].astype(np.float32)


def compute_spectrogram(clip, dft_size: int, cfg: SpectralConfig) -> np.ndarray:
    """Hann-windowed STFT magnitude, frames x band bins, hop = dft_size / 2, no padding."""
    x = _samples(clip)
    if len(x) < dft_size:
        raise ClipTooShort(f"{len(x)} samples < DFT size {dft_size}")
    hop = dft_size // 2
    frames = np.lib.stride_tricks.sliding_window_view(x, dft_size)[::hop]
    window = np.hanning(dft_size + 1)[:-1]  # periodic Hann
    lo, hi = band_bins(dft_size, cfg)
    return np.abs(np.fft.rfft(frames * window, axis=1))[:, lo:hi].astype(np.float32)


def extract_features(clip, cfg: SpectralConfig) -> FeatureSet:
    return FeatureSet(
        spectrum=compute_spectrum(clip, cfg),
        spectrograms=[compute_spectrogram(clip, n, cfg) for n in cfg.dft_sizes],
    )


def crop_time(spec: np.ndarray, frames: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Crop (random if `rng` given, else centered) or zero-pad along time to `frames`."""
    t = spec.shape[0]
    if t < frames:
        return np.pad(spec, ((0, frames - t), (0, 0)))
    start = int(rng.integers(0, t - frames + 1)) if rng is not None else (t - frames) // 2
    return spec[start : start + frames]


def stack_features(feats: list[FeatureSet], cfg: SpectralConfig) -> list[np.ndarray]:
    """Batch arrays per input; spectrograms are center-cropped when crop_frames is set."""
    out = [np.stack([f.spectrum for f in feats])]
    for k, n in enumerate(cfg.dft_sizes):
        mats = [f.spectrograms[k] for f in feats]
        frames = (cfg.crop_frames or {}).get(n)
        if frames is not None:
            mats = [crop_time(s, frames) for s in mats]
        elif len({s.shape for s in mats}) > 1:
            raise UsageError(f"spectrograms of DFT size {n} differ in length; set crop_frames")
        out.append(np.stack(mats))
    return out
