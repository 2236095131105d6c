"""Time-frequency front-end: sqrt-Hann STFT/iSTFT, mel filterbanks and WAV I/O.

All transforms are pure functions of numpy arrays. Frames are centered:
the signal is reflect-padded by half a window on both sides, so frame ``t``
covers samples ``[t*hop - win/2, t*hop + win/2)`` of the original signal.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 16000


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"AudioClip expects mono samples, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(samples)):
            raise ValueError("AudioClip samples must be finite")
        object.__setattr__(self, "samples", samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True)
class StftConfig:
    window_ms: float = 32.0
    hop_ms: float = 8.0
    sample_rate: int = SAMPLE_RATE
    window_shape: str = "sqrt_hann"

    def __post_init__(self):
        if self.window_shape != "sqrt_hann":
            raise ValueError(f"unsupported window shape {self.window_shape!r}")
        win, hop = self.win_length, self.hop_length
        if win < 2 or hop < 1:
            raise ValueError("window and hop must span at least a few samples")
        if win % hop:
            raise ValueError(f"hop ({hop} samples) must divide the window ({win} samples)")
        if abs(win * 1000.0 / self.sample_rate - self.window_ms) > 1e-9:
            raise ValueError("window_ms does not map to an integer number of samples")
        if abs(hop * 1000.0 / self.sample_rate - self.hop_ms) > 1e-9:
            raise ValueError("hop_ms does not map to an integer number of samples")

    @property
    def win_length(self) -> int:
        return int(round(self.window_ms * self.sample_rate / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000.0))

    @property
    def fft_size(self) -> int:
        return self.win_length

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def overlap(self) -> float:
        return 1.0 - self.hop_length / self.win_length

    def n_frames(self, n_samples: int) -> int:
        return 1 + n_samples // self.hop_length

    def frame_spans(self, n_frames: int) -> np.ndarray:
        """Sample span ``[start, stop)`` of every frame's window in original coordinates."""
        starts = np.arange(n_frames) * self.hop_length - self.win_length // 2
        return np.stack([starts, starts + self.win_length], axis=1)

    def to_dict(self) -> dict:
        return {"window_ms": self.window_ms, "hop_ms": self.hop_ms,
                "sample_rate": self.sample_rate, "window_shape": self.window_shape}


@dataclass(frozen=True)
class Spectrogram:
    values: np.ndarray
    config: StftConfig
    kind: str = "complex"
    n_samples: int | None = field(default=None, compare=False)

    KINDS = ("complex", "magnitude", "log_magnitude", "mel_magnitude")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown spectrogram kind {self.kind!r}")
        if self.kind in ("magnitude", "mel_magnitude") and np.any(self.values < 0):
            raise ValueError("magnitude spectrograms must be nonnegative")

    @property
    def shape(self):
        return self.values.shape

    def magnitude(self) -> "Spectrogram":
        if self.kind != "complex":
            raise ValueError("magnitude() needs a complex spectrogram")
        return Spectrogram(np.abs(self.values), self.config, "magnitude", self.n_samples)


def sqrt_hann(length: int) -> np.ndarray:
    # periodic Hann so that shifted copies sum to a constant at 75% overlap
    n = np.arange(length)
    return np.sqrt(0.5 - 0.5 * np.cos(2.0 * np.pi * n / length))


def _as_samples(clip) -> np.ndarray:
    if isinstance(clip, AudioClip):
        return clip.samples
    return np.asarray(clip, dtype=np.float64)


def stft(clip, config: StftConfig = StftConfig()) -> Spectrogram:
    """Complex STFT of shape ``[F, T]`` with ``F = fft_size/2 + 1`` and ``T = 1 + L // hop``.

    Bins are scaled by ``1 / sum(window)`` so magnitudes do not grow with the
    window length.
    """
    x = _as_samples(clip)
    if isinstance(clip, AudioClip) and clip.sample_rate != config.sample_rate:
        raise ValueError("clip sample rate does not match the STFT config")
    win, hop = config.win_length, config.hop_length
    if len(x) < win:
        raise ValueError(f"clip of {len(x)} samples is shorter than one window ({win})")
    window = sqrt_hann(win)
    padded = np.pad(x, win // 2, mode="reflect")
    n_frames = config.n_frames(len(x))
    frames = np.lib.stride_tricks.sliding_window_view(padded, win)[::hop][:n_frames]
    spec = np.fft.rfft(frames * window, n=config.fft_size, axis=1).T / window.sum()
    return Spectrogram(spec, config, "complex", len(x))


def _window_power_sum(config: StftConfig, n_frames: int) -> np.ndarray:
    win, hop = config.win_length, config.hop_length
    wsq = sqrt_hann(win) ** 2
    total = np.zeros((n_frames - 1) * hop + win)
    for t in range(n_frames):
        total[t * hop:t * hop + win] += wsq
    return total


def istft(spec: Spectrogram, config: StftConfig | None = None, length: int | None = None) -> AudioClip:
    """Least-squares overlap-add inverse of :func:`stft`.

    ``length`` defaults to the length recorded on ``spec`` and otherwise to
    ``(T - 1) * hop``.
    """
    if config is not None and config != spec.config:
        raise ValueError("istft config does not match the spectrogram's analysis config")
    if spec.kind != "complex":
        raise ValueError("istft needs a complex spectrogram")
    config = spec.config
    win, hop = config.win_length, config.hop_length
    values = np.asarray(spec.values)
    if values.shape[0] != config.n_bins:
        raise ValueError(f"expected {config.n_bins} bins, got {values.shape[0]}")
    n_frames = values.shape[1]
    window = sqrt_hann(win)
    frames = np.fft.irfft(values.T * window.sum(), n=config.fft_size, axis=1)[:, :win] * window
    out = np.zeros((n_frames - 1) * hop + win)
    for t in range(n_frames):
        out[t * hop:t * hop + win] += frames[t]
    norm = _window_power_sum(config, n_frames)
    out = np.divide(out, norm, out=np.zeros_like(out), where=norm > 1e-10)
    if length is None:
        length = spec.n_samples if spec.n_samples is not None else (n_frames - 1) * hop
    out = out[win // 2:win // 2 + length]
    if len(out) < length:
        out = np.pad(out, (0, length - len(out)))
    return AudioClip(out, config.sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray
    center_hz: np.ndarray
    f_min: float
    f_max: float

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]

    def apply(self, magnitude: np.ndarray) -> np.ndarray:
        """Map a ``[F, T]`` (or ``[..., F, T]``) magnitude array to ``[n_mels, T]``."""
        return np.einsum("mf,...ft->...mt", self.weights, magnitude)


def mel_filterbank(n_mels: int, config: StftConfig = StftConfig(), sample_rate: int | None = None,
                   f_min: float = 0.0, f_max: float | None = None) -> MelFilterbank:
    """Triangular filters equally spaced on the mel scale between ``f_min`` and ``f_max``.

    A filter too narrow to straddle any FFT bin collapses onto its nearest bin,
    so every row carries weight even when ``n_mels`` approaches the bin count.
    """
    sample_rate = config.sample_rate if sample_rate is None else sample_rate
    n_bins = config.n_bins
    if not 1 <= n_mels <= n_bins:
        raise ValueError(f"n_mels must lie in [1, {n_bins}], got {n_mels}")
    f_max = sample_rate / 2.0 if f_max is None else f_max
    if not 0 <= f_min < f_max:
        raise ValueError("need 0 <= f_min < f_max")
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    bin_hz = np.arange(n_bins) * sample_rate / config.fft_size
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz - lower) / (center - lower)
    falling = (upper - bin_hz) / (upper - center)
    weights = np.clip(np.minimum(rising, falling), 0.0, None)
    for m in np.flatnonzero(weights.sum(axis=1) == 0):
        weights[m, np.argmin(np.abs(bin_hz - center[m, 0]))] = 1.0
    return MelFilterbank(weights, edges[1:-1], f_min, f_max)


def read_wav(path) -> AudioClip:
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif np.issubdtype(data.dtype, np.floating):
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return AudioClip(samples, rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    scaled = np.round(np.asarray(samples) * 32768.0)
    if scaled.max(initial=0) > 32767 or scaled.min(initial=0) < -32768:
        raise ValueError("samples exceed the 16-bit range")
    return scaled.astype(np.int16)


def write_wav(path, clip) -> None:
    """Write 16-bit PCM; int16 input is written verbatim."""
    if isinstance(clip, AudioClip):
        data, rate = to_pcm16(clip.samples), clip.sample_rate
    else:
        data, rate = np.asarray(clip), SAMPLE_RATE
        if data.dtype != np.int16:
            data = to_pcm16(data)
    wavfile.write(path, rate, data)
