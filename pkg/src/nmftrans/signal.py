"""Audio loading, magnitude spectrograms and synthetic test notes."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

MAX_CHANNELS = 8


class AudioError(ValueError):
    """Raised for unreadable or unsupported audio."""


@dataclass
class AudioClip:
    channels: list[np.ndarray]
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise AudioError("sample_rate must be positive")
        if not 1 <= len(self.channels) <= MAX_CHANNELS:
            raise AudioError(f"expected 1-{MAX_CHANNELS} channels, got {len(self.channels)}")
        lengths = {len(c) for c in self.channels}
        if len(lengths) != 1:
            raise AudioError("channels have unequal lengths")

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    @property
    def n_samples(self) -> int:
        return len(self.channels[0])

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate

    def mono(self) -> np.ndarray:
        return np.mean(np.vstack(self.channels), axis=0)

    def truncate(self, seconds: float) -> AudioClip:
        n = int(round(seconds * self.sample_rate))
        return AudioClip([c[:n] for c in self.channels], self.sample_rate)


@dataclass(frozen=True)
class StftConfig:
    frame_len_ms: float = 64.0
    hop_fraction: float = 0.5
    window: str = "hann"
    power: bool = False

    def __post_init__(self):
        if self.frame_len_ms <= 0:
            raise ValueError("frame_len_ms must be positive")
        if not 0 < self.hop_fraction <= 1:
            raise ValueError("hop_fraction must lie in (0, 1]")
        if self.window not in ("hann", "rect"):
            raise ValueError(f"unknown window {self.window!r}")

    def frame_len(self, sample_rate: int) -> int:
        return int(round(self.frame_len_ms * sample_rate / 1000.0))

    def hop_len(self, sample_rate: int) -> int:
        return max(1, int(round(self.frame_len(sample_rate) * self.hop_fraction)))


@dataclass
class Spectrogram:
    """Nonnegative F x T magnitude (or power) matrix plus its time/frequency grid."""

    data: np.ndarray
    freq_resolution_hz: float
    hop_seconds: float
    sample_rate: int
    frame_len: int = field(default=0)

    @property
    def n_bins(self) -> int:
        return self.data.shape[0]

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]

    def to_csv(self, path) -> None:
        np.savetxt(path, self.data, delimiter=",", fmt="%.10g")


def load_wav(path) -> AudioClip:
    """Read a PCM16 or float32 WAV file into an :class:`AudioClip`.

    Samples are scaled to [-1, 1]; other encodings raise ``AudioError``.
    """
    path = Path(path)
    try:
        sr, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as exc:  # scipy raises ValueError for most malformed headers
        raise AudioError(f"cannot read {path}: {exc}") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise AudioError(f"unsupported encoding ({data.dtype}) in {path}")
    if samples.shape[0] == 0:
        raise AudioError(f"zero-length audio in {path}")
    if samples.ndim == 1:
        samples = samples[:, None]
    return AudioClip([np.ascontiguousarray(samples[:, c]) for c in range(samples.shape[1])], int(sr))


def write_wav(path, clip: AudioClip) -> None:
    """Write 16-bit PCM, clipping to [-1, 1]."""
    data = np.clip(np.vstack(clip.channels).T, -1.0, 1.0)
    pcm = np.clip(np.round(data * 32768.0), -32768, 32767).astype(np.int16)
    if pcm.shape[1] == 1:
        pcm = pcm[:, 0]
    wavfile.write(path, clip.sample_rate, pcm)


def _window(kind: str, n: int) -> np.ndarray:
    if kind == "rect":
        return np.ones(n)
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def stft_magnitude(x, sample_rate: int, cfg: StftConfig = StftConfig()) -> Spectrogram:
    """One-sided STFT magnitude of a single channel.

    Frame ``r`` covers samples ``[r*hop, r*hop + N)``; trailing samples that do not
    fill a whole frame are dropped.
    """
    x = np.asarray(x, dtype=np.float64)
    n = cfg.frame_len(sample_rate)
    hop = cfg.hop_len(sample_rate)
    if len(x) < n:
        raise AudioError(f"signal shorter than one frame ({len(x)} < {n} samples)")
    n_frames = 1 + (len(x) - n) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, n)[::hop][:n_frames]
    spec = np.abs(np.fft.rfft(frames * _window(cfg.window, n), axis=1)).T
    if cfg.power:
        spec = spec**2
    return Spectrogram(
        data=np.ascontiguousarray(spec),
        freq_resolution_hz=sample_rate / n,
        hop_seconds=hop / sample_rate,
        sample_rate=sample_rate,
        frame_len=n,
    )


def midi_to_freq(midi) -> float:
    return 440.0 * 2.0 ** ((np.asarray(midi, dtype=float) - 69.0) / 12.0)


def synth_note(midi: int, duration_s: float, sample_rate: int = 44100,
               n_partials: int = 8, decay_rate: float = 1.0) -> np.ndarray:
    """Harmonic test tone with 1/p partial amplitudes and an exponential envelope.

    The result is peak-normalized to 0.9.
    """
    if not 21 <= midi <= 108:
        raise ValueError(f"midi {midi} outside piano range 21..108")
    if n_partials < 1:
        raise ValueError("n_partials must be >= 1")
    f0 = float(midi_to_freq(midi))
    t = np.arange(int(round(duration_s * sample_rate))) / sample_rate
    y = np.zeros_like(t)
    for p in range(1, n_partials + 1):
        if p * f0 >= sample_rate / 2:
            break
        y += np.sin(2 * np.pi * p * f0 * t) / p
    y *= np.exp(-decay_rate * t)
    peak = np.max(np.abs(y)) if len(y) else 0.0
    return y * (0.9 / peak) if peak > 0 else y
