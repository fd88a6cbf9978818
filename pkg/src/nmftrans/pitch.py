"""Pitch estimation from spectral templates."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

F0_MIN_HZ = 25.0
F0_MAX_HZ = 4500.0
DEFAULT_SALIENCE_THRESHOLD = 0.2


@dataclass(frozen=True)
class PitchEstimate:
    f0_hz: float
    midi: int
    salience: float
    is_note: bool


def freq_to_midi(f_hz: float) -> int:
    """Nearest MIDI note, rounding half up."""
    if not f_hz > 0:
        raise ValueError(f"frequency must be positive, got {f_hz}")
    return int(math.floor(69.0 + 12.0 * math.log2(f_hz / 440.0) + 0.5 + 1e-9))


def autocorrelation(template, frame_len: int, power: bool = True, upsample: int = 1) -> np.ndarray:
    """Time-domain autocorrelation of a one-sided spectrum (Wiener-Khinchin).

    With ``upsample > 1`` the lag axis is sampled ``upsample`` times more finely
    (zero padding of the spectrum); values are scaled back to the unpadded level.
    """
    spec = np.asarray(template, dtype=np.float64)
    if power:
        spec = spec**2
    return np.fft.irfft(spec, n=frame_len * upsample) * upsample


def estimate_f0(template, sample_rate: int, frame_len: int,
                salience_threshold: float = DEFAULT_SALIENCE_THRESHOLD,
                power: bool = True, upsample: int = 8) -> PitchEstimate:
    """Estimate the fundamental of one spectral template.

    The autocorrelation is evaluated on a fractional lag grid and its highest
    local maximum over lags corresponding to 25-4500 Hz is taken as the period
    (lag 0 and the lobe around it are never candidates).  Near-ties go to the
    shortest lag.  Salience is that peak relative to the zero-lag energy.
    """
    t = np.asarray(template, dtype=np.float64)
    if not np.any(t):
        raise ValueError("all-zero template")
    r = autocorrelation(t, frame_len, power, upsample)
    rate = sample_rate * upsample
    lo = max(1, int(math.ceil(rate / F0_MAX_HZ)))
    hi = min(int(math.floor(rate / F0_MIN_HZ)), len(r) // 2 - 1)
    if hi < lo:
        raise ValueError("frame too short for the piano f0 range")
    lags = np.arange(lo, hi + 1)
    peaks = lags[(r[lags] >= r[lags - 1]) & (r[lags] > r[lags + 1])]
    if len(peaks) == 0:
        return PitchEstimate(float("nan"), 0, 0.0, False)
    best = r[peaks].max()
    lag = int(peaks[np.flatnonzero(r[peaks] >= best - 1e-9 * abs(r[0]))[0]])
    a, b, c = r[lag - 1], r[lag], r[lag + 1]
    denom = a - 2 * b + c
    refined = lag + (float(np.clip(0.5 * (a - c) / denom, -0.5, 0.5)) if denom < 0 else 0.0)
    f0 = rate / refined
    salience = float(max(b, 0.0) / r[0]) if r[0] > 0 else 0.0
    return PitchEstimate(f0, freq_to_midi(f0), salience, salience >= salience_threshold)
