"""Signal-domain SpecAugment for input mixtures."""
from __future__ import annotations

import numpy as np

from ..dsp import SAMPLE_RATE


def time_mask(x: np.ndarray, start: int, stop: int, gain: float) -> np.ndarray:
    y = np.array(x, dtype=float, copy=True)
    y[start:stop] *= gain
    return y


def band_stop(x: np.ndarray, low_hz: float, high_hz: float, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Zero the [low_hz, high_hz] band of the whole-signal spectrum."""
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(len(x), 1.0 / sample_rate)
    spec[(freqs >= low_hz) & (freqs <= high_hz)] = 0.0
    return np.fft.irfft(spec, len(x))


def signal_specaugment(
    x: np.ndarray,
    rng: np.random.Generator,
    max_time_masks: int = 2,
    max_mask_ms: float = 100.0,
    max_gain: float = 0.5,
    max_band_stops: int = 1,
    max_band_hz: float = 1000.0,
    sample_rate: int = SAMPLE_RATE,
) -> np.ndarray:
    """Random time-segment attenuations followed by random band-stop filters.

    Only ever applied to the model input mixture, never to references.
    """
    y = np.asarray(x, dtype=float)
    n_time = int(rng.integers(0, max_time_masks + 1)) if max_time_masks > 0 else 0
    n_band = int(rng.integers(0, max_band_stops + 1)) if max_band_stops > 0 else 0
    max_len = int(max_mask_ms * sample_rate / 1000)
    for _ in range(n_time):
        length = int(rng.integers(1, max_len + 1))
        start = int(rng.integers(0, max(1, len(y) - length)))
        y = time_mask(y, start, start + length, float(rng.uniform(0.0, max_gain)))
    for _ in range(n_band):
        width = float(rng.uniform(50.0, max_band_hz))
        low = float(rng.uniform(50.0, sample_rate / 2 - width))
        y = band_stop(y, low, low + width, sample_rate)
    return y
