"""Time-frequency primitives shared by the models, losses and metrics.

All transforms are implemented on top of torch so that they are
differentiable; numpy inputs are accepted and numpy outputs returned.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from scipy.io import wavfile

SAMPLE_RATE = 16000
MEL_FLOOR = 1e-10


@dataclass(frozen=True)
class StftConfig:
    window_samples: int = 320
    hop_samples: int = 160
    fft_size: int = 512
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.hop_samples * 2 != self.window_samples:
            raise ValueError("hop must be half the window (50% overlap)")
        if self.fft_size < self.window_samples:
            raise ValueError("fft_size must be >= window_samples")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def window_ms(self) -> float:
        return 1000.0 * self.window_samples / self.sample_rate

    @property
    def hop_ms(self) -> float:
        return 1000.0 * self.hop_samples / self.sample_rate

    @property
    def frames_per_second(self) -> int:
        return self.sample_rate // self.hop_samples

    def num_frames(self, n_samples: int) -> int:
        if n_samples < self.window_samples:
            raise ValueError("signal too short")
        return 1 + (n_samples - self.window_samples) // self.hop_samples


DEFAULT_STFT = StftConfig()


def _to_tensor(x):
    if isinstance(x, torch.Tensor):
        return x, False
    arr = np.asarray(x)
    if np.iscomplexobj(arr):
        return torch.from_numpy(arr.astype(np.complex128)), True
    return torch.from_numpy(arr.astype(np.float64)), True


def _back(t: torch.Tensor, was_numpy: bool):
    return t.detach().numpy() if was_numpy else t


def hann_window(n: int, dtype=torch.float64) -> torch.Tensor:
    return torch.hann_window(n, periodic=True, dtype=dtype)


def frame_signal(x: torch.Tensor, cfg: StftConfig = DEFAULT_STFT) -> torch.Tensor:
    """(..., N) -> (..., T, window) with frame t = samples [t*hop, t*hop + window)."""
    cfg.num_frames(x.shape[-1])
    return x.unfold(-1, cfg.window_samples, cfg.hop_samples)


def stft(x, cfg: StftConfig = DEFAULT_STFT):
    """Causal STFT: (..., N) real -> (..., T, F) complex.

    Each frame is Hann-windowed, zero-padded at the end to ``fft_size`` and
    transformed; no centering padding is applied.
    """
    x, was_np = _to_tensor(x)
    frames = frame_signal(x, cfg) * hann_window(cfg.window_samples, x.dtype)
    spec = torch.fft.rfft(frames, n=cfg.fft_size, dim=-1)
    return _back(spec, was_np)


def istft(X, cfg: StftConfig = DEFAULT_STFT, length: int | None = None):
    """Weighted overlap-add inverse of :func:`stft`.

    The synthesis window equals the analysis window and the result is
    normalised by the overlapped squared window, so reconstruction is exact
    wherever that sum is nonzero (everywhere but sample 0).
    """
    X, was_np = _to_tensor(X)
    T = X.shape[-2]
    win = hann_window(cfg.window_samples, X.real.dtype)
    frames = torch.fft.irfft(X, n=cfg.fft_size, dim=-1)[..., : cfg.window_samples] * win
    n_out = (T - 1) * cfg.hop_samples + cfg.window_samples
    lead = frames.shape[:-2]
    flat = frames.reshape(-1, T, cfg.window_samples).transpose(1, 2)
    y = torch.nn.functional.fold(
        flat,
        output_size=(1, n_out),
        kernel_size=(1, cfg.window_samples),
        stride=(1, cfg.hop_samples),
    ).reshape(*lead, n_out)
    norm = torch.nn.functional.fold(
        (win**2).reshape(1, -1, 1).expand(1, -1, T),
        output_size=(1, n_out),
        kernel_size=(1, cfg.window_samples),
        stride=(1, cfg.hop_samples),
    ).reshape(n_out)
    safe = torch.where(norm > 1e-12, norm, torch.ones_like(norm))
    y = torch.where(norm > 1e-12, y / safe, torch.zeros_like(y))
    if length is not None:
        if length >= n_out:
            y = torch.nn.functional.pad(y, (0, length - n_out))
        else:
            y = y[..., :length]
    return _back(y, was_np)


def safe_magnitude(X: torch.Tensor) -> torch.Tensor:
    """|X| whose gradient is 0 (not NaN) at X == 0."""
    sq = X.real**2 + X.imag**2
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def compressed_magnitude(X: torch.Tensor, p: float) -> torch.Tensor:
    """|X|**p with the subgradient at 0 clamped to 0."""
    mag = safe_magnitude(X)
    pos = mag > 0
    return torch.where(pos, torch.where(pos, mag, torch.ones_like(mag)) ** p, torch.zeros_like(mag))


def compressed_complex(X: torch.Tensor, p: float) -> torch.Tensor:
    """|X|**p * exp(j*phase(X)), taking phase 0 where |X| == 0."""
    mag = safe_magnitude(X)
    pos = mag > 0
    safe = torch.where(pos, mag, torch.ones_like(mag))
    scale = torch.where(pos, safe ** (p - 1.0), torch.zeros_like(mag))
    return X * scale


def power_compress(X, p: float):
    """Return (|X|**p, phase(X)); zero magnitude maps to (0, 0)."""
    if not 0 < p <= 1:
        raise ValueError(f"power-law exponent must be in (0, 1], got {p}")
    X, was_np = _to_tensor(X)
    mag = compressed_magnitude(X, p)
    phase = torch.where(safe_magnitude(X) > 0, torch.angle(X), torch.zeros_like(mag))
    return _back(mag, was_np), _back(phase, was_np)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def _mel_filterbank(n_mels: int, fft_size: int, sample_rate: int, fmin: float, fmax: float) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def mel_filterbank(n_mels: int = 40, cfg: StftConfig = DEFAULT_STFT, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-style filterbank, shape (n_mels, F)."""
    fmax = cfg.sample_rate / 2 if fmax is None else fmax
    return _mel_filterbank(n_mels, cfg.fft_size, cfg.sample_rate, float(fmin), float(fmax))


def log_mel(x, cfg: StftConfig = DEFAULT_STFT, n_mels: int = 40):
    """Log mel-filterbank energies, (..., N) -> (..., T, n_mels), frame-aligned with stft."""
    x, was_np = _to_tensor(x)
    power = stft(x, cfg).abs() ** 2
    fb = torch.from_numpy(np.array(mel_filterbank(n_mels, cfg))).to(power.dtype)
    feats = torch.log(power @ fb.T + MEL_FLOOR)
    return _back(feats, was_np)


def read_wav(path: str | Path) -> np.ndarray:
    """Read a 16 kHz mono 16-bit WAV into float64 samples in [-1, 1)."""
    rate, data = wavfile.read(str(path))
    if rate != SAMPLE_RATE:
        raise ValueError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate}")
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio")
    if data.dtype != np.int16:
        raise ValueError(f"{path}: expected 16-bit PCM")
    return data.astype(np.float64) / 32768.0


def to_pcm16(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(x) * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path: str | Path, x: np.ndarray) -> None:
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise ValueError("refusing to write non-finite samples")
    wavfile.write(str(path), SAMPLE_RATE, to_pcm16(x))


def rms_db(x: np.ndarray) -> float:
    return 10.0 * math.log10(max(float(np.mean(np.square(x))), 1e-20))
