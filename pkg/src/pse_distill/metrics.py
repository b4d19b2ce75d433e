"""Signal-level evaluation: target speech over-suppression and leakage."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dsp import DEFAULT_STFT, StftConfig, stft
from .loss import LossConfig

ENERGY_FLOOR = 1e-12
ACTIVITY_THRESHOLD_DB = -40.0
HANGOVER_FRAMES = 5


@dataclass
class TsosReport:
    frame_flags: np.ndarray
    active_mask: np.ndarray
    segment_count: int
    total_oversuppressed_seconds: float

    @property
    def scored_flags(self) -> np.ndarray:
        return self.frame_flags & self.active_mask


@dataclass
class LeakageReport:
    delta_n_db: float
    input_energy_db: float
    output_energy_db: float


def run_lengths(flags) -> list[tuple[int, int]]:
    """(start, length) of every maximal run of ones."""
    f = np.concatenate([[0], np.asarray(flags, dtype=np.int8), [0]])
    d = np.diff(f)
    starts = np.nonzero(d == 1)[0]
    ends = np.nonzero(d == -1)[0]
    return [(int(s), int(e - s)) for s, e in zip(starts, ends)]


def count_segments(flags, min_frames: int) -> int:
    return sum(1 for _, n in run_lengths(flags) if n >= min_frames)


def _np_complex(X) -> np.ndarray:
    if hasattr(X, "detach"):
        X = X.detach().numpy()
    return np.asarray(X, dtype=np.complex128)


def tsos_flags(S, S_hat, cfg: LossConfig) -> np.ndarray:
    """Frame t is flagged when sum_f L_OS(t, f) > gamma * sum_f |S(t, f)|^p."""
    S, S_hat = _np_complex(S), _np_complex(S_hat)
    if S.shape != S_hat.shape:
        raise ValueError(f"shape mismatch: {S.shape} vs {S_hat.shape}")
    cs, ch = np.abs(S) ** cfg.p, np.abs(S_hat) ** cfg.p
    los = np.maximum(cs - ch, 0.0) ** 2
    return los.sum(axis=-1) > cfg.gamma * cs.sum(axis=-1)


def tsos(S, S_hat, active_mask, cfg: LossConfig = LossConfig(), stft_cfg: StftConfig = DEFAULT_STFT) -> TsosReport:
    flags = tsos_flags(S, S_hat, cfg)
    active = np.asarray(active_mask, dtype=bool)
    if active.shape != flags.shape:
        raise ValueError(f"activity mask has {active.shape} frames, spectrogram {flags.shape}")
    scored = flags & active
    return TsosReport(
        frame_flags=flags,
        active_mask=active,
        segment_count=count_segments(scored, stft_cfg.frames_per_second),
        total_oversuppressed_seconds=float(scored.sum()) * stft_cfg.hop_samples / stft_cfg.sample_rate,
    )


def speech_activity_mask(
    clean,
    cfg: StftConfig = DEFAULT_STFT,
    threshold_db: float = ACTIVITY_THRESHOLD_DB,
    hangover: int = HANGOVER_FRAMES,
) -> np.ndarray:
    """Energy-based frame activity: RMS above (max RMS) * 10**(threshold/20), held for ``hangover`` frames."""
    x = np.asarray(clean, dtype=np.float64)
    cfg.num_frames(len(x))
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.window_samples)[:: cfg.hop_samples]
    rms = np.sqrt(np.mean(frames**2, axis=1))
    peak = rms.max()
    raw = rms > peak * 10.0 ** (threshold_db / 20.0) if peak > 0 else np.zeros(len(rms), dtype=bool)
    mask = raw.copy()
    last = -(hangover + 1)
    for t, a in enumerate(raw):
        if a:
            last = t
        elif t - last <= hangover:
            mask[t] = True
    return mask


def delta_n(Y, S_hat) -> LeakageReport:
    """Input minus output energy in dB, energies floored at 1e-12."""
    Y, S_hat = np.asarray(Y, dtype=np.float64), np.asarray(S_hat, dtype=np.float64)
    if Y.shape != S_hat.shape:
        raise ValueError(f"length mismatch: {Y.shape} vs {S_hat.shape}")
    e_in = 10.0 * math.log10(max(float(np.sum(Y**2)), ENERGY_FLOOR))
    e_out = 10.0 * math.log10(max(float(np.sum(S_hat**2)), ENERGY_FLOOR))
    return LeakageReport(e_in - e_out, e_in, e_out)


def session_metrics(clean, mixture, estimate, scenario: str, cfg: LossConfig = LossConfig()) -> dict:
    """TSOS for scenarios with target speech, leakage for the target-free one."""
    out: dict = {"scenario": scenario}
    if scenario in ("TS1", "TS2"):
        rep = tsos(stft(clean), stft(estimate), speech_activity_mask(clean), cfg)
        out.update(tsos_segments=rep.segment_count, tsos_seconds=rep.total_oversuppressed_seconds)
    else:
        out.update(tsos_segments=None, tsos_seconds=None)
    if scenario == "TS3":
        out["delta_n_db"] = delta_n(mixture, estimate).delta_n_db
    else:
        out["delta_n_db"] = None
    return out
