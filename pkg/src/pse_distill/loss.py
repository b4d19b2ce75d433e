"""PLCPA loss family and its pVAD-distilled variants.

Spectrograms are complex tensors shaped (..., T, F); posteriors are (..., T).
Every scalar is a mean over all (t, f) units, including frames that a gate
switches off, so an all-excluded sample contributes exactly zero.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .dsp import compressed_complex, compressed_magnitude, stft


class Variant(str, enum.Enum):
    PLCPA = "plcpa"
    EXCLUDE = "exclude"
    MIX_REF = "mixref"
    POSTERIOR = "posterior"

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        aliases = {"mix_ref": "mixref", "mix-ref": "mixref"}
        v = str(value).lower()
        return cls(aliases.get(v, v))


@dataclass
class LossConfig:
    p: float = 0.3
    alpha: float = 0.5
    tau: float = 0.5
    variant: Variant = Variant.PLCPA
    asym_weight: float = 0.0
    gamma: float = 0.1

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        if not 0 < self.p <= 1:
            raise ValueError(f"p must be in (0, 1], got {self.p}")
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0 < self.tau < 1:
            raise ValueError(f"tau must be in (0, 1), got {self.tau}")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.asym_weight < 0:
            raise ValueError("asym_weight must be >= 0")


def _as_complex(X) -> Tensor:
    if isinstance(X, Tensor):
        return X
    return torch.from_numpy(np.asarray(X, dtype=np.complex128))


def _check_shapes(*xs) -> None:
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise ValueError(f"shape mismatch: {tuple(shape)} vs {tuple(x.shape)}")


def _check_frames(S: Tensor, p_ts: Tensor) -> None:
    if p_ts.shape != S.shape[:-1]:
        raise ValueError(f"frame-count mismatch: posterior {tuple(p_ts.shape)} vs spectrogram {tuple(S.shape)}")


def plcpa_map(S, S_hat, cfg: LossConfig) -> Tensor:
    """Per-(t, f) power-law compressed phase-aware loss."""
    S, S_hat = _as_complex(S), _as_complex(S_hat)
    _check_shapes(S, S_hat)
    mag = (compressed_magnitude(S, cfg.p) - compressed_magnitude(S_hat, cfg.p)) ** 2
    diff = compressed_complex(S, cfg.p) - compressed_complex(S_hat, cfg.p)
    return cfg.alpha * mag + (1.0 - cfg.alpha) * (diff.real**2 + diff.imag**2)


def plcpa(S, S_hat, cfg: LossConfig) -> tuple[Tensor, Tensor]:
    m = plcpa_map(S, S_hat, cfg)
    return m, m.mean()


def asym_os(S, S_hat, cfg: LossConfig) -> tuple[Tensor, Tensor]:
    """Over-suppression index: squared ReLU of the compressed-magnitude shortfall."""
    S, S_hat = _as_complex(S), _as_complex(S_hat)
    _check_shapes(S, S_hat)
    m = torch.relu(compressed_magnitude(S, cfg.p) - compressed_magnitude(S_hat, cfg.p)) ** 2
    return m, m.mean()


def frame_gate(p_ts, tau: float) -> Tensor:
    """1 where the teacher says 'not target' (p_ts < tau), else 0."""
    p_ts = torch.as_tensor(p_ts)
    return (p_ts < tau).to(p_ts.dtype if p_ts.is_floating_point() else torch.float64)


def loss_exclude(S, S_hat, p_ts, cfg: LossConfig) -> Tensor:
    S, S_hat = _as_complex(S), _as_complex(S_hat)
    p_ts = torch.as_tensor(p_ts)
    _check_frames(S_hat, p_ts)
    m = plcpa_map(S, S_hat, cfg)
    gate = frame_gate(p_ts, cfg.tau).to(m.dtype).detach()
    # where() rather than multiply, so excluded frames get an exactly-zero gradient
    return torch.where(gate[..., None] > 0, m, torch.zeros_like(m)).mean()


def loss_mix_ref(S, S_hat, Y, p_ts, cfg: LossConfig) -> Tensor:
    S, S_hat, Y = _as_complex(S), _as_complex(S_hat), _as_complex(Y)
    _check_shapes(S, S_hat, Y)
    p_ts = torch.as_tensor(p_ts)
    _check_frames(S_hat, p_ts)
    gate = frame_gate(p_ts, cfg.tau).detach()
    return torch.where(gate[..., None] > 0, plcpa_map(S, S_hat, cfg), plcpa_map(Y, S_hat, cfg)).mean()


def loss_posterior(S, S_hat, p_ts, cfg: LossConfig) -> Tensor:
    S, S_hat = _as_complex(S), _as_complex(S_hat)
    p_ts = torch.as_tensor(p_ts)
    _check_frames(S_hat, p_ts)
    m = plcpa_map(S, S_hat, cfg)
    return ((1.0 - p_ts.to(m.dtype).detach())[..., None] * m).mean()


def spectral_loss(S, S_hat, Y, p_ts, is_its: bool, cfg: LossConfig) -> Tensor:
    """Dispatch for one sample: distillation variants only apply to ITS samples."""
    S, S_hat = _as_complex(S), _as_complex(S_hat)
    variant = cfg.variant if is_its else Variant.PLCPA
    if variant is not Variant.PLCPA and p_ts is None:
        raise ValueError(f"variant {variant.value} needs teacher posteriors for ITS samples")
    if variant is Variant.PLCPA:
        loss = plcpa(S, S_hat, cfg)[1]
    elif variant is Variant.EXCLUDE:
        loss = loss_exclude(S, S_hat, p_ts, cfg)
    elif variant is Variant.MIX_REF:
        loss = loss_mix_ref(S, S_hat, Y, p_ts, cfg)
    else:
        loss = loss_posterior(S, S_hat, p_ts, cfg)
    if cfg.asym_weight > 0:
        loss = loss + cfg.asym_weight * asym_os(S, S_hat, cfg)[1]
    return loss


def training_loss(sample, S_hat, p_ts, cfg: LossConfig) -> Tensor:
    """Loss of one :class:`MixtureSample` given the estimate's spectrogram."""
    S_hat = _as_complex(S_hat)
    S = stft(torch.as_tensor(np.asarray(sample.clean_target), dtype=S_hat.real.dtype))
    Y = stft(torch.as_tensor(np.asarray(sample.mixture), dtype=S_hat.real.dtype))
    if p_ts is not None:
        p_ts = torch.as_tensor(p_ts, dtype=S_hat.real.dtype)
    if sample.is_its and cfg.variant is not Variant.PLCPA and p_ts is None:
        raise ValueError("missing teacher posteriors for an ITS sample")
    return spectral_loss(S, S_hat, Y, p_ts, sample.is_its, cfg)


def batch_loss(S: Tensor, S_hat: Tensor, Y: Tensor, is_its: Tensor, p_ts: Tensor | None, cfg: LossConfig) -> Tensor:
    """Mean of per-sample :func:`spectral_loss` over a (B, T, F) batch."""
    losses = [
        spectral_loss(S[b], S_hat[b], Y[b], None if p_ts is None else p_ts[b], bool(is_its[b]), cfg)
        for b in range(S.shape[0])
    ]
    return torch.stack(losses).mean()
