"""Speaker embeddings (d-vectors) from enrollment audio.

The default embedder is a statistical stand-in for a pretrained speaker
encoder. Anything with an ``embed(list_of_waveforms) -> DVector`` method can
replace it; the models only ever see the 128-dim unit vector.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .dsp import SAMPLE_RATE, log_mel

DVECTOR_DIM = 128
PROJECTION_SEED = 20230501
MIN_ENROLL_SECONDS = 3.0
_MAGIC = b"DVEC"
_VERSION = 1


@dataclass(frozen=True)
class DVector:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (DVECTOR_DIM,):
            raise ValueError(f"d-vector must have {DVECTOR_DIM} dims, got {v.shape}")
        if abs(np.linalg.norm(v) - 1.0) > 1e-6:
            raise ValueError("d-vector must be unit-norm")
        object.__setattr__(self, "values", v)

    def cosine(self, other: "DVector") -> float:
        return float(self.values @ other.values)


class Embedder(Protocol):
    def embed(self, enrollment: Sequence[np.ndarray]) -> DVector: ...


def projection_matrix(in_dim: int = 80, out_dim: int = DVECTOR_DIM, seed: int = PROJECTION_SEED) -> np.ndarray:
    """Fixed (out_dim, in_dim) matrix with orthonormal columns."""
    g = np.random.default_rng(seed).normal(size=(out_dim, in_dim))
    q, r = np.linalg.qr(g)
    return q * np.sign(np.diag(r))


class MelStatsEmbedder:
    """Mean/std of log-mel features, projected to 128 dims and L2-normalised."""

    def __init__(self, seed: int = PROJECTION_SEED, min_seconds: float = MIN_ENROLL_SECONDS):
        self.seed = seed
        self.min_seconds = min_seconds
        self._proj = projection_matrix(seed=seed)

    def stats(self, x: np.ndarray) -> np.ndarray:
        feats = log_mel(np.asarray(x, dtype=np.float64))
        return np.concatenate([feats.mean(axis=0), feats.std(axis=0)])

    def embed(self, enrollment: Sequence[np.ndarray]) -> DVector:
        total = sum(len(x) for x in enrollment) / SAMPLE_RATE
        if not enrollment or total < self.min_seconds:
            raise ValueError(f"insufficient enrollment audio: {total:.2f} s < {self.min_seconds} s")
        pooled = np.mean([self.stats(x) for x in enrollment], axis=0)
        v = self._proj @ pooled
        return DVector(v / np.linalg.norm(v))


def compute_dvector(enrollment: Sequence[np.ndarray], embedder: Embedder | None = None) -> DVector:
    return (embedder or MelStatsEmbedder()).embed(enrollment)


def save_dvector(d: DVector, path: str | Path) -> None:
    """16-byte header (magic, version, dim, reserved) + little-endian float32 values."""
    header = _MAGIC + struct.pack("<III", _VERSION, DVECTOR_DIM, 0)
    Path(path).write_bytes(header + d.values.astype("<f4").tobytes())


def load_dvector(path: str | Path) -> DVector:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a d-vector file")
    version, dim, _ = struct.unpack("<III", raw[4:16])
    if version != _VERSION or dim != DVECTOR_DIM:
        raise ValueError(f"{path}: unsupported d-vector version {version} / dim {dim}")
    v = np.frombuffer(raw[16:], dtype="<f4").astype(np.float64)
    # float32 storage loses a little norm precision
    return DVector(v / np.linalg.norm(v))
