"""Shoebox room impulse responses with the image-source method."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal

from ..dsp import SAMPLE_RATE

SPEED_OF_SOUND = 343.0
T60_RANGE = (0.15, 0.6)
DIM_RANGE = (3.0, 10.0)


@dataclass(frozen=True)
class RoomSpec:
    dimensions: tuple[float, float, float]
    t60: float
    mic_position: tuple[float, float, float]
    source_position: tuple[float, float, float]
    speed_of_sound: float = SPEED_OF_SOUND

    def validate(self, check_ranges: bool = True) -> None:
        dims = np.asarray(self.dimensions, dtype=float)
        if dims.shape != (3,):
            raise ValueError("room dimensions must be a 3-vector")
        if check_ranges:
            if np.any(dims < DIM_RANGE[0]) or np.any(dims > DIM_RANGE[1]):
                raise ValueError(f"room dimensions {tuple(dims)} outside {DIM_RANGE}")
            if not T60_RANGE[0] <= self.t60 <= T60_RANGE[1]:
                raise ValueError(f"t60 {self.t60} outside {T60_RANGE}")
        for name in ("mic_position", "source_position"):
            pos = np.asarray(getattr(self, name), dtype=float)
            if pos.shape != (3,) or np.any(pos <= 0) or np.any(pos >= dims):
                raise ValueError(f"{name} {tuple(pos)} is not strictly inside the room")

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(np.subtract(self.source_position, self.mic_position)))


def eyring_absorption(dimensions, t60: float) -> float:
    """Uniform wall absorption coefficient giving ``t60`` under Eyring's formula."""
    lx, ly, lz = dimensions
    volume = lx * ly * lz
    surface = 2.0 * (lx * ly + lx * lz + ly * lz)
    return 1.0 - math.exp(-0.161 * volume / (surface * t60))


def _sphere_directions(n: int = 2000) -> np.ndarray:
    i = np.arange(n) + 0.5
    polar = np.arccos(1.0 - 2.0 * i / n)
    azimuth = np.pi * (1.0 + 5.0**0.5) * i
    return np.abs(
        np.stack([np.cos(azimuth) * np.sin(polar), np.sin(azimuth) * np.sin(polar), np.cos(polar)], axis=1)
    )


_DIRECTIONS = _sphere_directions()


def decay_correction(dimensions, c: float = SPEED_OF_SOUND, fit_db: tuple[float, float] = (-5.0, -25.0)) -> float:
    """Ratio between the image-method decay time and the Eyring prediction.

    A ray travelling along direction u hits the walls c*sum(|u_i|/L_i) times
    per second, so the image-source energy decay is a mixture of exponentials
    whose slow (grazing) members stretch the measured reverberation time.
    Multiplying the Eyring attenuation exponent by this ratio restores the
    requested t60 on the backward-integrated decay.
    """
    rates = c * (_DIRECTIONS / np.asarray(dimensions, dtype=float)).sum(axis=1)
    mean_rate = rates.mean()
    t = np.linspace(0.0, 12.0 / rates.min(), 1500)
    edc = (np.exp(-np.outer(t, rates)) / rates).mean(axis=1)
    edc = 10.0 * np.log10(edc / edc[0])
    idx = (edc <= fit_db[0]) & (edc >= fit_db[1])
    slope = np.polyfit(t[idx], edc[idx], 1)[0]
    # with unit attenuation exponent, a pure exponential at the mean rate decays at -10*log10(e)*mean_rate dB/s
    return (-10.0 * math.log10(math.e) * mean_rate) / slope


def wall_reflection(dimensions, t60: float, c: float = SPEED_OF_SOUND) -> float:
    """Pressure reflection coefficient for uniform walls (Eyring + decay correction)."""
    attenuation = -math.log(1.0 - eyring_absorption(dimensions, t60))
    return math.exp(-0.5 * attenuation * decay_correction(dimensions, c))


def _axis_images(src: float, length: float, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Image coordinates along one axis and their reflection counts."""
    n = np.arange(-order, order + 1)
    coords = n * length + np.where(n % 2 == 0, src, length - src)
    return coords, np.abs(n)


def generate_rir(
    room: RoomSpec,
    sample_rate: int = SAMPLE_RATE,
    length_s: float | None = None,
    reflection: float | None = None,
    check_ranges: bool = True,
) -> np.ndarray:
    """Image-method RIR truncated at ``length_s`` (default: the room's t60).

    Every image contributes ``reflection**n_reflections / distance`` at the
    nearest integer delay. ``reflection`` overrides the Eyring-derived wall
    reflection coefficient (0 gives the free-field response). Reverberant
    responses are high-passed at 100 Hz to remove the low-frequency build-up
    of the all-positive image sum.
    """
    room.validate(check_ranges)
    dims = np.asarray(room.dimensions, dtype=float)
    src = np.asarray(room.source_position, dtype=float)
    mic = np.asarray(room.mic_position, dtype=float)
    c = room.speed_of_sound
    if reflection is None:
        reflection = wall_reflection(dims, room.t60, c)
    length_s = room.t60 if length_s is None else length_s
    n_taps = int(math.ceil(length_s * sample_rate))
    max_dist = n_taps / sample_rate * c
    direct = room.distance
    n_taps = max(n_taps, int(round(direct / c * sample_rate)) + 1)

    if reflection == 0.0:
        h = np.zeros(n_taps)
        h[int(round(direct / c * sample_rate))] = 1.0 / direct
        return h

    # squared offsets per axis, pruned to the sphere reachable within n_taps
    offs = []
    for axis in range(3):
        order = int(math.ceil(max_dist / dims[axis])) + 1
        coords, refl = _axis_images(src[axis], dims[axis], order)
        d2 = (coords - mic[axis]) ** 2
        keep = d2 <= max_dist**2
        offs.append((d2[keep], refl[keep]))
    (dx, rx), (dy, ry) = offs[0], offs[1]
    dz, rz = offs[2]
    dxy = dx[:, None] + dy[None, :]
    rxy = rx[:, None] + ry[None, :]
    keep_xy = dxy <= max_dist**2
    dxy, rxy = dxy[keep_xy], rxy[keep_xy]
    d2 = dxy[:, None] + dz[None, :]
    refl = rxy[:, None] + rz[None, :]
    keep = d2 <= max_dist**2
    dist = np.sqrt(d2[keep])
    refl = refl[keep]
    delay = np.rint(dist / c * sample_rate).astype(np.int64)
    amp = reflection ** refl.astype(np.float64) / dist
    inside = delay < n_taps
    # sort so accumulation order is independent of how images were enumerated
    order = np.lexsort((amp[inside], delay[inside]))
    h = np.bincount(delay[inside][order], weights=amp[inside][order], minlength=n_taps)[:n_taps]
    return signal.sosfilt(_HIGHPASS, h)


_HIGHPASS = signal.butter(2, 100.0, btype="highpass", fs=SAMPLE_RATE, output="sos")


def schroeder_t60(h: np.ndarray, sample_rate: int = SAMPLE_RATE, fit_db: tuple[float, float] = (-5.0, -25.0)) -> float:
    """Reverberation time from a line fit to the backward-integrated energy decay."""
    energy = np.cumsum(np.asarray(h, dtype=float)[::-1] ** 2)[::-1]
    edc = 10.0 * np.log10(np.maximum(energy / energy[0], 1e-300))
    hi, lo = fit_db
    idx = np.nonzero((edc <= hi) & (edc >= lo))[0]
    if len(idx) < 2:
        raise ValueError("decay curve does not span the fit range")
    t = idx / sample_rate
    slope, _ = np.polyfit(t, edc[idx], 1)
    return -60.0 / slope


def sample_room(rng: np.random.Generator) -> tuple[np.ndarray, float]:
    dims = rng.uniform(*DIM_RANGE, size=3)
    t60 = float(rng.uniform(*T60_RANGE))
    return dims, t60


def place_source(
    rng: np.random.Generator,
    dims: np.ndarray,
    mic: np.ndarray,
    dist_range: tuple[float, float],
    margin: float = 0.1,
    max_tries: int = 1000,
) -> tuple[np.ndarray, float]:
    """Random source position inside the room at a distance drawn from ``dist_range``."""
    for _ in range(max_tries):
        d = rng.uniform(*dist_range)
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        pos = mic + d * v
        if np.all(pos > margin) and np.all(pos < dims - margin):
            return pos, float(np.linalg.norm(pos - mic))
    raise ValueError("could not place source inside the room")
