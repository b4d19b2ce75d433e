"""Mixture rendering: reverberation, SNR/SIR scaling and ITS injection."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from ..dsp import SAMPLE_RATE
from .corpus import Corpus
from .rir import RoomSpec, generate_rir, place_source, sample_room

SNR_RANGE = (0.0, 15.0)
SIR_RANGE = (0.0, 10.0)
TARGET_DISTANCE = (0.1, 1.3)
INTERFERER_DISTANCE = (2.05, 6.0)
TARGET_LEVEL_DB = (-32.0, -22.0)


class Scenario(str, enum.Enum):
    TS1 = "TS1"  # target + interferer + noise
    TS2 = "TS2"  # target + noise
    TS3 = "TS3"  # interferer + noise, target inactive

    @classmethod
    def parse(cls, value) -> "Scenario":
        return value if isinstance(value, cls) else cls(str(value).upper())


@dataclass
class MixtureSample:
    mixture: np.ndarray
    clean_target: np.ndarray
    interference: np.ndarray
    noise: np.ndarray
    is_its: bool
    scenario: Scenario
    snr_db: float
    sir_db: float | None
    target_speaker_id: str
    seed: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.mixture)

    def check(self) -> None:
        if not np.array_equal(self.mixture, self.clean_target + self.interference + self.noise):
            raise AssertionError("mixture is not the sum of its components")
        if self.is_its and np.any(self.clean_target != 0):
            raise AssertionError("ITS sample carries target energy")
        if self.scenario is Scenario.TS2 and np.any(self.interference != 0):
            raise AssertionError("TS2 sample carries interference")
        if self.scenario is Scenario.TS3 and not self.is_its:
            raise AssertionError("TS3 sample must be ITS")


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def fit_length(x: np.ndarray, n: int, offset: int = 0) -> np.ndarray:
    """Loop ``x`` (starting at ``offset``) or truncate it to exactly ``n`` samples."""
    if len(x) == 0:
        raise ValueError("cannot fit an empty signal")
    reps = int(math.ceil((offset + n) / len(x)))
    return np.tile(x, reps)[offset : offset + n]


def mix_at_snr(sig: np.ndarray, contaminant: np.ndarray, target_db: float) -> tuple[np.ndarray, float]:
    """Scale ``contaminant`` so that 10*log10(P_sig / P_cont) == target_db.

    Powers are mean squares over the whole clip. The contaminant is looped or
    truncated to the signal length.
    """
    contaminant = fit_length(np.asarray(contaminant, dtype=float), len(sig))
    p_sig, p_cont = power(sig), power(contaminant)
    if p_sig <= 0 or p_cont <= 0:
        raise ValueError("degenerate mix: zero-energy input")
    gain = math.sqrt(p_sig / (p_cont * 10.0 ** (target_db / 10.0)))
    scaled = contaminant * gain
    return scaled, 10.0 * math.log10(p_sig / power(scaled))


def reverberate(x: np.ndarray, rir: np.ndarray) -> np.ndarray:
    return signal.fftconvolve(x, rir)[: len(x)]


@dataclass(frozen=True)
class RoomDraw:
    room_dims: tuple[float, float, float]
    t60: float
    mic: tuple[float, float, float]
    target_pos: tuple[float, float, float]
    interferer_pos: tuple[float, float, float]

    @property
    def target_distance(self) -> float:
        return float(np.linalg.norm(np.subtract(self.target_pos, self.mic)))

    @property
    def interferer_distance(self) -> float:
        return float(np.linalg.norm(np.subtract(self.interferer_pos, self.mic)))

    def spec(self, which: str) -> RoomSpec:
        pos = self.target_pos if which == "target" else self.interferer_pos
        return RoomSpec(self.room_dims, self.t60, self.mic, pos)


def draw_room(rng: np.random.Generator, max_tries: int = 100) -> RoomDraw:
    """Room, mic and both source positions satisfying the distance constraints."""
    for _ in range(max_tries):
        dims, t60 = sample_room(rng)
        mic = rng.uniform(0.3, dims - 0.3)
        try:
            tgt, _ = place_source(rng, dims, mic, TARGET_DISTANCE, max_tries=200)
            itf, _ = place_source(rng, dims, mic, INTERFERER_DISTANCE, max_tries=200)
        except ValueError:
            continue
        return RoomDraw(tuple(dims), t60, tuple(mic), tuple(tgt), tuple(itf))
    raise ValueError("could not draw a valid room geometry")


class RirBank:
    """A fixed, seeded pool of (target, interferer) RIR pairs.

    Rendering RIRs for every on-the-fly sample dominates data cost, so
    training draws geometries from this pool instead.
    """

    def __init__(self, size: int = 64, seed: int = 0):
        self.seed = seed
        self.rooms: list[RoomDraw] = []
        self.rirs: list[tuple[np.ndarray, np.ndarray]] = []
        for i in range(size):
            room = draw_room(np.random.default_rng([seed, 7919, i]))
            self.rooms.append(room)
            self.rirs.append((generate_rir(room.spec("target")), generate_rir(room.spec("interferer"))))

    def __len__(self) -> int:
        return len(self.rirs)

    def draw(self, rng: np.random.Generator) -> tuple[RoomDraw, np.ndarray, np.ndarray]:
        i = int(rng.integers(len(self.rirs)))
        return self.rooms[i], *self.rirs[i]


def _take_speech(rng: np.random.Generator, utts: list[np.ndarray], n: int, tries: int = 20) -> np.ndarray:
    """Random ``n``-sample excerpt, concatenating utterances when one is too short.

    Excerpts that fall entirely into a pause are redrawn.
    """
    for _ in range(tries):
        pieces, total = [], 0
        while total < n:
            u = utts[int(rng.integers(len(utts)))]
            pieces.append(u)
            total += len(u)
        x = np.concatenate(pieces)
        start = int(rng.integers(0, len(x) - n + 1))
        excerpt = x[start : start + n]
        if np.any(excerpt):
            return excerpt
    raise ValueError("degenerate mix: could not find a non-silent speech excerpt")


def render_mixture(
    rng: np.random.Generator,
    target_dry: np.ndarray,
    interferer_dry: np.ndarray | None,
    noise_clip: np.ndarray,
    its: bool,
    rirs: tuple[RoomDraw, np.ndarray, np.ndarray] | None = None,
) -> dict:
    """Reverberate, level and sum the components of one mixture.

    SNR and SIR are set relative to the reverberant target before it is
    (for ITS) replaced by zeros.
    """
    n = len(target_dry)
    if rirs is None:
        room = draw_room(rng)
        h_t, h_i = generate_rir(room.spec("target")), generate_rir(room.spec("interferer"))
    else:
        room, h_t, h_i = rirs
    target = reverberate(target_dry, h_t)
    if power(target) <= 0:
        raise ValueError("degenerate mix: zero-energy target")
    level_db = rng.uniform(*TARGET_LEVEL_DB)
    target *= 10.0 ** (level_db / 20.0) / math.sqrt(power(target))
    snr = float(rng.uniform(*SNR_RANGE))
    offset = int(rng.integers(len(noise_clip)))
    noise, achieved_snr = mix_at_snr(target, fit_length(noise_clip, n, offset), snr)
    if interferer_dry is not None:
        sir = float(rng.uniform(*SIR_RANGE))
        interference, achieved_sir = mix_at_snr(target, reverberate(interferer_dry, h_i), sir)
    else:
        sir, achieved_sir = None, None
        interference = np.zeros(n)
    if its:
        target = np.zeros(n)
    return {
        "clean_target": target,
        "interference": interference,
        "noise": noise,
        "mixture": target + interference + noise,
        "snr_db": snr,
        "sir_db": sir,
        "achieved_snr_db": achieved_snr,
        "achieved_sir_db": achieved_sir,
        "room": room,
    }


def make_training_sample(
    rng_seed: int,
    corpus: Corpus,
    its_prob: float = 0.15,
    two_speaker_prob: float = 0.5,
    duration: float = 4.0,
    rir_bank: RirBank | None = None,
) -> MixtureSample:
    """One on-the-fly training mixture, fully determined by ``rng_seed``."""
    speakers = corpus.speakers
    if len(speakers) < 2 or not corpus.noises:
        raise ValueError("corpus too small: need >= 2 speakers and noise clips")
    rng = np.random.default_rng(rng_seed)
    n = int(round(duration * SAMPLE_RATE))
    tgt = speakers[int(rng.integers(len(speakers)))]
    two_speaker = bool(rng.random() < two_speaker_prob)
    its = bool(rng.random() < its_prob)
    target_dry = _take_speech(rng, corpus.utterances[tgt], n)
    interferer_dry, itf = None, None
    if two_speaker:
        others = [s for s in speakers if s != tgt]
        itf = others[int(rng.integers(len(others)))]
        interferer_dry = _take_speech(rng, corpus.utterances[itf], n)
    noise_clip = corpus.noises[int(rng.integers(len(corpus.noises)))]
    rirs = rir_bank.draw(rng) if rir_bank is not None else None
    parts = render_mixture(rng, target_dry, interferer_dry, noise_clip, its, rirs)
    if its:
        scenario = Scenario.TS3
    else:
        scenario = Scenario.TS1 if two_speaker else Scenario.TS2
    room = parts["room"]
    return MixtureSample(
        mixture=parts["mixture"],
        clean_target=parts["clean_target"],
        interference=parts["interference"],
        noise=parts["noise"],
        is_its=its,
        scenario=scenario,
        snr_db=parts["snr_db"],
        sir_db=parts["sir_db"],
        target_speaker_id=tgt,
        seed=int(rng_seed),
        meta={
            "interferer_id": itf,
            "achieved_snr_db": parts["achieved_snr_db"],
            "achieved_sir_db": parts["achieved_sir_db"],
            "t60": room.t60,
            "target_distance": room.target_distance,
            "interferer_distance": room.interferer_distance,
        },
    )
