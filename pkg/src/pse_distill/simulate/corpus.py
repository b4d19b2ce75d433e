"""Speech/noise corpora: a directory loader and a synthetic-speaker generator.

A corpus directory looks like::

    corpus/
      speech/<speaker_id>/*.wav
      noise/*.wav

The synthetic generator writes exactly this layout, so everything downstream
only ever sees a :class:`Corpus`.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from ..dsp import SAMPLE_RATE, read_wav, write_wav

# vowel formant table (F1, F2, F3) in Hz for a reference vocal tract
VOWELS = np.array(
    [
        [730, 1090, 2440],
        [270, 2290, 3010],
        [300, 870, 2240],
        [530, 1840, 2480],
        [570, 840, 2410],
        [660, 1720, 2410],
        [440, 1020, 2240],
        [390, 1990, 2550],
        [490, 1350, 1690],
        [640, 1190, 2390],
    ],
    dtype=float,
)


@dataclass
class Corpus:
    """In-memory corpus. ``enrollment`` utterances are disjoint from ``utterances``."""

    utterances: dict[str, list[np.ndarray]]
    enrollment: dict[str, list[np.ndarray]]
    noises: list[np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def speakers(self) -> list[str]:
        return sorted(self.utterances)

    def subset(self, speakers) -> "Corpus":
        speakers = list(speakers)
        return Corpus(
            {s: self.utterances[s] for s in speakers},
            {s: self.enrollment[s] for s in speakers},
            self.noises,
            dict(self.meta),
        )

    def split(self, n_eval: int) -> tuple["Corpus", "Corpus"]:
        """Deterministic (train, eval) split by speaker; the last ``n_eval`` sorted ids go to eval."""
        spk = self.speakers
        if n_eval >= len(spk) - 1:
            raise ValueError("corpus too small for the requested eval split")
        return self.subset(spk[:-n_eval]), self.subset(spk[-n_eval:])


def load_corpus(root: str | Path, n_enroll: int = 2) -> Corpus:
    """Load ``root/speech/<spk>/*.wav`` and ``root/noise/*.wav``.

    The first ``n_enroll`` files of each speaker (sorted by name) are held out
    for enrollment.
    """
    root = Path(root)
    utts: dict[str, list[np.ndarray]] = {}
    enroll: dict[str, list[np.ndarray]] = {}
    for spk_dir in sorted(p for p in (root / "speech").iterdir() if p.is_dir()):
        wavs = [read_wav(p) for p in sorted(spk_dir.glob("*.wav"))]
        if len(wavs) <= n_enroll:
            raise ValueError(f"speaker {spk_dir.name} has too few utterances")
        enroll[spk_dir.name] = wavs[:n_enroll]
        utts[spk_dir.name] = wavs[n_enroll:]
    noises = [read_wav(p) for p in sorted((root / "noise").glob("*.wav"))]
    if len(utts) < 2 or not noises:
        raise ValueError(f"{root}: need at least 2 speakers and 1 noise clip")
    meta_path = root / "corpus.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return Corpus(utts, enroll, noises, meta)


def write_corpus(corpus: Corpus, root: str | Path) -> Path:
    root = Path(root)
    for spk in corpus.speakers:
        d = root / "speech" / spk
        d.mkdir(parents=True, exist_ok=True)
        for i, x in enumerate(corpus.enrollment[spk] + corpus.utterances[spk]):
            write_wav(d / f"{spk}_{i:03d}.wav", x)
    (root / "noise").mkdir(parents=True, exist_ok=True)
    for i, x in enumerate(corpus.noises):
        write_wav(root / "noise" / f"noise_{i:03d}.wav", x)
    (root / "corpus.json").write_text(json.dumps(corpus.meta, indent=2, sort_keys=True))
    return root


@dataclass(frozen=True)
class SpeakerProfile:
    f0: float
    formant_scale: float
    vowels: tuple[int, ...]
    tilt_db: float
    breathiness: float
    syllable_ms: tuple[float, float]
    gap_ms: tuple[float, float]
    vibrato_hz: float

    @classmethod
    def sample(cls, rng: np.random.Generator, f0_range=(100.0, 300.0)) -> "SpeakerProfile":
        f0 = float(math.exp(rng.uniform(math.log(f0_range[0]), math.log(f0_range[1]))))
        # larger vocal tracts (lower formants) loosely go with lower pitch
        pitch_pos = math.log(f0 / f0_range[0]) / math.log(f0_range[1] / f0_range[0])
        scale = float(np.clip(0.85 + 0.3 * pitch_pos + rng.normal(0, 0.05), 0.8, 1.25))
        syl = float(rng.uniform(130, 260))
        return cls(
            f0=f0,
            formant_scale=scale,
            vowels=tuple(int(v) for v in rng.choice(len(VOWELS), size=4, replace=False)),
            tilt_db=float(rng.uniform(-14, -6)),
            breathiness=float(rng.uniform(0.0, 0.25)),
            syllable_ms=(0.7 * syl, 1.3 * syl),
            gap_ms=(float(rng.uniform(20, 60)), float(rng.uniform(120, 260))),
            vibrato_hz=float(rng.uniform(3.0, 6.0)),
        )


def _envelope(freqs: np.ndarray, formants: np.ndarray, tilt_db: float) -> np.ndarray:
    """Magnitude of a cascade of second-order resonances plus spectral tilt."""
    env = np.ones_like(freqs)
    for i, fc in enumerate(formants):
        bw = 60.0 + 40.0 * i
        env = env / np.sqrt((1.0 - (freqs / fc) ** 2) ** 2 + (freqs * bw / fc**2) ** 2)
    octaves = np.log2(np.maximum(freqs, 50.0) / 500.0)
    return env * 10.0 ** (tilt_db * np.maximum(octaves, 0.0) / 20.0)


def synth_utterance(profile: SpeakerProfile, duration: float, rng: np.random.Generator, level: float = 0.05) -> np.ndarray:
    """Syllable-like voiced segments with pitch glides, separated by pauses."""
    n = int(round(duration * SAMPLE_RATE))
    out = np.zeros(n)
    pos = int(rng.uniform(0.05, 0.3) * SAMPLE_RATE)
    while pos < n:
        seg = int(rng.uniform(*profile.syllable_ms) * SAMPLE_RATE / 1000)
        seg = min(seg, n - pos)
        if seg < 160:
            break
        t = np.arange(seg) / SAMPLE_RATE
        start = profile.f0 * rng.uniform(0.9, 1.1)
        glide = rng.uniform(-0.12, 0.12)
        f0 = start * (1.0 + glide * t / t[-1]) * (1.0 + 0.02 * np.sin(2 * np.pi * profile.vibrato_hz * t))
        phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE + rng.uniform(0, 2 * np.pi)
        vowel = VOWELS[profile.vowels[rng.integers(len(profile.vowels))]]
        formants = np.append(vowel * profile.formant_scale, 3500.0 * profile.formant_scale)
        n_harm = int(7600 // (start * 1.15))
        k = np.arange(1, n_harm + 1)
        # envelope evaluated at each harmonic of the syllable's mean pitch
        amps = _envelope(k * f0.mean(), formants, profile.tilt_db)
        voiced = (amps[:, None] * np.sin(k[:, None] * phase[None, :])).sum(axis=0)
        voiced /= np.sqrt(np.mean(voiced**2)) + 1e-12
        if profile.breathiness > 0:
            sos = signal.butter(2, [1000, 6000], btype="bandpass", fs=SAMPLE_RATE, output="sos")
            noise = signal.sosfilt(sos, rng.normal(size=seg))
            voiced = voiced + profile.breathiness * noise / (np.std(noise) + 1e-12)
        ramp = min(seg // 4, int(0.03 * SAMPLE_RATE))
        env = np.ones(seg)
        env[:ramp] = np.linspace(0, 1, ramp) ** 2
        env[seg - ramp :] = np.linspace(1, 0, ramp) ** 2
        out[pos : pos + seg] += voiced * env * rng.uniform(0.6, 1.0)
        pos += seg
        gap = rng.uniform(*profile.gap_ms)
        if rng.random() < 0.12:
            gap += rng.uniform(250, 700)
        pos += int(gap * SAMPLE_RATE / 1000)
    rms = np.sqrt(np.mean(out**2))
    return out * (level / rms) if rms > 0 else out


def synth_noise(kind: str, duration: float, rng: np.random.Generator, level: float = 0.05) -> np.ndarray:
    n = int(round(duration * SAMPLE_RATE))
    white = rng.normal(size=n)
    if kind == "white":
        x = white
    elif kind in ("pink", "brown"):
        spec = np.fft.rfft(white)
        f = np.maximum(np.fft.rfftfreq(n, 1 / SAMPLE_RATE), 20.0)
        spec /= f ** (0.5 if kind == "pink" else 1.0)
        x = np.fft.irfft(spec, n)
    elif kind == "hum":
        t = np.arange(n) / SAMPLE_RATE
        base = rng.choice([50.0, 60.0])
        x = sum(np.sin(2 * np.pi * base * h * t + rng.uniform(0, 6.3)) / h for h in range(1, 12))
        x = x + 0.3 * white
    elif kind == "band":
        lo = rng.uniform(300, 3000)
        sos = signal.butter(4, [lo, lo * rng.uniform(1.5, 3.0)], btype="bandpass", fs=SAMPLE_RATE, output="sos")
        x = signal.sosfilt(sos, white)
    elif kind == "modulated":
        t = np.arange(n) / SAMPLE_RATE
        spec = np.fft.rfft(white)
        spec /= np.maximum(np.fft.rfftfreq(n, 1 / SAMPLE_RATE), 20.0) ** 0.5
        x = np.fft.irfft(spec, n) * (1.0 + 0.8 * np.sin(2 * np.pi * rng.uniform(0.3, 2.0) * t))
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    return x * (level / np.sqrt(np.mean(x**2)))


NOISE_KINDS = ("white", "pink", "brown", "hum", "band", "modulated")


def synthetic_corpus(
    n_speakers: int = 40,
    utterances_per_speaker: int = 8,
    utterance_seconds: float = 4.5,
    n_enroll: int = 2,
    n_noises: int = 18,
    noise_seconds: float = 10.0,
    seed: int = 0,
) -> Corpus:
    """Procedurally generated speakers with distinct pitch/formant/rhythm profiles."""
    rng = np.random.default_rng(seed)
    utts: dict[str, list[np.ndarray]] = {}
    enroll: dict[str, list[np.ndarray]] = {}
    profiles = {}
    for i in range(n_speakers):
        spk = f"spk{i:03d}"
        srng = np.random.default_rng([seed, i])
        prof = SpeakerProfile.sample(srng)
        profiles[spk] = asdict(prof)
        wavs = [synth_utterance(prof, utterance_seconds, srng) for _ in range(n_enroll + utterances_per_speaker)]
        enroll[spk], utts[spk] = wavs[:n_enroll], wavs[n_enroll:]
    noises = [synth_noise(NOISE_KINDS[i % len(NOISE_KINDS)], noise_seconds, rng) for i in range(n_noises)]
    meta = {"generator": "synthetic", "seed": seed, "profiles": profiles}
    return Corpus(utts, enroll, noises, meta)
