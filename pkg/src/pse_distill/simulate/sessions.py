"""Long-form evaluation sessions and JSON Lines dataset manifests."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from ..dsp import SAMPLE_RATE, read_wav, to_pcm16, write_wav
from .corpus import Corpus
from .mixing import MixtureSample, Scenario, render_mixture

COMPONENTS = ("mixture", "clean_target", "interference", "noise")


@dataclass
class EvalSession:
    sample: MixtureSample
    enrollment: list[np.ndarray]
    segment_lengths: list[int] = field(default_factory=list)

    @property
    def duration(self) -> float:
        return len(self.sample.mixture) / SAMPLE_RATE


def build_eval_session(
    speaker_id: str,
    scenario: Scenario | str,
    corpus: Corpus,
    rng_seed: int,
    n_utterances: int | None = None,
) -> EvalSession:
    """Concatenate per-utterance mixtures of one speaker into a single session.

    Enrollment comes from the speaker's held-out enrollment utterances. Each
    constituent mixture gets its own room, noise excerpt and levels; for TS3
    the speaker's utterances only set the reference level and are zeroed.
    """
    scenario = Scenario.parse(scenario)
    utts = corpus.utterances.get(speaker_id, [])
    enroll = corpus.enrollment.get(speaker_id, [])
    n_utterances = len(utts) if n_utterances is None else n_utterances
    if not enroll or len(utts) < max(1, n_utterances):
        raise ValueError(f"speaker {speaker_id}: insufficient utterances for a session")
    for e in enroll:
        if any(e is u for u in utts):
            raise ValueError("enrollment utterances overlap session utterances")
    others = [s for s in corpus.speakers if s != speaker_id]
    if scenario is not Scenario.TS2 and not others:
        raise ValueError("need at least one interfering speaker")
    rng = np.random.default_rng(rng_seed)
    parts: dict[str, list[np.ndarray]] = {k: [] for k in COMPONENTS}
    snrs, sirs = [], []
    for u in utts[:n_utterances]:
        interferer = None
        if scenario is not Scenario.TS2:
            itf = others[int(rng.integers(len(others)))]
            pool = corpus.utterances[itf]
            interferer = np.resize(pool[int(rng.integers(len(pool)))], len(u))
        noise = corpus.noises[int(rng.integers(len(corpus.noises)))]
        mix = render_mixture(rng, u, interferer, noise, its=scenario is Scenario.TS3)
        for k in COMPONENTS:
            parts[k].append(mix[k])
        snrs.append(mix["snr_db"])
        if mix["sir_db"] is not None:
            sirs.append(mix["sir_db"])
    comp = {k: np.concatenate(v) for k, v in parts.items()}
    sample = MixtureSample(
        mixture=comp["mixture"],
        clean_target=comp["clean_target"],
        interference=comp["interference"],
        noise=comp["noise"],
        is_its=scenario is Scenario.TS3,
        scenario=scenario,
        snr_db=float(np.mean(snrs)),
        sir_db=float(np.mean(sirs)) if sirs else None,
        target_speaker_id=speaker_id,
        seed=int(rng_seed),
        meta={"segment_snr_db": snrs, "segment_sir_db": sirs},
    )
    return EvalSession(sample, list(enroll), [len(p) for p in parts["mixture"]])


def write_sample(sample: MixtureSample, out_dir: Path, name: str, enrollment_paths: list[str], manifest_dir: Path) -> dict:
    """Write component WAVs and return the manifest record (paths relative to ``manifest_dir``).

    Components are quantised first and the stored mixture is their integer
    sum, so additivity also holds exactly for the files on disk.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    pcm = {k: to_pcm16(getattr(sample, k)).astype(np.int32) for k in COMPONENTS[1:]}
    total = pcm["clean_target"] + pcm["interference"] + pcm["noise"]
    if np.any(np.abs(total) > 32767):
        raise ValueError(f"{name}: mixture clips in 16-bit PCM")
    pcm["mixture"] = total
    rec: dict = {}
    for k in COMPONENTS:
        path = out_dir / f"{name}_{k}.wav"
        wavfile.write(str(path), SAMPLE_RATE, pcm[k].astype("<i2"))
        rec[k] = os.path.relpath(path, manifest_dir)
    rec.update(
        scenario=sample.scenario.value,
        snr_db=sample.snr_db,
        sir_db=sample.sir_db,
        is_its=sample.is_its,
        target_speaker_id=sample.target_speaker_id,
        enrollment=[os.path.relpath(p, manifest_dir) for p in enrollment_paths],
        seed=sample.seed,
    )
    return rec


def write_enrollment(corpus: Corpus, speaker_id: str, out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, x in enumerate(corpus.enrollment[speaker_id]):
        p = out_dir / f"{speaker_id}_enroll_{i:02d}.wav"
        if not p.exists():
            write_wav(p, x)
        paths.append(p)
    return paths


def write_manifest(records: list[dict], path: str | Path) -> None:
    seeds = [r["seed"] for r in records]
    if len(set(seeds)) != len(seeds):
        raise ValueError("record seeds must be unique within a manifest")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_manifest(path: str | Path, resolve: bool = True) -> list[dict]:
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if resolve:
                for k in COMPONENTS:
                    rec[k] = str((path.parent / rec[k]).resolve())
                rec["enrollment"] = [str((path.parent / p).resolve()) for p in rec["enrollment"]]
            records.append(rec)
    return records


def load_record(rec: dict) -> tuple[MixtureSample, list[np.ndarray]]:
    """Re-materialise a resolved manifest record."""
    comp = {k: read_wav(rec[k]) for k in COMPONENTS}
    sample = MixtureSample(
        mixture=comp["mixture"],
        clean_target=comp["clean_target"],
        interference=comp["interference"],
        noise=comp["noise"],
        is_its=bool(rec["is_its"]),
        scenario=Scenario.parse(rec["scenario"]),
        snr_db=float(rec["snr_db"]),
        sir_db=None if rec["sir_db"] is None else float(rec["sir_db"]),
        target_speaker_id=rec["target_speaker_id"],
        seed=int(rec["seed"]),
    )
    return sample, [read_wav(p) for p in rec["enrollment"]]
