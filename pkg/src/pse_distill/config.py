"""Run configuration: TOML sections mapped onto dataclasses."""
from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import tomli_w

from .loss import LossConfig
from .model import PseConfig, PvadConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class OptimizerConfig:
    name: str = "adam"
    learning_rate: float = 2e-4
    batch_size: int = 8
    steps: int = 2000
    grad_clip: float = 5.0
    eval_every: int = 100
    patience: int = 10


@dataclass
class DataConfig:
    # "synthetic" generates the built-in corpus; anything else is a corpus directory
    corpus: str = "synthetic"
    manifest: str = ""
    synthetic_speakers: int = 48
    synthetic_utterances: int = 8
    synthetic_seed: int = 0
    eval_speakers: int = 8
    its_prob: float = 0.15
    two_speaker_prob: float = 0.5
    utterance_seconds: float = 4.0
    rir_bank_size: int = 64
    specaugment: bool = True
    val_samples: int = 48
    seed: int = 1234


@dataclass
class RunConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    pse: PseConfig = field(default_factory=PseConfig)
    pvad: PvadConfig = field(default_factory=PvadConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    # the teacher converges faster with a larger step and needs fewer updates
    pvad_optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(learning_rate=1e-3, steps=1000))
    data: DataConfig = field(default_factory=DataConfig)
    checkpoint_dir: str = "checkpoints"
    pvad_checkpoint: str = ""
    seed: int = 0

    def validate(self) -> None:
        if self.loss.variant.value != "plcpa" and not self.pvad_checkpoint:
            raise ValueError(f"loss variant {self.loss.variant.value} requires a pvad_checkpoint")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def hash(self, *sections: str) -> str:
        """Stable digest of the resolved config (optionally only some sections)."""
        d = self.to_dict()
        if sections:
            d = {k: d[k] for k in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(tomli_w.dumps(self.to_dict()))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, enum.Enum):
        return obj.value
    return obj


_SECTIONS = {"loss": LossConfig, "pse": PseConfig, "pvad": PvadConfig, "optimizer": OptimizerConfig, "pvad_optimizer": OptimizerConfig, "data": DataConfig}


def from_dict(d: dict) -> RunConfig:
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = d.get(name, {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(section) - known
        if unknown:
            raise ValueError(f"unknown keys in [{name}]: {sorted(unknown)}")
        kwargs[name] = cls(**section)
    top = {k: v for k, v in d.items() if k not in _SECTIONS}
    known = {f.name for f in dataclasses.fields(RunConfig)} - set(_SECTIONS)
    unknown = set(top) - known
    if unknown:
        raise ValueError(f"unknown top-level keys: {sorted(unknown)}")
    return RunConfig(**kwargs, **top)


def load_config(path: str | Path) -> RunConfig:
    with open(path, "rb") as fh:
        return from_dict(tomllib.load(fh))


def override(cfg: RunConfig, **changes) -> RunConfig:
    """Copy of ``cfg`` with dotted-key overrides, e.g. ``override(cfg, **{"loss.tau": 0.25})``."""
    d = cfg.to_dict()
    for key, value in changes.items():
        target = d
        *parents, leaf = key.split(".")
        for p in parents:
            target = target[p]
        target[leaf] = value
    return from_dict(d)
