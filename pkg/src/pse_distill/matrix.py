"""Experiment matrix: train (or reuse) each system, evaluate sessions, write the report."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_model
from .config import RunConfig, override
from .dsp import SAMPLE_RATE
from .embed import MelStatsEmbedder
from .loss import Variant
from .metrics import session_metrics
from .model import pse_forward
from .simulate.corpus import Corpus
from .simulate.mixing import Scenario
from .simulate.sessions import build_eval_session
from .train import TrainResult, resolve_corpus, train_pse, train_pvad

log = logging.getLogger(__name__)

CSV_COLUMNS = ("system", "scenario", "tsos_segments", "tsos_seconds", "delta_n_db")
DONE_FILE = "done.json"


@dataclass(frozen=True)
class SystemSpec:
    name: str
    its_prob: float
    variant: Variant = Variant.PLCPA
    tau: float = 0.5
    asym_weight: float = 0.0

    @property
    def train_data(self) -> str:
        return "BaseITS" if self.its_prob > 0 else "Base"


DEFAULT_SYSTEMS = (
    SystemSpec("B1", 0.0),
    SystemSpec("B2", 0.15),
    SystemSpec("S1", 0.15, Variant.EXCLUDE),
    SystemSpec("S4", 0.15, Variant.POSTERIOR),
    SystemSpec("S5", 0.15, Variant.MIX_REF),
)

# the same recipes with the over-suppression term added at unit weight
ASYM_SYSTEMS = (
    SystemSpec("B1a", 0.0, asym_weight=1.0),
    SystemSpec("B2a", 0.15, asym_weight=1.0),
    SystemSpec("S4a", 0.15, Variant.POSTERIOR, asym_weight=1.0),
)
KNOWN_SYSTEMS = DEFAULT_SYSTEMS + ASYM_SYSTEMS


@dataclass
class ExperimentMatrix:
    systems: tuple[SystemSpec, ...] = DEFAULT_SYSTEMS
    scenarios: tuple[Scenario, ...] = (Scenario.TS1, Scenario.TS2, Scenario.TS3)
    eval_utterances: int | None = None  # per session; None uses all of a speaker's utterances
    eval_seed: int = 777

    def __post_init__(self):
        names = [s.name for s in self.systems]
        if len(set(names)) != len(names):
            raise ValueError(f"system names must be unique: {names}")
        self.scenarios = tuple(Scenario.parse(s) for s in self.scenarios)

    def select(self, names) -> "ExperimentMatrix":
        by_name = {s.name: s for s in KNOWN_SYSTEMS + tuple(self.systems)}
        missing = [n for n in names if n not in by_name]
        if missing:
            raise ValueError(f"unknown systems {missing}; known: {sorted(by_name)}")
        return ExperimentMatrix(tuple(by_name[n] for n in names), self.scenarios, self.eval_utterances, self.eval_seed)


# ----------------------------------------------------------------------------- caching


@contextmanager
def cell_lock(path: Path):
    """Exclusive per-cell lock file; a second process fails fast instead of racing."""
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"{path} exists: another process is working on this cell (delete it if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        yield
    finally:
        os.close(fd)
        path.unlink(missing_ok=True)


def cached(out_dir: Path, config_hash: str) -> dict | None:
    done = out_dir / DONE_FILE
    if not done.exists():
        return None
    info = json.loads(done.read_text())
    return info if info.get("config_hash") == config_hash else None


def _mark_done(out_dir: Path, config_hash: str, result: TrainResult) -> dict:
    info = {
        "config_hash": config_hash,
        "checkpoint": result.checkpoint.name,
        "best_val": result.best_val,
        "best_step": result.best_step,
        "seconds": result.seconds,
    }
    (out_dir / DONE_FILE).write_text(json.dumps(info, indent=1, sort_keys=True))
    return info


def pvad_cfg(base: RunConfig, root: Path) -> RunConfig:
    return override(base, checkpoint_dir=str(root / "pvad"))


def pvad_hash(cfg: RunConfig) -> str:
    return cfg.hash("pvad", "pvad_optimizer", "data", "seed")


def ensure_pvad(base: RunConfig, root: Path, corpus: Corpus | None = None) -> Path:
    cfg = pvad_cfg(base, root)
    out, h = Path(cfg.checkpoint_dir), pvad_hash(cfg)
    info = cached(out, h)
    if info is None:
        with cell_lock(out.with_suffix(".lock")):
            log.info("training pVAD -> %s", out)
            info = _mark_done(out, h, train_pvad(cfg, corpus))
    return out / info["checkpoint"]


def system_cfg(base: RunConfig, spec: SystemSpec, root: Path, pvad_checkpoint: Path | None) -> RunConfig:
    return override(
        base,
        **{
            "data.its_prob": spec.its_prob,
            "loss.variant": spec.variant.value,
            "loss.tau": spec.tau,
            "loss.asym_weight": spec.asym_weight,
            "checkpoint_dir": str(root / "systems" / spec.name),
            "pvad_checkpoint": str(pvad_checkpoint) if spec.variant is not Variant.PLCPA else "",
        },
    )


def system_hash(cfg: RunConfig, pvad_digest: str | None) -> str:
    h = cfg.hash("loss", "pse", "optimizer", "data", "seed")
    return f"{h}-{pvad_digest}" if pvad_digest else h


def ensure_system(base: RunConfig, spec: SystemSpec, root: Path, corpus: Corpus | None = None) -> Path:
    pvad = ensure_pvad(base, root, corpus) if spec.variant is not Variant.PLCPA else None
    cfg = system_cfg(base, spec, root, pvad)
    out = Path(cfg.checkpoint_dir)
    h = system_hash(cfg, pvad_hash(pvad_cfg(base, root)) if pvad else None)
    info = cached(out, h)
    if info is None:
        with cell_lock(out.with_suffix(".lock")):
            log.info("training %s -> %s", spec.name, out)
            info = _mark_done(out, h, train_pse(cfg, pvad, corpus))
    return out / info["checkpoint"]


# ----------------------------------------------------------------------------- evaluation


def eval_corpus(base: RunConfig, corpus: Corpus | None = None) -> Corpus:
    full = corpus if corpus is not None else resolve_corpus(base.data)
    return full.split(base.data.eval_speakers)[1]


def evaluate_items(model, items, out_dir: Path | None = None, config: dict | None = None) -> list[dict]:
    """Metrics for ``(name, MixtureSample, enrollment)`` items under one PSE model.

    With ``out_dir``, writes ``sessions.json`` holding the rows and ``config``.
    """
    embedder = MelStatsEmbedder()
    rows = []
    for name, s, enrollment in items:
        d = embedder.embed(enrollment)
        est = pse_forward(s.mixture, d, model)
        m = session_metrics(s.clean_target, s.mixture, est, s.scenario.value)
        m.update(session=name, speaker=s.target_speaker_id, duration_s=len(s.mixture) / SAMPLE_RATE)
        rows.append(m)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        report = {"config": config or {}, "sessions": rows}
        (out_dir / "sessions.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    return rows


def eval_sessions(corpus: Corpus, scenarios, n_utterances=None, seed: int = 777):
    """Deterministic session set: every eval speaker under every scenario."""
    for si, scenario in enumerate(Scenario.parse(s) for s in scenarios):
        for ki, spk in enumerate(corpus.speakers):
            session = build_eval_session(spk, scenario, corpus, seed * 1000 + si * 100 + ki, n_utterances)
            yield f"{scenario.value}_{spk}", session.sample, session.enrollment


def evaluate_checkpoint(
    checkpoint: str | Path, corpus: Corpus, scenarios, n_utterances=None, seed: int = 777, out_dir: Path | None = None
) -> list[dict]:
    model, meta = load_model(checkpoint, expect_kind="pse")
    return evaluate_items(model, eval_sessions(corpus, scenarios, n_utterances, seed), out_dir, meta)


def aggregate(system: str, rows: list[dict]) -> list[dict]:
    """One CSV row per scenario: TSOS summed over sessions, ΔN averaged."""
    out = []
    for scenario in dict.fromkeys(r["scenario"] for r in rows):
        rs = [r for r in rows if r["scenario"] == scenario]
        row = {"system": system, "scenario": scenario, "tsos_segments": None, "tsos_seconds": None, "delta_n_db": None}
        if rs[0]["tsos_segments"] is not None:
            row["tsos_segments"] = int(sum(r["tsos_segments"] for r in rs))
            row["tsos_seconds"] = round(float(sum(r["tsos_seconds"] for r in rs)), 6)
        if rs[0]["delta_n_db"] is not None:
            row["delta_n_db"] = round(float(np.mean([r["delta_n_db"] for r in rs])), 6)
        out.append(row)
    return out


def write_csv(rows: list[dict], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: "" if r[k] is None else r[k] for k in CSV_COLUMNS})


def read_csv(path: Path) -> list[dict]:
    def num(v, kind):
        return None if v == "" else kind(v)

    with open(path, newline="") as fh:
        return [
            {
                "system": r["system"],
                "scenario": r["scenario"],
                "tsos_segments": num(r["tsos_segments"], int),
                "tsos_seconds": num(r["tsos_seconds"], float),
                "delta_n_db": num(r["delta_n_db"], float),
            }
            for r in csv.DictReader(fh)
        ]


def format_table(rows: list[dict]) -> str:
    """Plain-text table: systems down, scenarios across."""
    systems = list(dict.fromkeys(r["system"] for r in rows))
    scenarios = list(dict.fromkeys(r["scenario"] for r in rows))
    cell = {(r["system"], r["scenario"]): r for r in rows}
    buf = io.StringIO()
    head = ["system"] + [f"{s} {'dN (dB)' if s == 'TS3' else 'TSOS seg/s'}" for s in scenarios]
    buf.write(" | ".join(f"{h:>16}" for h in head) + "\n")
    buf.write("-" * (19 * len(head)) + "\n")
    for name in systems:
        vals = [name]
        for s in scenarios:
            r = cell.get((name, s))
            if r is None:
                vals.append("-")
            elif s == "TS3":
                vals.append(f"{r['delta_n_db']:.1f}")
            else:
                vals.append(f"{r['tsos_segments']}/{r['tsos_seconds']:.2f}")
        buf.write(" | ".join(f"{v:>16}" for v in vals) + "\n")
    return buf.getvalue()


@dataclass
class MatrixResult:
    rows: list[dict]
    csv_path: Path
    table_path: Path
    checkpoints: dict[str, Path] = field(default_factory=dict)


def run_matrix(matrix: ExperimentMatrix, base: RunConfig, root: str | Path, corpus: Corpus | None = None) -> MatrixResult:
    root = Path(root)
    if corpus is None:
        corpus = resolve_corpus(base.data)
    test_corpus = eval_corpus(base, corpus)
    rows, ckpts = [], {}
    for spec in matrix.systems:
        ckpt = ensure_system(base, spec, root, corpus)
        ckpts[spec.name] = ckpt
        sess = evaluate_checkpoint(
            ckpt, test_corpus, matrix.scenarios, matrix.eval_utterances, matrix.eval_seed, root / "eval" / spec.name
        )
        rows.extend(aggregate(spec.name, sess))
    csv_path, table_path = root / "report.csv", root / "report.txt"
    write_csv(rows, csv_path)
    table_path.write_text(format_table(rows))
    return MatrixResult(rows, csv_path, table_path, ckpts)
