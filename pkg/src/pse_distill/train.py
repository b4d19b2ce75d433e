"""pVAD teacher training and PSE training with cross-task distillation."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .checkpoint import load_model, save_model
from .config import DataConfig, OptimizerConfig, RunConfig
from .dsp import stft
from .embed import DVector, MelStatsEmbedder
from .loss import LossConfig, Variant, batch_loss, plcpa, asym_os
from .metrics import speech_activity_mask
from .model import PseNet, PvadNet, config_dict
from .simulate.augment import signal_specaugment
from .simulate.corpus import Corpus, load_corpus, synthetic_corpus
from .simulate.mixing import MixtureSample, RirBank, make_training_sample
from .simulate.sessions import load_record, read_manifest

log = logging.getLogger(__name__)

VAL_STRIDE = 20  # every 20th seed index (5%) is reserved for validation


class TrainingDiverged(RuntimeError):
    pass


def make_vad_labels(sample: MixtureSample) -> np.ndarray:
    """Frame-level target activity from the clean target; all zeros for ITS samples."""
    if sample.is_its:
        n = 1 + (len(sample.mixture) - 320) // 160
        return np.zeros(n, dtype=bool)
    return speech_activity_mask(sample.clean_target)


def sample_seed(base: int, index: int) -> int:
    return int(base) * 1_000_003 + int(index)


def train_index(step: int, slot: int, batch_size: int) -> int:
    """Map (step, slot) onto seed indices, skipping the validation stride."""
    k = step * batch_size + slot
    return k + k // (VAL_STRIDE - 1) + 1


def val_index(i: int) -> int:
    return i * VAL_STRIDE


@lru_cache(maxsize=4)
def _synthetic(n_speakers: int, n_utts: int, seed: int) -> Corpus:
    return synthetic_corpus(n_speakers=n_speakers, utterances_per_speaker=n_utts, seed=seed)


def resolve_corpus(data: DataConfig) -> Corpus:
    if data.corpus == "synthetic":
        return _synthetic(data.synthetic_speakers, data.synthetic_utterances, data.synthetic_seed)
    return load_corpus(data.corpus)


@lru_cache(maxsize=4)
def _rir_bank(size: int, seed: int) -> RirBank:
    return RirBank(size, seed)


@dataclass
class Batch:
    mixture: torch.Tensor  # raw mixture
    inputs: torch.Tensor  # what the models see (augmented mixture)
    clean: torch.Tensor
    dvec: torch.Tensor
    is_its: torch.Tensor
    labels: torch.Tensor
    seeds: list[int] = field(default_factory=list)


class DataSource:
    """Seeded on-the-fly mixtures from the training speakers of a corpus."""

    def __init__(self, cfg: RunConfig, corpus: Corpus | None = None, embedder=None):
        self.cfg = cfg
        data = cfg.data
        full = corpus if corpus is not None else resolve_corpus(data)
        self.train_corpus, self.eval_corpus = full.split(data.eval_speakers) if data.eval_speakers else (full, None)
        self.embedder = embedder or MelStatsEmbedder()
        self.dvectors: dict[str, DVector] = {
            s: self.embedder.embed(self.train_corpus.enrollment[s]) for s in self.train_corpus.speakers
        }
        self.bank = _rir_bank(data.rir_bank_size, data.seed) if data.rir_bank_size else None
        self.records = read_manifest(data.manifest) if data.manifest else None

    def dvector_matrix(self) -> torch.Tensor:
        return torch.tensor(np.stack([d.values for d in self.dvectors.values()]))

    def sample(self, seed: int) -> tuple[MixtureSample, DVector]:
        data = self.cfg.data
        if self.records is not None:
            rec = self.records[seed % len(self.records)]
            s, enroll = load_record(rec)
            return s, self.embedder.embed(enroll)
        s = make_training_sample(
            seed, self.train_corpus, data.its_prob, data.two_speaker_prob, data.utterance_seconds, self.bank
        )
        return s, self.dvectors[s.target_speaker_id]

    def batch(self, seeds: list[int], augment: bool) -> Batch:
        samples, inputs, dvecs = [], [], []
        for seed in seeds:
            s, d = self.sample(seed)
            x = s.mixture
            if augment:
                x = signal_specaugment(x, np.random.default_rng([seed, 17]))
            samples.append(s)
            inputs.append(x)
            dvecs.append(d.values)
        f32 = lambda xs: torch.tensor(np.stack(xs), dtype=torch.float32)  # noqa: E731
        return Batch(
            mixture=f32([s.mixture for s in samples]),
            inputs=f32(inputs),
            clean=f32([s.clean_target for s in samples]),
            dvec=f32(dvecs),
            is_its=torch.tensor([s.is_its for s in samples]),
            labels=torch.tensor(np.stack([make_vad_labels(s) for s in samples]), dtype=torch.long),
            seeds=list(seeds),
        )

    def train_batch(self, step: int, augment: bool, bs: int) -> Batch:
        return self.batch([sample_seed(self.cfg.data.seed, train_index(step, b, bs)) for b in range(bs)], augment)

    def val_batches(self, bs: int) -> list[Batch]:
        n = self.cfg.data.val_samples
        seeds = [sample_seed(self.cfg.data.seed, val_index(i)) for i in range(n)]
        return [self.batch(seeds[i : i + bs], augment=False) for i in range(0, n, bs)]


@dataclass
class TrainResult:
    checkpoint: Path
    history: list[dict]
    best_val: float
    best_step: int
    seconds: float


def _optimizer(params, opt: OptimizerConfig) -> torch.optim.Optimizer:
    if opt.name.lower() != "adam":
        raise ValueError(f"unsupported optimizer {opt.name!r}")
    return torch.optim.Adam(params, lr=opt.learning_rate)


def _check_finite(loss: torch.Tensor, step: int, what: str) -> None:
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"{what} loss became {loss.item()} at step {step}; lower the learning rate or check the data")


class _EarlyStop:
    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_step = -1
        self.best_state: dict | None = None
        self.bad = 0

    def update(self, value: float, step: int, model: nn.Module) -> bool:
        """Record a validation value; returns True when training should stop."""
        if value < self.best:
            self.best, self.best_step, self.bad = value, step, 0
            self.best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        else:
            self.bad += 1
        return self.bad >= self.patience


def _finish(model, es: _EarlyStop, cfg: RunConfig, kind: str, history: list, t0: float, extra: dict) -> TrainResult:
    out = Path(cfg.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    if es.best_state is not None:
        model.load_state_dict(es.best_state)
    path = out / f"{kind}.ckpt"
    model_cfg = cfg.pse if kind == "pse" else cfg.pvad
    save_model(path, model, kind, config_dict(model_cfg), cfg.seed, {"run_hash": cfg.hash(), "best_step": es.best_step, **extra})
    cfg.save(out / f"{kind}_config.toml")
    (out / f"{kind}_history.json").write_text(json.dumps(history, indent=1))
    return TrainResult(path, history, es.best, es.best_step, time.time() - t0)


# ----------------------------------------------------------------------------- pVAD


def pvad_loss(model: PvadNet, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
    """Frame-wise cross-entropy of the 2-way softmax, and per-frame correctness."""
    logits = model.logits(batch.inputs, batch.dvec)
    loss = nn.functional.cross_entropy(logits.reshape(-1, 2), batch.labels.reshape(-1))
    correct = (logits.argmax(-1) == batch.labels).float()
    return loss, correct


def train_pvad(cfg: RunConfig, corpus: Corpus | None = None, progress: Callable[[dict], None] | None = None) -> TrainResult:
    t0 = time.time()
    src = DataSource(cfg, corpus)
    model = PvadNet(cfg.pvad)
    model.set_dvector_stats(src.dvector_matrix())
    probe = src.batch([sample_seed(cfg.data.seed, train_index(0, b, 16)) for b in range(16)], augment=False)
    model.set_feature_stats(model.frontend(probe.inputs))
    oc = cfg.pvad_optimizer
    opt = _optimizer(model.parameters(), oc)
    val = src.val_batches(oc.batch_size)
    es = _EarlyStop(oc.patience)
    history, running = [], []
    for step in range(oc.steps):
        model.train()
        batch = src.train_batch(step, augment=cfg.data.specaugment, bs=oc.batch_size)
        loss, _ = pvad_loss(model, batch)
        _check_finite(loss, step, "pVAD")
        opt.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(model.parameters(), oc.grad_clip)
        opt.step()
        running.append(loss.item())
        if (step + 1) % oc.eval_every == 0 or step + 1 == oc.steps:
            model.eval()
            with torch.no_grad():
                vals = [pvad_loss(model, b) for b in val]
            v_loss = float(np.mean([v[0].item() for v in vals]))
            v_acc = float(torch.cat([v[1].reshape(-1) for v in vals]).mean())
            rec = {"step": step + 1, "train_loss": float(np.mean(running)), "val_loss": v_loss, "val_accuracy": v_acc}
            history.append(rec)
            running = []
            log.info("pvad %s", rec)
            if progress:
                progress(rec)
            if es.update(v_loss, step + 1, model):
                break
    best = next(h for h in history if h["step"] == es.best_step)
    return _finish(model, es, cfg, "pvad", history, t0, {"val_accuracy": best["val_accuracy"]})


# ----------------------------------------------------------------------------- PSE


def teacher_posteriors(teacher: PvadNet | None, batch: Batch) -> torch.Tensor | None:
    """Teacher p_ts on the (augmented) model input; only ITS rows are ever used."""
    if teacher is None or not bool(batch.is_its.any()):
        return None
    with torch.no_grad():
        return teacher(batch.inputs, batch.dvec)


def pse_batch_loss(model: PseNet, batch: Batch, p_ts: torch.Tensor | None, cfg: LossConfig, check_dispatch: bool = False) -> torch.Tensor:
    est = model(batch.inputs, batch.dvec)
    S, S_hat, Y = stft(batch.clean), stft(est), stft(batch.inputs)
    if p_ts is None and cfg.variant is not Variant.PLCPA and bool(batch.is_its.any()):
        raise ValueError("ITS samples in the batch but no teacher posteriors")
    loss = batch_loss(S, S_hat, Y, batch.is_its, p_ts, cfg)
    if check_dispatch:
        for b in torch.nonzero(~batch.is_its).flatten().tolist():
            ref = plcpa(S[b], S_hat[b], cfg)[1]
            if cfg.asym_weight > 0:
                ref = ref + cfg.asym_weight * asym_os(S[b], S_hat[b], cfg)[1]
            single = batch_loss(S[b : b + 1], S_hat[b : b + 1], Y[b : b + 1], batch.is_its[b : b + 1], None, cfg)
            if not torch.equal(single, ref):
                raise AssertionError("non-ITS sample did not use the plain PLCPA loss")
    return loss


def pse_step(model: PseNet, opt: torch.optim.Optimizer, batch: Batch, p_ts, cfg: LossConfig, grad_clip: float, check_dispatch: bool = False) -> float:
    model.train()
    loss = pse_batch_loss(model, batch, p_ts, cfg, check_dispatch)
    opt.zero_grad()
    loss.backward()
    nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    opt.step()
    return loss.item()


def load_teacher(path: str | Path) -> PvadNet:
    teacher, _ = load_model(path, expect_kind="pvad")
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher


def param_digest(model: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for k, v in sorted(model.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def train_pse(
    cfg: RunConfig,
    pvad_checkpoint: str | Path | None = None,
    corpus: Corpus | None = None,
    progress: Callable[[dict], None] | None = None,
    check_dispatch: bool = False,
) -> TrainResult:
    t0 = time.time()
    pvad_checkpoint = pvad_checkpoint or cfg.pvad_checkpoint or None
    needs_teacher = cfg.loss.variant is not Variant.PLCPA
    if needs_teacher and not pvad_checkpoint:
        raise ValueError(f"loss variant {cfg.loss.variant.value} requires a pVAD checkpoint (run train-pvad first)")
    teacher = load_teacher(pvad_checkpoint) if needs_teacher else None
    teacher_digest = param_digest(teacher) if teacher is not None else None

    src = DataSource(cfg, corpus)
    model = PseNet(cfg.pse)
    model.set_dvector_stats(src.dvector_matrix())
    oc = cfg.optimizer
    opt = _optimizer(model.parameters(), oc)
    val = src.val_batches(oc.batch_size)
    val_pts = [teacher_posteriors(teacher, b) for b in val]
    es = _EarlyStop(oc.patience)
    history, running = [], []
    its_frames = its_gated = 0.0
    for step in range(oc.steps):
        batch = src.train_batch(step, augment=cfg.data.specaugment, bs=oc.batch_size)
        p_ts = teacher_posteriors(teacher, batch)
        if p_ts is not None:
            its = p_ts[batch.is_its]
            its_frames += its.numel()
            its_gated += float((its >= cfg.loss.tau).sum())
        loss = pse_step(model, opt, batch, p_ts, cfg.loss, oc.grad_clip, check_dispatch)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"PSE loss became {loss} at step {step}; lower the learning rate or check the data")
        running.append(loss)
        if (step + 1) % oc.eval_every == 0 or step + 1 == oc.steps:
            model.eval()
            with torch.no_grad():
                v_loss = float(np.mean([pse_batch_loss(model, b, p, cfg.loss).item() for b, p in zip(val, val_pts)]))
            rec = {"step": step + 1, "train_loss": float(np.mean(running)), "val_loss": v_loss}
            history.append(rec)
            running = []
            log.info("pse %s", rec)
            if progress:
                progress(rec)
            if es.update(v_loss, step + 1, model):
                break
    if teacher is not None and param_digest(teacher) != teacher_digest:
        raise AssertionError("teacher parameters changed during PSE training")
    extra = {"variant": cfg.loss.variant.value, "its_gated_fraction": its_gated / its_frames if its_frames else None}
    return _finish(model, es, cfg, "pse", history, t0, extra)
