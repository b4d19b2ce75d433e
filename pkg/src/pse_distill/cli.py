"""Command-line entry point: ``pse-distill <command> ...``.

Exit codes: 0 success, 1 user error (bad arguments, missing inputs or
prerequisites), 2 internal error. Diagnostics go to stderr; data goes to files.
"""
from __future__ import annotations

import argparse
import glob
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import torch

from .config import RunConfig, load_config, override
from .embed import MelStatsEmbedder, save_dvector
from .dsp import read_wav
from .loss import Variant
from .matrix import (
    ASYM_SYSTEMS,
    DEFAULT_SYSTEMS,
    ExperimentMatrix,
    aggregate,
    cell_lock,
    eval_corpus,
    eval_sessions,
    evaluate_items,
    format_table,
    read_csv,
    run_matrix,
    write_csv,
)
from .checkpoint import load_model
from .simulate.mixing import RirBank, Scenario, make_training_sample
from .simulate.sessions import load_record, read_manifest, write_enrollment, write_manifest, write_sample
from .train import resolve_corpus, sample_seed, train_pse, train_pvad

log = logging.getLogger("pse_distill")


class UserError(Exception):
    pass


def _threads() -> None:
    n = int(os.environ.get("PSE_DISTILL_THREADS", "1"))
    torch.set_num_threads(max(1, n))


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = override(cfg, **{"seed": args.seed, "data.seed": args.seed})
    return cfg


def _digest(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _skip(out: Path, key: dict) -> bool:
    """True when ``out`` already holds a completed artifact for exactly this key."""
    done = out / "done.json"
    if done.exists() and json.loads(done.read_text()).get("config_hash") == _digest(key):
        log.info("%s is up to date; skipping", out)
        return True
    return False


def _done(out: Path, key: dict) -> None:
    (out / "done.json").write_text(json.dumps({"config_hash": _digest(key), "key": key}, indent=1, sort_keys=True, default=str))


# ----------------------------------------------------------------------------- commands


def cmd_simulate(args, cfg: RunConfig) -> None:
    out = Path(args.out_dir)
    if args.corpus:
        cfg = override(cfg, **{"data.corpus": str(Path(args.corpus).resolve())})
    if args.its_prob is not None:
        cfg = override(cfg, **{"data.its_prob": args.its_prob})
    if args.n_samples is not None and args.hours is not None:
        raise UserError("give --n-samples or --hours, not both")
    n = args.n_samples if args.n_samples is not None else 200
    if args.hours is not None:
        n = max(1, round(args.hours * 3600 / cfg.data.utterance_seconds))
    key = {"cmd": "simulate", "data": cfg.to_dict()["data"], "n": n}
    if _skip(out, key):
        return
    corpus = resolve_corpus(cfg.data).split(cfg.data.eval_speakers)[0]
    bank = RirBank(cfg.data.rir_bank_size, cfg.data.seed) if cfg.data.rir_bank_size else None
    with cell_lock(out / ".lock"):
        records = []
        for i in range(n):
            seed = sample_seed(cfg.data.seed, i)
            s = make_training_sample(seed, corpus, cfg.data.its_prob, cfg.data.two_speaker_prob, cfg.data.utterance_seconds, bank)
            enroll = write_enrollment(corpus, s.target_speaker_id, out / "enrollment")
            records.append(write_sample(s, out / "audio", f"train_{i:06d}", [str(p) for p in enroll], out))
        write_manifest(records, out / "manifest.jsonl")
        _done(out, key)
    log.info("wrote %d samples to %s", len(records), out / "manifest.jsonl")


def cmd_simulate_eval(args, cfg: RunConfig) -> None:
    out = Path(args.out_dir)
    scenarios = [Scenario.parse(s) for s in args.scenarios.split(",")]
    key = {"cmd": "simulate-eval", "data": cfg.to_dict()["data"], "scenarios": args.scenarios, "n": args.utterances, "seed": args.eval_seed}
    if _skip(out, key):
        return
    corpus = eval_corpus(cfg)
    with cell_lock(out / ".lock"):
        records = []
        for name, s, _ in eval_sessions(corpus, scenarios, args.utterances, args.eval_seed):
            enroll = write_enrollment(corpus, s.target_speaker_id, out / "enrollment")
            records.append(write_sample(s, out / "audio", name, [str(p) for p in enroll], out))
        write_manifest(records, out / "manifest.jsonl")
        _done(out, key)
    log.info("wrote %d sessions to %s", len(records), out / "manifest.jsonl")


def cmd_enroll(args, cfg: RunConfig) -> None:
    paths = list(args.wav) + (sorted(glob.glob(args.wavs)) if args.wavs else [])
    if paths:
        wavs = [read_wav(p) for p in paths]
    elif args.speaker:
        corpus = resolve_corpus(cfg.data)
        if args.speaker not in corpus.enrollment:
            raise UserError(f"speaker {args.speaker!r} not in the corpus")
        wavs = corpus.enrollment[args.speaker]
    else:
        raise UserError("give enrollment WAVs, --wavs GLOB or --speaker ID")
    d = MelStatsEmbedder().embed(wavs)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dvector(d, out)
    log.info("wrote d-vector to %s", out)


def cmd_train_pvad(args, cfg: RunConfig) -> None:
    cfg = override(cfg, checkpoint_dir=str(Path(args.out_dir)))
    out = Path(cfg.checkpoint_dir)
    key = {"cmd": "train-pvad", "cfg": cfg.hash("pvad", "pvad_optimizer", "data", "seed")}
    if _skip(out, key):
        return
    with cell_lock(out.with_suffix(".lock")):
        res = train_pvad(cfg)
        _done(out, key)
    log.info("pVAD checkpoint %s (best val loss %.4f at step %d)", res.checkpoint, res.best_val, res.best_step)


def cmd_train_pse(args, cfg: RunConfig) -> None:
    changes = {"checkpoint_dir": str(Path(args.out_dir))}
    if args.loss:
        changes["loss.variant"] = Variant.parse(args.loss).value
    if args.tau is not None:
        changes["loss.tau"] = args.tau
    if args.asym_weight is not None:
        changes["loss.asym_weight"] = args.asym_weight
    if args.pvad:
        changes["pvad_checkpoint"] = str(Path(args.pvad).resolve())
    cfg = override(cfg, **changes)
    if cfg.loss.variant is not Variant.PLCPA:
        if not cfg.pvad_checkpoint:
            raise UserError(f"--loss {cfg.loss.variant.value} needs --pvad CKPT; run `pse-distill train-pvad` first")
        if not Path(cfg.pvad_checkpoint).exists():
            raise UserError(f"pVAD checkpoint {cfg.pvad_checkpoint} not found; run `pse-distill train-pvad` first")
    out = Path(cfg.checkpoint_dir)
    pvad_sum = hashlib.sha256(Path(cfg.pvad_checkpoint).read_bytes()).hexdigest()[:16] if cfg.pvad_checkpoint else None
    key = {"cmd": "train-pse", "cfg": cfg.hash("loss", "pse", "optimizer", "data", "seed"), "pvad": pvad_sum}
    if _skip(out, key):
        return
    with cell_lock(out.with_suffix(".lock")):
        res = train_pse(cfg, cfg.pvad_checkpoint or None)
        _done(out, key)
    log.info("PSE checkpoint %s (best val loss %.4f at step %d)", res.checkpoint, res.best_val, res.best_step)


def cmd_evaluate(args, cfg: RunConfig) -> None:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UserError(f"checkpoint {ckpt} not found; run `pse-distill train-pse` first")
    model, meta = load_model(ckpt, expect_kind="pse")
    out = Path(args.out_dir)
    if args.manifest:
        def items():
            for rec in read_manifest(args.manifest):
                s, enroll = load_record(rec)
                yield Path(rec["mixture"]).stem.removesuffix("_mixture"), s, enroll

        sessions = items()
    else:
        scenarios = [Scenario.parse(s) for s in args.scenarios.split(",")]
        sessions = eval_sessions(eval_corpus(cfg), scenarios, args.utterances, args.eval_seed)
    rows = evaluate_items(model, sessions, out, {"checkpoint": str(ckpt), **meta})
    summary = aggregate(args.name, rows)
    write_csv(summary, out / "report.csv")
    (out / "report.txt").write_text(format_table(summary))
    log.info("wrote %s", out / "report.csv")


def cmd_run_matrix(args, cfg: RunConfig) -> None:
    names = args.systems.split(",") if args.systems else [s.name for s in DEFAULT_SYSTEMS]
    matrix = ExperimentMatrix(scenarios=tuple(args.scenarios.split(",")), eval_utterances=args.utterances, eval_seed=args.eval_seed)
    res = run_matrix(matrix.select(names), cfg, args.out_dir)
    log.info("wrote %s and %s", res.csv_path, res.table_path)


def cmd_report(args, cfg: RunConfig) -> None:
    path = Path(args.csv) if args.csv else Path(args.out_dir) / "report.csv"
    if not path.exists():
        raise UserError(f"{path} not found; run `pse-distill run-matrix` or `evaluate` first")
    rows = read_csv(path)
    target = Path(args.output) if args.output else path.with_suffix(".txt")
    target.write_text(format_table(rows))
    log.info("wrote %s", target)


# ----------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the run and data seeds")
    common.add_argument("--out-dir", "--out", dest="out_dir", default="out", help="output directory")
    common.add_argument("--config", default=None, help="TOML run configuration")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pse-distill", description="Personalized speech enhancement with pVAD distillation.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="write a training manifest of simulated mixtures")
    s.add_argument("--corpus", default=None, help="directory of per-speaker WAVs (default: synthetic corpus)")
    s.add_argument("--n-samples", type=int, default=None, help="number of mixtures (default 200)")
    s.add_argument("--hours", type=float, default=None, help="alternative to --n-samples")
    s.add_argument("--its-prob", type=float, default=None)
    s.set_defaults(func=cmd_simulate)

    def eval_args(sp):
        sp.add_argument("--scenarios", "--scenario", dest="scenarios", default="TS1,TS2,TS3", help="comma-separated subset of TS1,TS2,TS3")
        sp.add_argument("--utterances", type=int, default=None, help="utterances per session (default: all)")
        sp.add_argument("--eval-seed", type=int, default=777)

    s = sub.add_parser("simulate-eval", parents=[common], help="write long-form evaluation sessions")
    eval_args(s)
    s.set_defaults(func=cmd_simulate_eval)

    s = sub.add_parser("enroll", parents=[common], help="compute a d-vector from enrollment WAVs")
    s.add_argument("wav", nargs="*", help="enrollment WAV files")
    s.add_argument("--wavs", default=None, help="glob pattern of enrollment WAVs")
    s.add_argument("--speaker", default=None, help="take the enrollment utterances of this corpus speaker")
    s.add_argument("--output", "-o", required=True)
    s.set_defaults(func=cmd_enroll)

    s = sub.add_parser("train-pvad", parents=[common], help="train the pVAD teacher")
    s.set_defaults(func=cmd_train_pvad)

    s = sub.add_parser("train-pse", parents=[common], help="train a PSE model")
    s.add_argument("--pvad", default=None, help="pVAD checkpoint (required unless --loss plcpa)")
    s.add_argument("--loss", choices=[v.value for v in Variant], default=None)
    s.add_argument("--tau", type=float, default=None)
    s.add_argument("--asym-weight", type=float, default=None)
    s.set_defaults(func=cmd_train_pse)

    s = sub.add_parser("evaluate", parents=[common], help="evaluate a PSE checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", default=None, help="evaluation manifest from simulate-eval")
    s.add_argument("--name", default="model", help="system name in the report")
    eval_args(s)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("run-matrix", parents=[common], help="train and evaluate the experiment matrix")
    s.add_argument("--systems", default=None, help="comma-separated systems (default %s; also %s)" % (",".join(x.name for x in DEFAULT_SYSTEMS), ",".join(x.name for x in ASYM_SYSTEMS)))
    eval_args(s)
    s.set_defaults(func=cmd_run_matrix)

    s = sub.add_parser("report", parents=[common], help="render a report CSV as a text table")
    s.add_argument("--csv", default=None)
    s.add_argument("--output", default=None)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    _threads()
    try:
        cfg = _config(args)
        args.func(args, cfg)
    except (UserError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RuntimeError as exc:
        if "another process" in str(exc):
            print(f"error: {exc}", file=sys.stderr)
            return 1
        log.exception("internal error")
        return 2
    except Exception:  # noqa: BLE001
        log.exception("internal error")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
