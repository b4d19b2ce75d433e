"""Room acoustics, mixture generation and evaluation-session simulation."""
from .augment import band_stop, signal_specaugment, time_mask
from .corpus import Corpus, load_corpus, synthetic_corpus, write_corpus
from .mixing import MixtureSample, RirBank, Scenario, make_training_sample, mix_at_snr
from .rir import RoomSpec, generate_rir, schroeder_t60
from .sessions import EvalSession, build_eval_session, read_manifest, write_manifest

__all__ = [
    "Corpus",
    "EvalSession",
    "MixtureSample",
    "RirBank",
    "RoomSpec",
    "Scenario",
    "band_stop",
    "build_eval_session",
    "generate_rir",
    "load_corpus",
    "make_training_sample",
    "mix_at_snr",
    "read_manifest",
    "schroeder_t60",
    "signal_specaugment",
    "synthetic_corpus",
    "time_mask",
    "write_corpus",
    "write_manifest",
]
