import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pse_distill.dsp import SAMPLE_RATE, read_wav, stft
from pse_distill.simulate import augment
from pse_distill.simulate.mixing import (
    MixtureSample,
    RirBank,
    Scenario,
    fit_length,
    make_training_sample,
    mix_at_snr,
)
from pse_distill.simulate.rir import RoomSpec, generate_rir, schroeder_t60
from pse_distill.simulate.sessions import (
    build_eval_session,
    load_record,
    read_manifest,
    write_enrollment,
    write_manifest,
    write_sample,
)

ROOMS = [
    RoomSpec((5.0, 4.0, 3.0), 0.3, (2.0, 1.5, 1.2), (2.8, 2.1, 1.5)),
    RoomSpec((7.5, 6.0, 3.2), 0.3, (3.0, 2.0, 1.4), (3.9, 2.4, 1.1)),
    RoomSpec((4.0, 3.5, 3.0), 0.45, (1.1, 1.0, 1.5), (1.7, 1.9, 1.3)),
    RoomSpec((9.0, 8.0, 4.0), 0.2, (4.0, 4.0, 1.8), (4.5, 3.6, 1.6)),
]


def db(x):
    return 10 * math.log10(x)


# ----------------------------------------------------------------------------- rir


def test_free_field_rir_is_single_scaled_impulse():
    room = ROOMS[0]
    h = generate_rir(room, reflection=0.0)
    d = room.distance
    k = round(d / 343 * SAMPLE_RATE)
    assert np.count_nonzero(h) == 1
    assert h[k] == pytest.approx(1 / d, rel=1e-12)


@pytest.mark.parametrize("room", ROOMS)
def test_direct_path_delay(room):
    h = generate_rir(room)
    first = int(np.flatnonzero(np.abs(h) > 0)[0])
    assert abs(first - room.distance / 343 * SAMPLE_RATE) <= 1


@pytest.mark.parametrize("room", ROOMS)
def test_t60_by_backward_integration(room):
    # extend past t60 so the fitted part of the decay is not truncated
    h = generate_rir(room, length_s=2 * room.t60)
    assert schroeder_t60(h) == pytest.approx(room.t60, rel=0.2)


def test_rir_truncated_at_t60():
    room = ROOMS[0]
    assert len(generate_rir(room)) == math.ceil(room.t60 * SAMPLE_RATE)


def test_reciprocity():
    r = ROOMS[1]
    swapped = RoomSpec(r.dimensions, r.t60, r.source_position, r.mic_position)
    np.testing.assert_allclose(generate_rir(r), generate_rir(swapped), rtol=1e-10, atol=1e-14)


@pytest.mark.parametrize(
    "kw",
    [
        {"mic_position": (6.0, 1.0, 1.0)},
        {"source_position": (1.0, 0.0, 1.0)},
        {"t60": 0.9},
        {"dimensions": (2.0, 4.0, 3.0)},
    ],
)
def test_invalid_geometry_rejected(kw):
    base = dict(dimensions=(5.0, 4.0, 3.0), t60=0.3, mic_position=(2.0, 2.0, 1.0), source_position=(3.0, 2.0, 1.0))
    base.update(kw)
    with pytest.raises(ValueError):
        generate_rir(RoomSpec(**base))


# ----------------------------------------------------------------------------- mixing


def test_mix_equal_power_zero_db_keeps_scale(rng):
    x = rng.standard_normal(1000)
    n = rng.standard_normal(1000)
    n *= np.sqrt(np.mean(x**2) / np.mean(n**2))
    scaled, achieved = mix_at_snr(x, n, 0.0)
    np.testing.assert_allclose(scaled, n, rtol=1e-12)
    assert achieved == pytest.approx(0.0, abs=1e-9)


def test_mix_twenty_db_scales_amplitude_by_tenth(rng):
    x = rng.standard_normal(1000)
    n = x[::-1].copy()
    scaled, _ = mix_at_snr(x, n, 20.0)
    np.testing.assert_allclose(scaled, 0.1 * n, rtol=1e-12)


def test_mix_random_target_checked_by_power_oracle(rng):
    x = rng.standard_normal(4000)
    n = 3 * rng.standard_normal(1500)  # looped to fit
    scaled, achieved = mix_at_snr(x, n, 7.3)
    assert len(scaled) == len(x)
    oracle = db(sum(v * v for v in x) / sum(v * v for v in scaled))
    assert abs(oracle - 7.3) < 0.01
    assert abs(achieved - 7.3) < 0.01


def test_degenerate_mix_rejected(rng):
    with pytest.raises(ValueError, match="degenerate mix"):
        mix_at_snr(np.zeros(100), rng.standard_normal(100), 5.0)
    with pytest.raises(ValueError, match="degenerate mix"):
        mix_at_snr(rng.standard_normal(100), np.zeros(100), 5.0)


def test_fit_length_loops_with_offset():
    x = np.arange(5.0)
    np.testing.assert_array_equal(fit_length(x, 7, 3), [3, 4, 0, 1, 2, 3, 4])
    np.testing.assert_array_equal(fit_length(x, 3), [0, 1, 2])


@pytest.fixture(scope="module")
def bank():
    return RirBank(size=6, seed=5)


def test_same_seed_gives_identical_sample(small_corpus, bank):
    a = make_training_sample(42, small_corpus, rir_bank=bank)
    b = make_training_sample(42, small_corpus, rir_bank=bank)
    for k in ("mixture", "clean_target", "interference", "noise"):
        assert getattr(a, k).tobytes() == getattr(b, k).tobytes()
    assert (a.snr_db, a.sir_db, a.target_speaker_id) == (b.snr_db, b.sir_db, b.target_speaker_id)
    c = make_training_sample(43, small_corpus, rir_bank=bank)
    assert not np.array_equal(a.mixture, c.mixture)


def test_fresh_rirs_are_deterministic_too(small_corpus):
    a = make_training_sample(9, small_corpus, duration=1.0)
    b = make_training_sample(9, small_corpus, duration=1.0)
    assert a.mixture.tobytes() == b.mixture.tobytes()


def test_its_prob_one_zeroes_target(small_corpus, bank):
    for seed in range(10):
        s = make_training_sample(seed, small_corpus, its_prob=1.0, rir_bank=bank)
        assert s.is_its and s.scenario is Scenario.TS3
        assert not np.any(s.clean_target)
        np.testing.assert_array_equal(s.mixture, s.interference + s.noise)


def test_component_invariants_hold(small_corpus, bank):
    for seed in range(30):
        s = make_training_sample(seed, small_corpus, its_prob=0.3, rir_bank=bank)
        s.check()
        assert len(s) == 4 * SAMPLE_RATE
        assert 0 < s.meta["target_distance"] <= 1.3
        assert s.meta["interferer_distance"] > 2.0
        assert 0 <= s.snr_db <= 15
        if s.sir_db is not None:
            assert 0 <= s.sir_db <= 10


def test_requested_levels_achieved_on_100_samples(small_corpus, bank):
    for seed in range(100):
        s = make_training_sample(seed, small_corpus, its_prob=0.0, duration=1.0, rir_bank=bank)
        p_t = np.mean(s.clean_target**2)
        assert abs(db(p_t / np.mean(s.noise**2)) - s.snr_db) < 0.01
        if s.sir_db is not None:
            assert abs(db(p_t / np.mean(s.interference**2)) - s.sir_db) < 0.01


def test_scenario_fractions_over_10000_draws(small_corpus, bank):
    its = two = 0
    for seed in range(10_000):
        s = make_training_sample(seed, small_corpus, duration=0.05, rir_bank=bank)
        its += s.is_its
        two += s.meta["interferer_id"] is not None
    assert 0.13 <= its / 10_000 <= 0.17
    assert 0.47 <= two / 10_000 <= 0.53


def test_too_small_corpus_rejected(small_corpus):
    with pytest.raises(ValueError, match="corpus too small"):
        make_training_sample(0, small_corpus.subset(small_corpus.speakers[:1]))


# ----------------------------------------------------------------------------- augmentation


class _NoMasks:
    """Generator stand-in whose integer draws are always zero."""

    def integers(self, lo, hi=None):
        return 0


def test_specaugment_without_masks_is_identity(rng):
    x = rng.standard_normal(8000)
    np.testing.assert_array_equal(augment.signal_specaugment(x, _NoMasks()), x)
    np.testing.assert_array_equal(augment.signal_specaugment(x, rng, max_time_masks=0, max_band_stops=0), x)


def test_zero_gain_time_mask_is_exactly_silent(rng):
    x = rng.standard_normal(16000)
    y = augment.time_mask(x, 1600, 3200, 0.0)
    assert np.all(y[1600:3200] == 0)
    np.testing.assert_array_equal(y[:1600], x[:1600])
    np.testing.assert_array_equal(y[3200:], x[3200:])


def band_power_db(x, lo, hi):
    X = stft(x)
    f = np.arange(X.shape[-1]) * SAMPLE_RATE / 512
    sel = (f >= lo) & (f <= hi)
    return db(np.sum(np.abs(X[:, sel]) ** 2))


def test_band_stop_attenuates_band(rng):
    x = rng.standard_normal(32000)
    y = augment.band_stop(x, 2000, 3000)
    # measured 100 Hz inside each edge, clear of the analysis window's leakage skirt
    assert band_power_db(x, 2100, 2900) - band_power_db(y, 2100, 2900) >= 20
    # outside the band the signal is untouched
    assert abs(band_power_db(x, 4000, 6000) - band_power_db(y, 4000, 6000)) < 0.1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_specaugment_respects_limits(seed):
    x = np.ones(16000)
    y = augment.signal_specaugment(x, np.random.default_rng(seed), max_band_stops=0)
    changed = np.flatnonzero(y != 1.0)
    assert y.shape == x.shape
    assert np.all(y >= 0) and np.all(y <= 1)
    # at most two attenuated segments of at most 100 ms each
    assert len(changed) <= 2 * 1600
    kept = y[changed]
    assert np.all(kept <= 0.5)


# ----------------------------------------------------------------------------- sessions and manifests


@pytest.mark.parametrize("scenario", ["TS1", "TS2", "TS3"])
def test_session_contracts(small_corpus, scenario):
    spk = small_corpus.speakers[0]
    sess = build_eval_session(spk, scenario, small_corpus, rng_seed=11)
    s = sess.sample
    s.check()
    assert len(s.mixture) == sum(sess.segment_lengths)
    assert sess.duration == pytest.approx(sum(len(u) for u in small_corpus.utterances[spk]) / SAMPLE_RATE)
    if scenario == "TS3":
        assert np.sum(s.clean_target**2) == 0
    if scenario == "TS2":
        assert np.sum(s.interference**2) == 0
    else:
        assert np.sum(s.interference**2) > 0
    assert all(not any(e is u for u in small_corpus.utterances[spk]) for e in sess.enrollment)


def test_session_needs_enough_utterances(small_corpus):
    with pytest.raises(ValueError, match="insufficient"):
        build_eval_session(small_corpus.speakers[0], "TS1", small_corpus, 0, n_utterances=99)


def _write_dataset(corpus, bank, out):
    records = []
    for i in range(4):
        s = make_training_sample(100 + i, corpus, its_prob=0.5, duration=1.0, rir_bank=bank)
        enroll = write_enrollment(corpus, s.target_speaker_id, out / "enroll")
        records.append(write_sample(s, out / "audio", f"s{i}", [str(p) for p in enroll], out))
    write_manifest(records, out / "manifest.jsonl")
    return records


def test_manifest_round_trip_and_additivity(tmp_path, small_corpus, bank):
    _write_dataset(small_corpus, bank, tmp_path)
    recs = read_manifest(tmp_path / "manifest.jsonl")
    assert len(recs) == 4 and len({r["seed"] for r in recs}) == 4
    for r in recs:
        s, enroll = load_record(r)
        assert len(enroll) == 2
        mix = np.round(s.mixture * 32768).astype(int)
        parts = sum(np.round(getattr(s, k) * 32768).astype(int) for k in ("clean_target", "interference", "noise"))
        np.testing.assert_array_equal(mix, parts)
        if s.is_its:
            assert not np.any(s.clean_target)
    raw = read_manifest(tmp_path / "manifest.jsonl", resolve=False)
    assert not raw[0]["mixture"].startswith("/")


def test_manifest_bytes_are_deterministic(tmp_path, small_corpus, bank):
    a, b = tmp_path / "a", tmp_path / "b"
    _write_dataset(small_corpus, bank, a)
    _write_dataset(small_corpus, bank, b)
    assert (a / "manifest.jsonl").read_bytes() == (b / "manifest.jsonl").read_bytes()
    for f in sorted((a / "audio").iterdir()):
        assert f.read_bytes() == (b / "audio" / f.name).read_bytes()


def test_duplicate_seeds_rejected(tmp_path):
    with pytest.raises(ValueError, match="unique"):
        write_manifest([{"seed": 1}, {"seed": 1}], tmp_path / "m.jsonl")


def test_mixture_sample_check_catches_violations():
    z = np.zeros(10)
    s = MixtureSample(z + 1, z + 1, z, z, True, Scenario.TS3, 0.0, None, "a", 0)
    with pytest.raises(AssertionError):
        s.check()
