import numpy as np
import pytest
import torch

from pse_distill.embed import (
    DVECTOR_DIM,
    DVector,
    MelStatsEmbedder,
    compute_dvector,
    load_dvector,
    projection_matrix,
    save_dvector,
)
from pse_distill.model import PseConfig, PseNet, pse_forward
from pse_distill.simulate.corpus import synthetic_corpus


def test_projection_has_orthonormal_columns():
    P = projection_matrix()
    assert P.shape == (128, 80)
    np.testing.assert_allclose(P.T @ P, np.eye(80), atol=1e-12)
    np.testing.assert_array_equal(P, projection_matrix())


def test_identical_enrollment_gives_identical_vector(small_corpus):
    e = small_corpus.enrollment[small_corpus.speakers[0]]
    a, b = compute_dvector(e), compute_dvector([x.copy() for x in e])
    assert a.values.tobytes() == b.values.tobytes()
    assert a.values.shape == (DVECTOR_DIM,)
    assert np.linalg.norm(a.values) == pytest.approx(1.0, abs=1e-9)


def test_amplitude_doubling_shifts_means_keeps_stds(rng):
    # no silent frames, so the log floor never engages
    x = 0.05 * rng.standard_normal(56000)
    emb = MelStatsEmbedder()
    s1, s2 = emb.stats(x), emb.stats(2 * x)
    np.testing.assert_allclose(s2[:40] - s1[:40], np.log(4), atol=1e-6)
    np.testing.assert_allclose(s2[40:], s1[40:], atol=1e-6)
    d1, d2 = emb.embed([x, x]), emb.embed([2 * x, 2 * x])
    assert not np.allclose(d1.values, d2.values)
    assert np.linalg.norm(d2.values) == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("seconds", [3.0, 5.5, 12.0])
def test_unit_norm_for_any_length(rng, seconds):
    d = compute_dvector([0.1 * rng.standard_normal(int(seconds * 16000))])
    assert d.values.shape == (128,)
    assert abs(np.linalg.norm(d.values) - 1) < 1e-6


def test_short_enrollment_rejected(rng):
    with pytest.raises(ValueError, match="insufficient enrollment"):
        compute_dvector([rng.standard_normal(16000), rng.standard_normal(16000)])
    with pytest.raises(ValueError, match="insufficient enrollment"):
        compute_dvector([])


def test_dvector_validation():
    with pytest.raises(ValueError):
        DVector(np.ones(64) / 8)
    with pytest.raises(ValueError):
        DVector(np.ones(128))


def test_intra_speaker_similarity_exceeds_inter_speaker():
    corpus = synthetic_corpus(n_speakers=20, utterances_per_speaker=2, n_noises=1, seed=11)
    emb = MelStatsEmbedder()
    # two disjoint enrollment sets per speaker
    a = {s: emb.embed(corpus.enrollment[s]) for s in corpus.speakers}
    b = {s: emb.embed(corpus.utterances[s]) for s in corpus.speakers}
    intra = np.mean([a[s].cosine(b[s]) for s in corpus.speakers])
    inter = np.mean([a[s].cosine(b[t]) for s in corpus.speakers for t in corpus.speakers if s != t])
    assert intra > inter


def test_file_round_trip(tmp_path, small_corpus):
    d = compute_dvector(small_corpus.enrollment[small_corpus.speakers[2]])
    save_dvector(d, tmp_path / "spk.dvec")
    raw = (tmp_path / "spk.dvec").read_bytes()
    assert len(raw) == 16 + 4 * 128 and raw[:4] == b"DVEC"
    back = load_dvector(tmp_path / "spk.dvec")
    np.testing.assert_allclose(back.values, d.values, atol=1e-6)


def test_bad_file_rejected(tmp_path):
    (tmp_path / "x.dvec").write_bytes(b"NOPE" + bytes(12 + 512))
    with pytest.raises(ValueError):
        load_dvector(tmp_path / "x.dvec")


class StubEmbedder:
    """Stand-in for an external pretrained encoder: a fixed direction per call count."""

    def embed(self, enrollment):
        v = np.zeros(128)
        v[len(enrollment) % 128] = 1.0
        return DVector(v)


def test_models_accept_any_embedder(small_corpus, rng):
    d = compute_dvector(small_corpus.enrollment[small_corpus.speakers[0]], embedder=StubEmbedder())
    assert d.values[2] == 1.0
    model = PseNet(PseConfig()).double()
    y = pse_forward(rng.standard_normal(1600), d, model)
    assert y.shape == (1600,) and np.all(np.isfinite(y))
