import math

import numpy as np
import pytest
import torch

from pse_distill import dsp
from pse_distill.dsp import DEFAULT_STFT, StftConfig


def naive_stft(x, win=320, hop=160, nfft=512):
    """Direct DFT sum per frame, periodic Hann, no padding at the start."""
    n = np.arange(win)
    w = 0.5 - 0.5 * np.cos(2 * np.pi * n / win)
    T = 1 + (len(x) - win) // hop
    k = np.arange(nfft // 2 + 1)
    basis = np.exp(-2j * np.pi * np.outer(n, k) / nfft)
    return np.stack([(x[t * hop : t * hop + win] * w) @ basis for t in range(T)])


def test_frame_count_of_zeros():
    X = dsp.stft(np.zeros(3200))
    assert X.shape == (19, 257)
    assert np.all(X == 0)


def test_frame_count_formula():
    for n in (320, 321, 479, 480, 16000, 16159):
        assert DEFAULT_STFT.num_frames(n) == 1 + (n - 320) // 160
        assert dsp.stft(np.zeros(n)).shape[0] == DEFAULT_STFT.num_frames(n)


def test_too_short_signal_rejected():
    with pytest.raises(ValueError, match="too short"):
        dsp.stft(np.zeros(319))


def test_stft_matches_direct_dft(rng):
    x = rng.standard_normal(1600)
    np.testing.assert_allclose(dsp.stft(x), naive_stft(x), atol=1e-9)


def test_impulse_spectrum_is_window_value():
    x = np.zeros(640)
    x[100] = 1.0
    X = dsp.stft(x)
    w100 = 0.5 - 0.5 * math.cos(2 * math.pi * 100 / 320)
    # frame 0 holds the impulse at offset 100: |X| is flat and equals w[100]
    np.testing.assert_allclose(np.abs(X[0]), w100, atol=1e-12)


def test_sinusoid_peak_bin():
    t = np.arange(16000) / 16000
    X = dsp.stft(np.sin(2 * np.pi * 1000 * t))
    # 1000 Hz * 512 / 16000 = bin 32
    assert np.all(np.argmax(np.abs(X), axis=-1) == 32)


def test_istft_round_trip(rng):
    x = rng.standard_normal(16000)
    y = dsp.istft(dsp.stft(x), length=len(x))
    # sample 0 has a zero Hann weight; everything else reconstructs
    np.testing.assert_allclose(y[1:], x[1:], atol=1e-6)


def test_torch_and_numpy_paths_agree(rng):
    x = rng.standard_normal(2000)
    a = dsp.stft(x)
    b = dsp.stft(torch.from_numpy(x)).numpy()
    np.testing.assert_array_equal(a, b)


def test_stft_config_validation():
    with pytest.raises(ValueError):
        StftConfig(window_samples=320, hop_samples=100)
    with pytest.raises(ValueError):
        StftConfig(window_samples=640, hop_samples=320, fft_size=512)
    assert DEFAULT_STFT.window_ms == 20.0 and DEFAULT_STFT.hop_ms == 10.0


def test_power_compress_values():
    X = np.array([3 + 4j, 0j, -2.0 + 0j])
    mag, phase = dsp.power_compress(X, 0.3)
    np.testing.assert_allclose(mag, [5**0.3, 0.0, 2**0.3])
    np.testing.assert_allclose(phase, [math.atan2(4, 3), 0.0, math.pi])


@pytest.mark.parametrize("p", [0.0, -0.5, 1.5])
def test_power_compress_rejects_bad_exponent(p):
    with pytest.raises(ValueError):
        dsp.power_compress(np.ones(3, dtype=complex), p)


def test_compressed_gradients_finite_at_zero():
    X = torch.zeros(4, dtype=torch.complex128, requires_grad=True)
    (dsp.compressed_magnitude(X, 0.3).sum() + dsp.compressed_complex(X, 0.3).abs().sum()).backward()
    assert torch.all(torch.isfinite(torch.view_as_real(X.grad)))


def brute_mel_filter(m, k, n_mels=40, sr=16000, nfft=512):
    """Weight of FFT bin k in filter m, evaluated one point at a time."""
    to_mel = lambda f: 2595 * math.log10(1 + f / 700)  # noqa: E731
    to_hz = lambda z: 700 * (10 ** (z / 2595) - 1)  # noqa: E731
    top = to_mel(sr / 2)
    lo, c, hi = (to_hz(top * (m + i) / (n_mels + 1)) for i in range(3))
    f = k * sr / nfft
    if lo < f <= c:
        return (f - lo) / (c - lo)
    if c < f < hi:
        return (hi - f) / (hi - c)
    return 0.0


def test_mel_filterbank_against_pointwise_oracle():
    fb = dsp.mel_filterbank()
    assert fb.shape == (40, 257)
    for m in (0, 7, 20, 39):
        expected = [brute_mel_filter(m, k) for k in range(257)]
        np.testing.assert_allclose(fb[m], expected, atol=1e-12)


def test_log_mel_shifts_by_log4_under_doubling(rng):
    x = rng.standard_normal(8000)
    a, b = dsp.log_mel(x), dsp.log_mel(2 * x)
    assert a.shape == (49, 40)
    np.testing.assert_allclose(b - a, math.log(4), atol=1e-6)


def test_wav_round_trip(tmp_path, rng):
    x = 0.3 * rng.uniform(-1, 1, 1600)
    dsp.write_wav(tmp_path / "a.wav", x)
    y = dsp.read_wav(tmp_path / "a.wav")
    np.testing.assert_allclose(y, x, atol=1 / 32768)
    np.testing.assert_array_equal(dsp.to_pcm16(y), dsp.to_pcm16(x))


def test_read_wav_rejects_wrong_rate(tmp_path):
    from scipy.io import wavfile

    wavfile.write(str(tmp_path / "b.wav"), 8000, np.zeros(100, dtype=np.int16))
    with pytest.raises(ValueError):
        dsp.read_wav(tmp_path / "b.wav")
