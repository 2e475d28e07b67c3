import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.io import wavfile

from attkws.audio_features import (AudioClip, AudioError, PcenConfig, featurize, featurize_clip,
                                   frame_signal, hann, mel_center_freqs, mel_energies, mel_filterbank,
                                   num_frames, pcen, read_features, read_wav, write_features, write_wav)

# sha256 of the float32 little-endian features of tests/data/reference_1905ms.wav
REFERENCE_FEATURE_SHA256 = "14c61ac287e754c86e35eb6bec4f06e86fa7c9dae5c98fa41c5038f3093d6f63"


# -- WAV I/O ----------------------------------------------------------------

def test_read_wav_16bit(tmp_path, rng):
    pcm = rng.integers(-32768, 32767, 30480).astype(np.int16)
    wavfile.write(tmp_path / "a.wav", 16000, pcm)
    clip = read_wav(tmp_path / "a.wav")
    assert clip.sample_rate == 16000 and clip.samples.shape == (30480,)
    np.testing.assert_array_equal(clip.samples, pcm / 32768.0)


def test_read_wav_silence(tmp_path):
    wavfile.write(tmp_path / "z.wav", 16000, np.zeros(1000, np.int16))
    assert not read_wav(tmp_path / "z.wav").samples.any()


def test_read_wav_stereo_mean(tmp_path, rng):
    pcm = rng.integers(-20000, 20000, (500, 2)).astype(np.int16)
    wavfile.write(tmp_path / "s.wav", 16000, pcm)
    clip = read_wav(tmp_path / "s.wav")
    assert clip.samples.shape == (500,)
    np.testing.assert_allclose(clip.samples, pcm.astype(float).mean(axis=1) / 32768.0)


def test_read_wav_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_wav(tmp_path / "missing.wav")
    (tmp_path / "bad.wav").write_bytes(b"RIFF0000WAVEjunk")
    with pytest.raises(AudioError):
        read_wav(tmp_path / "bad.wav")


def test_write_read_roundtrip(tmp_path, rng):
    x = rng.uniform(-0.5, 0.5, 800)
    write_wav(tmp_path / "r.wav", AudioClip(x, 16000))
    np.testing.assert_allclose(read_wav(tmp_path / "r.wav").samples, x, atol=1 / 32768)


# -- framing ----------------------------------------------------------------

@pytest.mark.parametrize("n,expected", [(30480, 189), (400, 1), (559, 1), (560, 2)])
def test_frame_counts(n, expected):
    assert frame_signal(AudioClip(np.ones(n), 16000)).shape == (expected, 400)


@given(st.integers(400, 50_000))
def test_frame_count_closed_form(n):
    assert num_frames(n) == 1 + (n - 400) // 160


def test_too_short_clip():
    with pytest.raises(AudioError):
        frame_signal(AudioClip(np.ones(399), 16000))


def test_hann_periodic():
    w = hann(400)
    assert w[0] == 0.0 and w[200] == pytest.approx(1.0)
    np.testing.assert_allclose(w[1:], w[1:][::-1])


def test_frames_are_windowed_slices(rng):
    x = rng.normal(size=1000)
    fr = frame_signal(AudioClip(x, 16000))
    np.testing.assert_allclose(fr[2], x[320:720] * hann(400))


# -- Mel --------------------------------------------------------------------

def test_zero_frame_zero_energy():
    assert not mel_energies(np.zeros((3, 400))).any()


@pytest.mark.parametrize("k", [3, 10, 20, 30, 38])
def test_sinusoid_peaks_in_its_channel(k):
    f = mel_center_freqs()[k]
    t = np.arange(4000) / 16000
    fr = frame_signal(AudioClip(np.sin(2 * np.pi * f * t), 16000))
    E = mel_energies(fr)
    assert np.all(E.argmax(axis=1) == k)


def test_filterbank_unit_peak_and_nonnegative():
    fb = mel_filterbank()
    assert fb.shape == (40, 257)
    assert np.all(fb >= 0) and np.all(fb.max(axis=1) <= 1.0)


def test_filterbank_too_many_channels():
    with pytest.raises(ValueError, match="empty channels"):
        mel_filterbank(n_mels=200)


@given(st.integers(0, 10_000))
def test_mel_sign_invariance(seed):
    x = np.random.default_rng(seed).normal(size=1200)
    a = mel_energies(frame_signal(AudioClip(x, 16000)))
    b = mel_energies(frame_signal(AudioClip(-x, 16000)))
    np.testing.assert_array_equal(a, b)


# -- PCEN -------------------------------------------------------------------

def test_pcen_zero():
    assert not pcen(np.zeros((10, 40))).any()


def test_pcen_constant_fixed_point():
    out = pcen(np.ones((2000, 4)), PcenConfig(eps=1e-12))
    np.testing.assert_allclose(out[-1], math.sqrt(3) - math.sqrt(2), atol=1e-9)
    assert round(math.sqrt(3) - math.sqrt(2), 4) == 0.3178


def test_pcen_single_frame(rng):
    E = rng.uniform(0, 5, (1, 40))
    c = PcenConfig()
    expected = (E / (c.eps + E) ** c.alpha + c.delta) ** c.r - c.delta ** c.r
    np.testing.assert_allclose(pcen(E), expected, rtol=1e-12)


def test_pcen_matches_recurrence(rng):
    E = rng.uniform(0, 3, (50, 5))
    c = PcenConfig()
    M = E[0].copy()
    for t in range(50):
        if t:
            M = (1 - c.s) * M + c.s * E[t]
        ref = (E[t] / (c.eps + M) ** c.alpha + c.delta) ** c.r - c.delta ** c.r
        np.testing.assert_allclose(pcen(E)[t], ref, rtol=1e-10)


@given(st.integers(0, 10_000), st.integers(1, 60))
def test_pcen_causal(seed, t):
    E = np.random.default_rng(seed).uniform(0, 4, (60, 6))
    np.testing.assert_allclose(pcen(E[:t]), pcen(E)[:t], rtol=1e-12)


def test_pcen_config_validation():
    with pytest.raises(ValueError):
        PcenConfig(alpha=1.5)
    with pytest.raises(ValueError):
        pcen(-np.ones((2, 2)))


# -- pipeline ---------------------------------------------------------------

def test_reference_wav_shape_and_bytes(data_dir):
    clip = read_wav(data_dir / "reference_1905ms.wav")
    assert clip.samples.size == 30480 and clip.sample_rate == 16000
    feats = featurize(data_dir / "reference_1905ms.wav")
    assert feats.shape == (189, 40) and feats.dtype == np.float32
    assert hashlib.sha256(feats.astype("<f4").tobytes()).hexdigest() == REFERENCE_FEATURE_SHA256


def test_sample_rate_mismatch_rejected():
    with pytest.raises(AudioError, match="resample"):
        featurize_clip(AudioClip(np.ones(8000), 8000))


def test_feature_file_roundtrip(tmp_path, rng):
    f = rng.normal(size=(17, 40)).astype(np.float32)
    write_features(tmp_path / "f.kwsf", f)
    data = (tmp_path / "f.kwsf").read_bytes()
    assert data[:4] == b"KWSF" and len(data) == 16 + 17 * 40 * 4
    g = read_features(tmp_path / "f.kwsf")
    assert g.tobytes() == f.tobytes()
    (tmp_path / "t.kwsf").write_bytes(data[:-4])
    with pytest.raises(ValueError, match="truncated"):
        read_features(tmp_path / "t.kwsf")
