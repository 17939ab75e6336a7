import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mixtrain import dsp

unit = st.floats(-1.0, 1.0, allow_nan=False, width=32)
wave8 = arrays(np.float32, 8, elements=unit)


def test_scale_examples():
    w = np.array([0.2, -0.4], dtype=np.float32)
    np.testing.assert_array_equal(dsp.scale(w, 1.0), w)
    np.testing.assert_array_equal(dsp.scale(w, 0.0), np.zeros(2))
    np.testing.assert_allclose(dsp.scale(w, 0.5), [0.1, -0.2], rtol=1e-7)
    with pytest.raises(ValueError):
        dsp.scale(w, -0.1)


def test_mix_examples():
    w1 = np.array([0.2], dtype=np.float32)
    w2 = np.array([-0.4], dtype=np.float32)
    np.testing.assert_array_equal(dsp.mix(w1, 1.0, w2, 0.0), w1)
    np.testing.assert_allclose(dsp.mix(w1, 0.25, w2, 0.75), [-0.25], atol=1e-7)
    w = np.linspace(-1, 1, 50, dtype=np.float32)
    np.testing.assert_allclose(dsp.mix(w, 0.5, w, 0.5), w, atol=1e-7)
    with pytest.raises(ValueError, match="length mismatch"):
        dsp.mix(w1, 0.5, w, 0.5)


def test_peak():
    assert dsp.peak(np.array([0.1, -0.7, 0.3])) == pytest.approx(0.7)
    assert dsp.peak(np.zeros(10)) == 0.0
    with pytest.raises(ValueError):
        dsp.peak(np.array([]))


@given(wave8)
def test_peak_homogeneous(w):
    assert dsp.peak(dsp.scale(w, 2.0)) == pytest.approx(2.0 * dsp.peak(w), rel=1e-6)


@given(wave8, wave8, *[st.floats(0, 2) for _ in range(4)])
def test_mix_linearity(w1, w2, a, b, c, d):
    lhs = dsp.mix(w1, a, w2, b) + dsp.mix(w1, c, w2, d)
    rhs = dsp.mix(w1, a + c, w2, b + d)
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


@given(wave8, wave8, st.floats(0, 1))
def test_anti_clipping(w1, w2, omega):
    assert dsp.peak(dsp.mix(w1, omega, w2, 1.0 - omega)) <= 1.0 + 1e-7


def test_frame_count():
    # floor(15600 / 160) + 1 = 97 + 1
    assert dsp.num_frames(16000) == 98
    assert dsp.fbank(np.zeros(16000, dtype=np.float32)).shape == (98, 80)
    for n in (400, 401, 559, 560, 12345):
        assert dsp.fbank(np.zeros(n)).shape[0] == (n - 400) // 160 + 1


def test_short_waveform_rejected():
    with pytest.raises(ValueError, match="pad"):
        dsp.fbank(np.zeros(399))


def test_zero_waveform_hits_log_floor():
    feats = dsp.fbank(np.zeros(16000))
    np.testing.assert_array_equal(feats, np.float32(np.log(1e-10)))


def _oracle_mel_centers():
    # independent HTK-mel construction: 82 equally spaced points between 20 Hz and 8 kHz
    lo = 2595 * np.log10(1 + 20 / 700)
    hi = 2595 * np.log10(1 + 8000 / 700)
    step = (hi - lo) / 81
    return [700 * (10 ** ((lo + step * (i + 1)) / 2595) - 1) for i in range(80)]


@pytest.mark.parametrize("freq", [1000.0, 440.0, 3000.0])
def test_sine_peaks_in_nearest_mel_bin(freq):
    t = np.arange(16000) / 16000
    feats = dsp.fbank(0.5 * np.sin(2 * np.pi * freq * t))
    centers = _oracle_mel_centers()
    nearest = min(range(80), key=lambda i: abs(centers[i] - freq))
    assert np.all(feats.argmax(axis=1) == nearest)


def test_filterbank_is_well_formed():
    fb = dsp.mel_filterbank()
    assert fb.shape == (257, 80)
    assert np.all(fb.sum(axis=0) > 0)
    np.testing.assert_allclose(dsp.mel_center_frequencies(), _oracle_mel_centers(), rtol=1e-12)


def test_fbank_deterministic(rng):
    w = rng.uniform(-0.5, 0.5, 16000).astype(np.float32)
    assert dsp.fbank(w).tobytes() == dsp.fbank(w.copy()).tobytes()


@pytest.mark.parametrize("omega", [0.1, 0.37, 0.9])
def test_volume_shift(rng, omega):
    w = rng.uniform(-0.5, 0.5, 16000).astype(np.float32)
    base = dsp.fbank(w)
    shifted = dsp.fbank(dsp.scale(w, omega))
    above = base > np.log(1e-10) + 1
    diff = shifted.astype(np.float64) - base
    np.testing.assert_allclose(diff[above], 2 * np.log(omega), atol=1e-4)


def test_feature_cache_roundtrip(tmp_path, rng):
    feats = rng.standard_normal((97, 80)).astype(np.float32)
    path = tmp_path / "f.bin"
    dsp.write_feature_cache(path, feats)
    raw = path.read_bytes()
    assert raw[:8] == np.array([97, 80], dtype="<i4").tobytes()
    assert len(raw) == 8 + 97 * 80 * 4
    np.testing.assert_array_equal(dsp.read_feature_cache(path), feats)
