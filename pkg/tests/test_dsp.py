"""STFT analysis, overlap-add synthesis and polar views."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wali.dsp import ComplexSpectrogram, StftConfig, istft, log_magnitude, phase, sqrt_hann, stft


def direct_stft(x, n_fft, hop):
    """Reference analysis: explicit reflect pad, window and DFT sum."""
    pad = n_fft // 2
    xp = np.pad(x, pad, mode="reflect")
    w = sqrt_hann(n_fft)
    n_frames = 1 + len(x) // hop
    k = np.arange(n_fft // 2 + 1)[:, None]
    n = np.arange(n_fft)[None, :]
    basis = np.exp(-2j * np.pi * k * n / n_fft)
    out = np.empty((n_fft // 2 + 1, n_frames), complex)
    for t in range(n_frames):
        out[:, t] = basis @ (xp[t * hop:t * hop + n_fft] * w)
    return out


def test_matches_direct_dft():
    x = np.random.default_rng(0).standard_normal(1000)
    got = stft(x, StftConfig(64, 16)).numpy()
    np.testing.assert_allclose(got, direct_stft(x, 64, 16), atol=1e-10)


def test_shape_and_frame_count():
    S = stft(np.zeros((2, 8000)), StftConfig(512, 128))
    assert S.shape == (2, 257, 1 + 8000 // 128)
    assert np.all(S.numpy() == 0)


def test_impulse_at_frame_centre():
    cfg = StftConfig(64, 16)
    x = np.zeros(400)
    x[5 * 16] = 1.0  # centre of frame 5
    mag = np.abs(stft(x, cfg).numpy()[:, 5])
    np.testing.assert_allclose(mag, cfg.window_array()[32], atol=1e-12)


def test_sine_peak_bin():
    fs = 8000
    t = np.arange(fs) / fs
    S = stft(np.sin(2 * np.pi * 1000 * t), StftConfig(512, 128)).magnitude()
    assert int(np.argmax(S.mean(axis=1))) == 64


def test_first_frame_is_real():
    # centred reflection makes frame 0 even-symmetric for every input
    S = stft(np.random.default_rng(1).standard_normal(3000), StftConfig(256, 64)).numpy()
    assert np.all(S[:, 0].imag == 0.0)


def test_errors():
    with pytest.raises(ValueError, match="shorter than one window"):
        stft(np.zeros(100), StftConfig(256, 64))
    with pytest.raises(ValueError, match="non-finite"):
        stft(np.full(600, np.nan), StftConfig(256, 64))
    with pytest.raises(ValueError):
        StftConfig(256, 300)
    S = stft(np.zeros(2000), StftConfig(256, 96))
    with pytest.raises(ValueError, match="COLA"):
        istft(S)


@pytest.mark.parametrize("cfg", [StftConfig(256, 128), StftConfig(512, 256), StftConfig(1024, 512),
                                 StftConfig(512, 128), StftConfig(64, 32)])
def test_perfect_reconstruction(cfg):
    x = np.random.default_rng(2).standard_normal(8000)
    y = istft(stft(x, cfg))
    assert np.linalg.norm(y - x) / np.linalg.norm(x) < 1e-6


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1100, 3000), seed=st.integers(0, 2**31 - 1),
       cfg=st.sampled_from([StftConfig(256, 128), StftConfig(128, 32), StftConfig(64, 16)]))
def test_roundtrip_any_length(n, seed, cfg):
    x = np.random.default_rng(seed).standard_normal(n)
    y = istft(stft(x, cfg))
    assert y.shape == x.shape
    assert np.linalg.norm(y - x) <= 1e-9 * np.linalg.norm(x)


def test_istft_zero_and_linearity():
    cfg = StftConfig(128, 64)
    rng = np.random.default_rng(3)
    shape = (65, 20)
    zero = ComplexSpectrogram(_ct(np.zeros(shape, complex)), cfg, n_samples=1216)
    assert np.all(istft(zero) == 0)
    s1 = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    s2 = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    y12 = istft(ComplexSpectrogram(_ct(s1 + s2), cfg, n_samples=1216))
    y1 = istft(ComplexSpectrogram(_ct(s1), cfg, n_samples=1216))
    y2 = istft(ComplexSpectrogram(_ct(s2), cfg, n_samples=1216))
    np.testing.assert_allclose(y12, y1 + y2, atol=1e-9)


def _ct(z):
    from wali.core import ComplexTensor
    return ComplexTensor.from_numpy(z)


def test_polar_views():
    assert abs(log_magnitude(np.array([1 + 0j]))[0]) < 1e-8
    assert phase(np.array([1 + 0j]))[0] == 0.0
    assert phase(np.array([1j]))[0] == pytest.approx(np.pi / 2)
    assert phase(np.array([-1 + 0j]))[0] == pytest.approx(np.pi)
    z = np.random.default_rng(4).standard_normal((5, 6)) + 1j * np.random.default_rng(5).standard_normal((5, 6))
    back = np.abs(z) * np.exp(1j * phase(z))
    np.testing.assert_allclose(back, z, atol=1e-6)


def test_window_is_periodic_sqrt_hann():
    w = sqrt_hann(8)
    np.testing.assert_allclose(w ** 2 + np.roll(w, 4) ** 2, 1.0)
    assert w[0] == 0.0 and w[4] == pytest.approx(1.0)
