"""Sensor channel: pressure units, aliasing, interpolation, noise and datasets."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wali.channel import (
    DatasetManifest,
    ManifestRecord,
    SimConfig,
    build_dataset,
    decimate_alias,
    file_rng,
    fit_length,
    measure_snr,
    mix_noise_at_snr,
    pascal_to_spl,
    read_wav,
    simulate_sensor,
    sinc_upsample,
    spl_to_pascal,
    write_wav,
)
from wali.synth import synthetic_speech


def tone(freq, fs, seconds=1.0):
    return np.sin(2 * np.pi * freq * np.arange(int(fs * seconds)) / fs)


def peak_hz(x, fs):
    spec = np.abs(np.fft.rfft(x * np.hanning(len(x))))
    return np.argmax(spec) * fs / len(x)


def band_db(x, fs, lo):
    """Energy above ``lo`` Hz relative to the total, in dB."""
    p = np.abs(np.fft.rfft(x * np.blackman(len(x)))) ** 2
    f = np.fft.rfftfreq(len(x), 1 / fs)
    return 10 * np.log10(p[f > lo].sum() / p.sum())


# -- pressure -----------------------------------------------------------------

def test_spl_reference_points():
    assert spl_to_pascal(0) == pytest.approx(20e-6)
    assert spl_to_pascal(94) == pytest.approx(1.002, abs=1e-3)
    # the formula gives 0.02 Pa for conversational speech at 60 dB
    assert spl_to_pascal(60) == pytest.approx(0.02)


@settings(max_examples=50)
@given(st.floats(-20, 160))
def test_spl_roundtrip(level):
    assert pascal_to_spl(spl_to_pascal(level)) == pytest.approx(level, abs=1e-9)


def test_spl_errors():
    with pytest.raises(ValueError):
        pascal_to_spl(0.0)
    with pytest.raises(ValueError):
        spl_to_pascal(np.nan)


# -- rate conversion ----------------------------------------------------------

def test_alias_folds_300_hz_to_200_hz():
    y = decimate_alias(tone(300, 8000), 8000, 500)
    assert abs(peak_hz(y, 500) - 200) <= 2


def test_tone_below_nyquist_is_kept():
    y = decimate_alias(tone(100, 8000), 8000, 500)
    assert abs(peak_hz(y, 500) - 100) <= 1


def test_decimate_constant_and_ratio():
    np.testing.assert_array_equal(decimate_alias(np.full(800, 0.3), 8000, 500), np.full(50, 0.3))
    with pytest.raises(ValueError, match="integer"):
        decimate_alias(np.zeros(10), 8000, 300)


def test_upsample_tone_is_clean():
    y = sinc_upsample(tone(100, 500, 2.0), 500, 8000)
    assert len(y) == 16000
    assert abs(peak_hz(y, 8000) - 100) <= 1
    assert band_db(y[2000:-2000], 8000, 250) <= -60


def test_upsample_constant_stays_constant():
    np.testing.assert_allclose(sinc_upsample(np.full(100, 0.7), 500, 8000), 0.7, atol=1e-12)


def test_decimate_upsample_roundtrip_in_band():
    x = tone(200, 8000, 2.0)
    y = sinc_upsample(decimate_alias(x, 8000, 500), 500, 8000)
    core = slice(2000, -2000)
    ratio_db = 20 * np.log10(np.std(y[core]) / np.std(x[core]))
    assert abs(ratio_db) < 0.1
    assert np.max(np.abs(y[core] - x[core])) < 0.02


# -- noise --------------------------------------------------------------------

@pytest.mark.parametrize("snr", [-7.0, 0.0, 20.0, 40.0])
def test_mixer_hits_target(snr):
    rng = np.random.default_rng(0)
    clean = synthetic_speech(4.0, 8000, seed=1)
    noisy = mix_noise_at_snr(clean, rng.standard_normal(5000), snr)
    assert abs(measure_snr(clean, noisy) - snr) < 0.1


def test_mixer_gain_rules():
    x = np.random.default_rng(1).standard_normal(1000)
    np.testing.assert_allclose(mix_noise_at_snr(x, x, 0.0), 2 * x)
    y = mix_noise_at_snr(x, x, 40.0)
    np.testing.assert_allclose(y - x, x / 100)
    with pytest.raises(ValueError, match="silent"):
        mix_noise_at_snr(np.zeros(10), x, 0.0)


@settings(max_examples=30, deadline=None)
@given(snr=st.floats(-7, 40), seed=st.integers(0, 2**31 - 1))
def test_mixer_property(snr, seed):
    rng = np.random.default_rng(seed)
    clean, noise = rng.standard_normal(2000), rng.standard_normal(700)
    assert abs(measure_snr(clean, mix_noise_at_snr(clean, noise, snr)) - snr) < 1e-9


# -- pipeline -----------------------------------------------------------------

def test_identity_channel():
    x = synthetic_speech(4.0, 8000, seed=2)
    pair = simulate_sensor(x, SimConfig(sensor_rate=8000))
    np.testing.assert_array_equal(pair.degraded, pair.clean)


def test_500_hz_channel_removes_high_band():
    x = synthetic_speech(4.0, 8000, seed=3)
    pair = simulate_sensor(x, SimConfig(sensor_rate=500))
    assert band_db(pair.degraded, 8000, 260) <= -60
    assert band_db(pair.clean, 8000, 260) > -20


def test_simulation_is_deterministic():
    x = synthetic_speech(4.0, 8000, seed=4)
    bank = {"n0": np.random.default_rng(0).standard_normal(9000)}
    cfg = SimConfig(noise=True)
    a = simulate_sensor(x, cfg, bank, file_rng(7, "a.wav"))
    b = simulate_sensor(x, cfg, bank, file_rng(7, "a.wav"))
    np.testing.assert_array_equal(a.degraded, b.degraded)
    assert a.snr_db == b.snr_db and -7 <= a.snr_db <= 40


def test_fit_length_pads_and_trims():
    assert len(fit_length(np.ones(10), 4)) == 4
    np.testing.assert_array_equal(fit_length(np.ones(2), 4), [1, 1, 0, 0])


def test_sim_config_validation():
    with pytest.raises(ValueError):
        SimConfig(sensor_rate=300)
    with pytest.raises(ValueError):
        SimConfig(snr_range_db=(10, 0))


def test_wav_roundtrip(tmp_path):
    x = 0.5 * tone(440, 8000, 0.1)
    write_wav(tmp_path / "a.wav", x, 8000)
    y, fs = read_wav(tmp_path / "a.wav")
    assert fs == 8000
    np.testing.assert_allclose(y, x, atol=1 / 32767)


# -- datasets -----------------------------------------------------------------

def _corpus(root, n, seconds=4.0):
    d = root / "clean"
    for i in range(n):
        write_wav(d / f"clip{i:02d}.wav", synthetic_speech(seconds, 8000, seed=i), 8000)
    return d


def test_build_dataset_records_and_determinism(tmp_path):
    clean = _corpus(tmp_path, 3)
    m1 = build_dataset(clean, None, SimConfig(seed=5), tmp_path / "a")
    m2 = build_dataset(clean, None, SimConfig(seed=5), tmp_path / "b", jobs=3)
    assert len(m1.records) == 3
    assert (tmp_path / "a/manifest.jsonl").read_bytes() == (tmp_path / "b/manifest.jsonl").read_bytes()
    loaded = DatasetManifest.load(tmp_path / "a/manifest.jsonl")
    assert loaded.records == m1.records
    c, d = loaded.load_pair(loaded.records[0])
    assert len(c) == len(d) == 32000
    assert loaded.records[0].clip_id == "clip00"


def test_mean_snr_over_many_pairs(tmp_path):
    x = synthetic_speech(4.0, 8000, seed=0)
    bank = {"n": np.random.default_rng(1).standard_normal(8000)}
    cfg = SimConfig(noise=True, seed=11)
    snrs = [simulate_sensor(x, cfg, bank, file_rng(cfg.seed, f"c{i}")).snr_db for i in range(100)]
    assert abs(np.mean(snrs) - 16.5) <= 2.0


def test_build_dataset_errors(tmp_path):
    with pytest.raises(FileNotFoundError, match="missing"):
        build_dataset(tmp_path / "missing", None, SimConfig(), tmp_path / "o")
    (tmp_path / "empty").mkdir()
    with pytest.raises(ValueError, match="no WAV"):
        build_dataset(tmp_path / "empty", None, SimConfig(), tmp_path / "o")
    clean = _corpus(tmp_path, 1)
    with pytest.raises(FileNotFoundError, match="noise"):
        build_dataset(clean, None, SimConfig(noise=True), tmp_path / "o")


def test_unreadable_file_is_skipped(tmp_path):
    clean = _corpus(tmp_path, 2)
    (clean / "broken.wav").write_bytes(b"not a wav")
    m = build_dataset(clean, None, SimConfig(), tmp_path / "o")
    assert len(m.records) == 2 and m.skipped == ["broken.wav"]
    assert (tmp_path / "o/skipped.txt").read_text() == "broken.wav\n"


def test_manifest_rejects_bad_lines(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text(json.dumps({"clean_path": "a"}) + "\n")
    with pytest.raises(ValueError, match="bad manifest"):
        DatasetManifest.load(p)


def test_manifest_paths_are_relative(tmp_path):
    clean = _corpus(tmp_path, 1)
    build_dataset(clean, None, SimConfig(), tmp_path / "o")
    rec = ManifestRecord(**json.loads((tmp_path / "o/manifest.jsonl").read_text()))
    assert not rec.clean_path.startswith("/")
    assert rec.sensor_rate == 500 and rec.duration_s == 4.0
