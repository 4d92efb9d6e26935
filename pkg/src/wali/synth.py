"""Deterministic speech-like test signals.

A glottal pulse train with a gliding pitch is shaped by formant resonators
that move between vowel targets; syllables alternate with fricative noise
bursts.  No real corpus ships with the package, so these clips stand in for
speech in tests, demos and the acceptance runs.
"""

from __future__ import annotations

import numpy as np
from scipy import signal

__all__ = ["synthetic_speech", "VOWELS"]

# first three formant frequencies (Hz) of a few vowels
VOWELS = {
    "a": (730, 1090, 2440),
    "i": (270, 2290, 3010),
    "u": (300, 870, 2240),
    "e": (530, 1840, 2480),
    "o": (570, 840, 2410),
}


def _resonator(f: float, bw: float, fs: int):
    r = np.exp(-np.pi * bw / fs)
    theta = 2 * np.pi * f / fs
    return [1.0 - r], [1.0, -2 * r * np.cos(theta), r * r]


def synthetic_speech(seconds: float = 4.0, fs: int = 8000, seed: int = 0,
                     f0: float | None = None, peak: float = 0.5) -> np.ndarray:
    """Speech-like waveform with voiced syllables and unvoiced bursts.

    Args:
        seconds: Clip duration.
        fs: Sample rate in Hz.
        seed: Seed for pitch, vowel and timing choices.
        f0: Mean pitch; drawn from 100-220 Hz when omitted.
        peak: Peak amplitude of the output.

    Returns:
        float64 array of ``round(seconds * fs)`` samples.
    """
    rng = np.random.default_rng(seed)
    n = int(round(seconds * fs))
    f0 = float(rng.uniform(100, 220)) if f0 is None else float(f0)
    t = np.arange(n) / fs
    pitch = f0 * (1 + 0.12 * np.sin(2 * np.pi * rng.uniform(0.3, 0.8) * t + rng.uniform(0, 6)))
    phase = np.cumsum(pitch) / fs
    # band-limited sawtooth-like glottal source
    source = np.zeros(n)
    for k in range(1, int(fs / 2 / (f0 * 1.15))):
        source += np.sin(2 * np.pi * k * phase) / k
    source += 0.02 * rng.standard_normal(n)

    out = np.zeros(n)
    names = list(VOWELS)
    pos = 0
    while pos < n:
        syl = int(fs * rng.uniform(0.15, 0.35))
        gap = int(fs * rng.uniform(0.04, 0.12))
        seg = slice(pos, min(n, pos + syl))
        m = seg.stop - seg.start
        v = VOWELS[names[rng.integers(len(names))]]
        y = source[seg]
        voiced = np.zeros(m)
        for i, f in enumerate(v):
            b, a = _resonator(f * rng.uniform(0.92, 1.08), 80 + 40 * i, fs)
            voiced += signal.lfilter(b, a, y) / (i + 1)
        env = np.sin(np.pi * np.linspace(0, 1, m)) ** 0.6
        out[seg] += voiced * env
        # fricative between syllables
        fs_seg = slice(seg.stop, min(n, seg.stop + gap))
        k = fs_seg.stop - fs_seg.start
        if k > 8:
            noise = rng.standard_normal(k)
            b, a = signal.butter(2, min(0.95, 2 * rng.uniform(1800, 3500) / fs), "high")
            burst = signal.lfilter(b, a, noise) * np.hanning(k) * rng.uniform(0.1, 0.4)
            out[fs_seg] += burst
        pos = fs_seg.stop
    # low breath floor so no frame is exactly silent
    out += 0.003 * rng.standard_normal(n)
    out -= out.mean()
    return peak * out / np.max(np.abs(out))
