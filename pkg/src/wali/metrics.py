"""Objective metrics (LSD, SI-SDR, STOI) and corpus-level reports."""

from __future__ import annotations

import csv
import json
import logging
import math
import wave
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .dsp import StftConfig, stft

__all__ = [
    "lsd",
    "si_sdr",
    "stoi",
    "MetricReport",
    "evaluate_dataset",
    "REPORT_COLUMNS",
]

log = logging.getLogger(__name__)

LSD_EPS = 1e-9
REPORT_COLUMNS = ("clip_id", "condition", "lsd", "si_sdr_db", "stoi")


def _pair(ref, est) -> tuple[np.ndarray, np.ndarray]:
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.ndim != 1 or est.ndim != 1:
        raise ValueError("metrics take mono 1-D waveforms")
    if ref.shape != est.shape:
        raise ValueError(f"length mismatch: {len(ref)} vs {len(est)}")
    return ref, est


def lsd(ref, est, cfg: StftConfig | None = None) -> float:
    """Log-spectral distance on log10 power spectra.

    Frame-wise RMS over bins of ``log10(P_ref + eps) - log10(P_est + eps)``,
    averaged over frames.
    """
    ref, est = _pair(ref, est)
    cfg = cfg or StftConfig(512, 128)
    p_ref = np.abs(stft(ref, cfg).numpy()) ** 2
    p_est = np.abs(stft(est, cfg).numpy()) ** 2
    d = np.log10(p_ref + LSD_EPS) - np.log10(p_est + LSD_EPS)
    return float(np.mean(np.sqrt(np.mean(d * d, axis=0))))


def si_sdr(ref, est) -> float:
    """Scale-invariant SDR in dB; ``+inf`` when the residual is exactly zero."""
    ref, est = _pair(ref, est)
    rr = float(np.dot(ref, ref))
    if rr == 0.0:
        raise ValueError("reference is silent")
    alpha = float(np.dot(est, ref)) / rr
    target = alpha * ref
    resid = target - est
    e_res = float(np.dot(resid, resid))
    if e_res == 0.0:
        return math.inf
    e_tgt = float(np.dot(target, target))
    if e_tgt == 0.0:
        return -math.inf
    return 10.0 * math.log10(e_tgt / e_res)


# -- STOI -------------------------------------------------------------------

STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150
STOI_N = 30
STOI_BETA = -15.0
STOI_DYN_RANGE = 40.0
_EPS = np.finfo(np.float64).eps


def _third_octave_matrix() -> np.ndarray:
    f = np.linspace(0, STOI_FS, STOI_NFFT + 1)[:STOI_NFFT // 2 + 1]
    k = np.arange(STOI_BANDS)
    lo = STOI_MIN_FREQ * 2.0 ** ((2 * k - 1) / 6)
    hi = STOI_MIN_FREQ * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((STOI_BANDS, len(f)))
    for i in range(STOI_BANDS):
        a = int(np.argmin((f - lo[i]) ** 2))
        b = int(np.argmin((f - hi[i]) ** 2))
        obm[i, a:b] = 1.0
    return obm


def _stoi_window() -> np.ndarray:
    return np.hanning(STOI_FRAME + 2)[1:-1]


def _frames(x: np.ndarray, hop: int) -> np.ndarray:
    starts = range(0, len(x) - STOI_FRAME, hop)
    return np.array([x[s:s + STOI_FRAME] for s in starts]).reshape(-1, STOI_FRAME)


def _drop_silent_frames(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    hop = STOI_FRAME // 2
    w = _stoi_window()
    fx, fy = _frames(x, hop) * w, _frames(y, hop) * w
    energy = 20 * np.log10(np.linalg.norm(fx, axis=1) + _EPS)
    keep = (np.max(energy) - STOI_DYN_RANGE - energy) < 0
    fx, fy = fx[keep], fy[keep]
    n = (len(fx) - 1) * hop + STOI_FRAME if len(fx) else 0
    xs, ys = np.zeros(n), np.zeros(n)
    for i in range(len(fx)):
        xs[i * hop:i * hop + STOI_FRAME] += fx[i]
        ys[i * hop:i * hop + STOI_FRAME] += fy[i]
    return xs, ys


def _band_envelopes(x: np.ndarray, obm: np.ndarray) -> np.ndarray:
    spec = np.fft.rfft(_frames(x, STOI_FRAME // 2) * _stoi_window(), n=STOI_NFFT, axis=1)
    return np.sqrt(obm @ (np.abs(spec) ** 2).T)


def stoi(ref, est, fs: int) -> float:
    """Short-time objective intelligibility of ``est`` against ``ref``.

    Both signals are resampled to 10 kHz, frames more than 40 dB below the
    loudest reference frame are dropped, and clipped normalized correlations
    of 15 one-third-octave band envelopes over 384 ms segments are averaged.
    """
    ref, est = _pair(ref, est)
    if len(ref) < 0.4 * fs:
        raise ValueError(f"STOI needs at least 0.4 s of signal, got {len(ref) / fs:.3f} s")
    if fs != STOI_FS:
        g = math.gcd(int(fs), STOI_FS)
        ref = signal.resample_poly(ref, STOI_FS // g, int(fs) // g)
        est = signal.resample_poly(est, STOI_FS // g, int(fs) // g)
    ref, est = _drop_silent_frames(ref, est)
    obm = _third_octave_matrix()
    X = _band_envelopes(ref, obm)
    Y = _band_envelopes(est, obm)
    n_frames = X.shape[1]
    if n_frames < STOI_N:
        raise ValueError("not enough non-silent frames for one STOI segment")
    # segments [M, bands, N]
    idx = np.arange(STOI_N)[None, :] + np.arange(n_frames - STOI_N + 1)[:, None]
    xs = X[:, idx].transpose(1, 0, 2)
    ys = Y[:, idx].transpose(1, 0, 2)
    norm = np.linalg.norm(xs, axis=2, keepdims=True) / (np.linalg.norm(ys, axis=2, keepdims=True) + _EPS)
    ys = np.minimum(ys * norm, xs * (1 + 10 ** (-STOI_BETA / 20)))
    xs = xs - xs.mean(axis=2, keepdims=True)
    ys = ys - ys.mean(axis=2, keepdims=True)
    xs = xs / (np.linalg.norm(xs, axis=2, keepdims=True) + _EPS)
    ys = ys / (np.linalg.norm(ys, axis=2, keepdims=True) + _EPS)
    return float(np.sum(xs * ys) / (xs.shape[0] * xs.shape[1]))


# -- reports ----------------------------------------------------------------

@dataclass
class MetricReport:
    """Per-clip metric rows plus per-condition means."""

    rows: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def add(self, clip_id: str, condition: str, ref, est, fs: int,
            stft_cfg: StftConfig | None = None) -> dict:
        row = {
            "clip_id": clip_id,
            "condition": condition,
            "lsd": lsd(ref, est, stft_cfg),
            "si_sdr_db": si_sdr(ref, est),
            "stoi": stoi(ref, est, fs),
        }
        self.rows.append(row)
        return row

    def conditions(self) -> list[str]:
        return sorted({r["condition"] for r in self.rows})

    def means(self) -> dict[str, dict[str, float]]:
        out = {}
        for cond in self.conditions():
            rows = [r for r in self.rows if r["condition"] == cond]
            out[cond] = {k: float(np.mean([r[k] for r in rows])) for k in REPORT_COLUMNS[2:]}
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(REPORT_COLUMNS)
            for r in self.rows:
                w.writerow([r["clip_id"], r["condition"]] + [repr(float(r[k])) for k in REPORT_COLUMNS[2:]])

    def to_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for r in self.rows:
                f.write(json.dumps({k: r[k] for k in REPORT_COLUMNS}) + "\n")

    def to_summary_json(self, path) -> None:
        Path(path).write_text(json.dumps({"means": self.means(), "config": self.config}, indent=2))

    @classmethod
    def from_csv(cls, path) -> "MetricReport":
        with open(path, newline="") as f:
            rows = [{"clip_id": r["clip_id"], "condition": r["condition"],
                     **{k: float(r[k]) for k in REPORT_COLUMNS[2:]}} for r in csv.DictReader(f)]
        return cls(rows)

    @classmethod
    def from_jsonl(cls, path) -> "MetricReport":
        with open(path) as f:
            return cls([json.loads(line) for line in f if line.strip()])


def evaluate_dataset(manifest, model=None, stft_cfg: StftConfig | None = None,
                     sample_rate: int = 8000, jobs: int = 1) -> MetricReport:
    """Score every manifest pair as ``raw`` and, with a model, ``reconstructed``.

    ``model`` is anything with a ``reconstruct(waveform) -> waveform`` method
    or a callable.  Unreadable clips are skipped with a warning.
    """
    from .channel import read_wav

    def score(rec):
        try:
            clean, _ = read_wav(manifest.resolve(rec.clean_path))
            degraded, _ = read_wav(manifest.resolve(rec.degraded_path))
        except (OSError, wave.Error, ValueError, EOFError) as exc:
            log.warning("skipping clip %s: %s", rec.clip_id, exc)
            return []
        n = min(len(clean), len(degraded))
        clean, degraded = clean[:n], degraded[:n]
        part = MetricReport()
        part.add(rec.clip_id, "raw", clean, degraded, sample_rate, stft_cfg)
        if model is not None:
            fn = model.reconstruct if hasattr(model, "reconstruct") else model
            est = np.asarray(fn(degraded), dtype=np.float64)[:n]
            part.add(rec.clip_id, "reconstructed", clean, est, sample_rate, stft_cfg)
        return part.rows

    # model inference mutates no state but shares one tape stack per thread,
    # so only the model-free path is parallelized
    if jobs > 1 and model is None:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(score, manifest.records))
    else:
        parts = [score(r) for r in manifest.records]
    cfg = {"stft": (stft_cfg or StftConfig(512, 128)).to_dict(), "sample_rate": sample_rate,
           "n_clips": len(manifest.records)}
    return MetricReport([row for p in parts for row in p], cfg)
