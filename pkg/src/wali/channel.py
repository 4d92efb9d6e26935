"""Software stand-in for the pressure-sensor channel.

A clean 8 kHz clip is decimated to the sensor rate without any
anti-aliasing filter, interpolated back with a windowed sinc, and optionally
mixed with transient noise at a random SNR.
"""

from __future__ import annotations

import json
import logging
import os
import wave
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import signal

__all__ = [
    "P_REF",
    "SimConfig",
    "TrainingPair",
    "ManifestRecord",
    "DatasetManifest",
    "spl_to_pascal",
    "pascal_to_spl",
    "decimate_alias",
    "sinc_upsample",
    "mix_noise_at_snr",
    "measure_snr",
    "simulate_sensor",
    "build_dataset",
    "file_rng",
    "read_wav",
    "write_wav",
]

log = logging.getLogger(__name__)

P_REF = 20e-6
KAISER_BETA = 8.6
ZERO_CROSSINGS = 64


# -- sound pressure ---------------------------------------------------------

def spl_to_pascal(level_db):
    """Sound pressure level in dB SPL to RMS pressure in pascal."""
    level = np.asarray(level_db, dtype=np.float64)
    if not np.all(np.isfinite(level)):
        raise ValueError("level must be finite")
    out = P_REF * 10.0 ** (level / 20.0)
    return float(out) if out.ndim == 0 else out


def pascal_to_spl(pressure):
    """RMS pressure in pascal to dB SPL."""
    p = np.asarray(pressure, dtype=np.float64)
    if np.any(p <= 0) or not np.all(np.isfinite(p)):
        raise ValueError("pressure must be positive and finite")
    out = 20.0 * np.log10(p / P_REF)
    return float(out) if out.ndim == 0 else out


# -- rate conversion --------------------------------------------------------

def _ratio(fs_hi: int, fs_lo: int) -> int:
    if fs_lo <= 0 or fs_hi <= 0:
        raise ValueError("sample rates must be positive")
    if fs_hi % fs_lo:
        raise ValueError(f"rate ratio {fs_hi}/{fs_lo} is not an integer")
    return fs_hi // fs_lo


def decimate_alias(x, fs_in: int, fs_out: int, lowpass: bool = False) -> np.ndarray:
    """Keep every M-th sample with no anti-aliasing filter.

    Content above ``fs_out / 2`` folds back into the band.  With
    ``lowpass=True`` a first-order RC low-pass at ``fs_out / 2`` is applied
    first, a crude stand-in for diaphragm and tube damping.
    """
    m = _ratio(fs_in, fs_out)
    x = np.asarray(x, dtype=np.float64)
    if lowpass:
        b, a = signal.bilinear([1.0], [1.0 / (np.pi * fs_out), 1.0], fs=fs_in)
        x = signal.lfilter(b, a, x)
    return x[::m].copy()


def _sinc_filter(up: int) -> np.ndarray:
    half = ZERO_CROSSINGS * up
    n = np.arange(-half, half + 1)
    h = np.sinc(n / up) * np.kaiser(2 * half + 1, KAISER_BETA)
    # normalize each polyphase branch so a constant input stays constant
    for phase in range(up):
        h[phase::up] /= h[phase::up].sum()
    return h


def sinc_upsample(x, fs_in: int, fs_out: int) -> np.ndarray:
    """Windowed-sinc interpolation by an integer factor.

    Kaiser window (beta 8.6) over 64 zero crossings per side, edges padded by
    replication.  The output has ``len(x) * fs_out / fs_in`` samples.
    """
    up = _ratio(fs_out, fs_in)
    x = np.asarray(x, dtype=np.float64)
    if up == 1:
        return x.copy()
    if x.size == 0:
        return x.copy()
    h = _sinc_filter(up)
    pad = ZERO_CROSSINGS
    xp = np.pad(x, pad, mode="edge")
    y = signal.upfirdn(h, xp, up=up)
    start = pad * up + (len(h) - 1) // 2
    return y[start:start + len(x) * up]


# -- noise ------------------------------------------------------------------

def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x, dtype=np.float64))))


def measure_snr(clean, noisy) -> float:
    """SNR in dB of ``noisy`` against its clean component."""
    clean = np.asarray(clean, dtype=np.float64)
    resid = np.asarray(noisy, dtype=np.float64) - clean
    return 20.0 * np.log10(_rms(clean) / _rms(resid))


def mix_noise_at_snr(clean, noise, snr_db: float) -> np.ndarray:
    """Add ``noise`` scaled so the RMS SNR equals ``snr_db``.

    Noise shorter than ``clean`` is looped; longer noise is cropped.
    """
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if clean.size == 0 or noise.size == 0:
        raise ValueError("empty waveform")
    noise = np.resize(noise, clean.shape)
    pc, pn = _rms(clean), _rms(noise)
    if pc == 0.0:
        raise ValueError("clean signal is silent; SNR is undefined")
    if pn == 0.0:
        raise ValueError("noise is silent; SNR is undefined")
    g = pc / (pn * 10.0 ** (snr_db / 20.0))
    return clean + g * noise


# -- pipeline ---------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    sensor_rate: int = 500
    target_rate: int = 8000
    snr_range_db: tuple[float, float] = (-7.0, 40.0)
    clip_seconds: float = 4.0
    seed: int = 0
    noise: bool = False
    lowpass: bool = False
    gain: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "snr_range_db", tuple(float(v) for v in self.snr_range_db))
        _ratio(self.target_rate, self.sensor_rate)
        lo, hi = self.snr_range_db
        if lo > hi:
            raise ValueError(f"snr range low {lo} exceeds high {hi}")
        if self.clip_seconds <= 0:
            raise ValueError("clip_seconds must be positive")

    @property
    def n_samples(self) -> int:
        return int(round(self.clip_seconds * self.target_rate))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["snr_range_db"] = list(self.snr_range_db)
        return d


@dataclass
class TrainingPair:
    clean: np.ndarray
    degraded: np.ndarray
    sensor_rate: int
    snr_db: float | None = None
    noise_id: str | None = None


def file_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator per file, derived from the run seed and the name."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def fit_length(x, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if len(x) >= n:
        return x[:n].copy()
    return np.pad(x, (0, n - len(x)))


def simulate_sensor(clean, cfg: SimConfig, noise_bank: Mapping[str, np.ndarray] | Sequence | None = None,
                    rng: np.random.Generator | None = None) -> TrainingPair:
    """Pad/trim, alias through the sensor rate, interpolate back, add noise."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    x = fit_length(clean, cfg.n_samples)
    y = decimate_alias(x, cfg.target_rate, cfg.sensor_rate, lowpass=cfg.lowpass)
    y = sinc_upsample(y, cfg.sensor_rate, cfg.target_rate) * cfg.gain
    snr, noise_id = None, None
    if cfg.noise:
        if not noise_bank:
            raise ValueError("noise mixing is on but the noise bank is empty")
        if isinstance(noise_bank, Mapping):
            names = sorted(noise_bank)
            bank = [noise_bank[k] for k in names]
        else:
            bank = list(noise_bank)
            names = [str(i) for i in range(len(bank))]
        k = int(rng.integers(len(bank)))
        snr = float(rng.uniform(*cfg.snr_range_db))
        noise = np.asarray(bank[k], dtype=np.float64)
        noise = np.roll(np.resize(noise, len(y)), -int(rng.integers(len(noise))))
        y = mix_noise_at_snr(y, noise, snr)
        noise_id = names[k]
    return TrainingPair(x, y, cfg.sensor_rate, snr, noise_id)


# -- WAV io -----------------------------------------------------------------

def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a PCM WAV file as float64 in [-1, 1]; channels are averaged."""
    with wave.open(str(path), "rb") as w:
        width, n_ch, sr = w.getsampwidth(), w.getnchannels(), w.getframerate()
        raw = w.readframes(w.getnframes())
    if width == 2:
        x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif width == 1:
        x = (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    elif width == 4:
        x = np.frombuffer(raw, dtype="<i4").astype(np.float64) / 2147483648.0
    else:
        raise ValueError(f"{path}: unsupported sample width {width}")
    if n_ch > 1:
        x = x.reshape(-1, n_ch).mean(axis=1)
    return x, sr


def write_wav(path, x, sample_rate: int) -> None:
    """Write 16-bit PCM mono; samples are clipped to [-1, 1]."""
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(x * 32767.0).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(sample_rate))
        w.writeframes(pcm.tobytes())


def load_at_rate(path, rate: int) -> np.ndarray:
    x, sr = read_wav(path)
    if sr != rate:
        g = np.gcd(int(sr), int(rate))
        x = signal.resample_poly(x, rate // g, sr // g)
    return x


# -- dataset ----------------------------------------------------------------

@dataclass
class ManifestRecord:
    clean_path: str
    degraded_path: str
    sensor_rate: int
    snr_db: float | None
    duration_s: float

    @property
    def clip_id(self) -> str:
        return Path(self.clean_path).stem


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    root: Path | None = None
    skipped: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() or self.root is None else self.root / p

    @property
    def total_seconds(self) -> float:
        return float(sum(r.duration_s for r in self.records))

    def dumps(self) -> str:
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.records)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        self.root = path.parent
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        records = []
        with open(path) as f:
            for i, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    records.append(ManifestRecord(**json.loads(line)))
                except (TypeError, json.JSONDecodeError) as exc:
                    raise ValueError(f"{path}:{i}: bad manifest record: {exc}") from exc
        return cls(records, root=path.parent)

    def subset(self, records: list[ManifestRecord]) -> "DatasetManifest":
        return DatasetManifest(list(records), self.root)

    def load_pair(self, rec: ManifestRecord) -> tuple[np.ndarray, np.ndarray]:
        clean, _ = read_wav(self.resolve(rec.clean_path))
        degraded, _ = read_wav(self.resolve(rec.degraded_path))
        return clean, degraded


def _wav_files(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.suffix.lower() == ".wav" and p.is_file())


def load_noise_bank(noise_dir, rate: int) -> dict[str, np.ndarray]:
    bank = {}
    for p in _wav_files(Path(noise_dir)):
        try:
            x = load_at_rate(p, rate)
        except (wave.Error, ValueError, EOFError) as exc:
            log.warning("skipping unreadable noise file %s: %s", p, exc)
            continue
        if _rms(x) > 0:
            bank[p.stem] = x
    return bank


def build_dataset(clean_dir, noise_dir, cfg: SimConfig, out_dir, jobs: int = 1) -> DatasetManifest:
    """Simulate one degraded file per clean file and write ``manifest.jsonl``.

    Each file draws from its own generator (seed plus file name), so results
    do not depend on ``jobs`` or on which other files are present.
    Unreadable files are skipped with a warning and listed in ``skipped``.
    """
    clean_dir, out_dir = Path(clean_dir), Path(out_dir)
    if not clean_dir.is_dir():
        raise FileNotFoundError(f"clean directory not found: {clean_dir}")
    files = _wav_files(clean_dir)
    if not files:
        raise ValueError(f"no WAV files in {clean_dir}")
    bank = None
    if cfg.noise:
        if noise_dir is None or not Path(noise_dir).is_dir():
            raise FileNotFoundError(f"noise directory not found: {noise_dir}")
        bank = load_noise_bank(noise_dir, cfg.target_rate)
        if not bank:
            raise ValueError(f"no usable noise files in {noise_dir}")

    def work(p: Path):
        try:
            x = load_at_rate(p, cfg.target_rate)
        except (wave.Error, ValueError, EOFError) as exc:
            log.warning("skipping unreadable clean file %s: %s", p, exc)
            return None
        pair = simulate_sensor(x, cfg, bank, file_rng(cfg.seed, p.name))
        clean_rel = os.path.join("clean", p.stem + ".wav")
        deg_rel = os.path.join("degraded", p.stem + ".wav")
        write_wav(out_dir / clean_rel, pair.clean, cfg.target_rate)
        write_wav(out_dir / deg_rel, pair.degraded, cfg.target_rate)
        return ManifestRecord(clean_rel, deg_rel, cfg.sensor_rate, pair.snr_db,
                              len(pair.clean) / cfg.target_rate)

    out_dir.mkdir(parents=True, exist_ok=True)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, files))
    else:
        results = [work(p) for p in files]
    records = [r for r in results if r is not None]
    skipped = [p.name for p, r in zip(files, results) if r is None]
    if not records:
        raise ValueError(f"no readable WAV files in {clean_dir}")
    manifest = DatasetManifest(records, out_dir, skipped)
    manifest.save(out_dir / "manifest.jsonl")
    if skipped:
        (out_dir / "skipped.txt").write_text("".join(s + "\n" for s in skipped))
    return manifest
