"""STFT analysis and overlap-add synthesis with a square-root Hann window.

The same code path serves plain numpy arrays (no tape) and tape tensors, so
the multi-resolution loss can differentiate straight through the analysis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import tensor as T
from .core.complex import ComplexTensor
from .core.tensor import Tensor

__all__ = [
    "StftConfig",
    "ComplexSpectrogram",
    "sqrt_hann",
    "stft",
    "istft",
    "log_magnitude",
    "phase",
    "LOG_EPS",
]

LOG_EPS = 1e-9


def sqrt_hann(n: int) -> np.ndarray:
    """Periodic square-root Hann window of length ``n``."""
    return np.sqrt(0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n))


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 512
    hop: int = 128
    win_length: int | None = None
    window: str = "sqrt_hann"

    def __post_init__(self):
        if self.win_length is None:
            object.__setattr__(self, "win_length", self.n_fft)
        if self.window != "sqrt_hann":
            raise ValueError(f"unsupported window {self.window!r}")
        if not (0 < self.hop <= self.win_length <= self.n_fft):
            raise ValueError(f"need 0 < hop <= win_length <= n_fft, got {self}")

    @property
    def is_cola(self) -> bool:
        return self.win_length % self.hop == 0 and self.win_length // self.hop >= 2

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def window_array(self, dtype=np.float64) -> np.ndarray:
        w = np.zeros(self.n_fft)
        off = (self.n_fft - self.win_length) // 2
        w[off:off + self.win_length] = sqrt_hann(self.win_length)
        return w.astype(dtype)

    def n_frames(self, n_samples: int) -> int:
        return 1 + n_samples // self.hop

    def to_dict(self) -> dict:
        return {"n_fft": self.n_fft, "hop": self.hop, "win_length": self.win_length}


@dataclass
class ComplexSpectrogram:
    """Complex ``[..., F, T]`` data with the analysis that produced it."""

    data: ComplexTensor
    config: StftConfig
    sample_rate: float = 8000.0
    n_samples: int | None = None
    trimmed: bool = field(default=False)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data.numpy()

    def magnitude(self) -> np.ndarray:
        return np.abs(self.numpy())


def _frame_index(n_padded: int, cfg: StftConfig) -> np.ndarray:
    n_frames = 1 + (n_padded - cfg.n_fft) // cfg.hop
    return np.arange(n_frames)[:, None] * cfg.hop + np.arange(cfg.n_fft)[None, :]


def _reflect_index(n: int, pad: int) -> np.ndarray:
    idx = np.arange(-pad, n + pad)
    idx = np.abs(idx)
    over = idx >= n
    idx[over] = 2 * (n - 1) - idx[over]
    return idx


def stft(x, cfg: StftConfig, sample_rate: float = 8000.0) -> ComplexSpectrogram:
    """Centered STFT of ``x`` (``[N]`` or ``[B, N]``) with reflection padding.

    Returns frames as ``[..., F, T]`` with ``F = n_fft // 2 + 1`` and
    ``T = 1 + N // hop``.
    """
    if isinstance(x, Tensor):
        xt = x
    else:
        arr = np.asarray(x)
        xt = Tensor(arr if arr.dtype in (np.float32, np.float64) else arr.astype(np.float64))
    n = xt.shape[-1]
    if n < cfg.win_length:
        raise ValueError(f"waveform of {n} samples is shorter than one window ({cfg.win_length})")
    if not np.all(np.isfinite(xt.data)):
        raise ValueError("waveform contains non-finite samples")
    pad = cfg.n_fft // 2
    if pad >= n:
        raise ValueError("waveform too short for centered reflection padding")
    index = _frame_index(n + 2 * pad, cfg)
    # reflection padding and framing fused into one gather
    gather = _reflect_index(n, pad)[index]
    frames = T.take_last(xt, gather) * cfg.window_array(xt.dtype)
    re, im = T.rfft(frames)
    # frame 0 is an even-symmetric reflection around sample 0, so its
    # spectrum is real for every input; pin the imaginary plane to exact
    # zeros instead of leaving roundoff that a log-magnitude would amplify
    mask = np.ones(im.shape[-2:], dtype=im.dtype)
    mask[0] = 0.0
    im = im * mask
    data = ComplexTensor(re.swapaxes(-1, -2), im.swapaxes(-1, -2))
    return ComplexSpectrogram(data, cfg, sample_rate, n_samples=n)


def _window_sum_square(cfg: StftConfig, n_frames: int, length: int) -> np.ndarray:
    w2 = cfg.window_array() ** 2
    out = np.zeros(length)
    for t in range(n_frames):
        out[t * cfg.hop:t * cfg.hop + cfg.n_fft] += w2
    return out


def istft(S: ComplexSpectrogram | ComplexTensor, n_out: int | None = None,
          cfg: StftConfig | None = None):
    """Overlap-add inverse of :func:`stft`.

    Returns a :class:`Tensor` when the spectrogram lives on a tape (or was
    given as a :class:`ComplexTensor`), otherwise a numpy array.
    """
    if isinstance(S, ComplexSpectrogram):
        data, cfg = S.data, S.config
        n_out = S.n_samples if n_out is None else n_out
        as_numpy = not data.requires_grad
    else:
        data, as_numpy = S, False
        if cfg is None:
            raise ValueError("cfg is required when passing a bare ComplexTensor")
    if not cfg.is_cola:
        raise ValueError(f"{cfg} does not satisfy the COLA condition for sqrt-Hann")
    n_frames = data.shape[-1]
    if n_out is None:
        n_out = (n_frames - 1) * cfg.hop
    pad = cfg.n_fft // 2
    length = (n_frames - 1) * cfg.hop + cfg.n_fft
    frames = T.irfft(data.real.swapaxes(-1, -2), data.imag.swapaxes(-1, -2), cfg.n_fft)
    frames = frames * cfg.window_array(frames.dtype)
    y = T.overlap_add(frames, cfg.hop, length)
    wss = _window_sum_square(cfg, n_frames, length)[pad:pad + n_out]
    if np.any(wss < 1e-8):
        raise ValueError("window overlap vanishes inside the output span")
    y = y[..., pad:pad + n_out] * (1.0 / wss).astype(frames.dtype)
    return y.data if as_numpy else y


def log_magnitude(S, eps: float = LOG_EPS) -> np.ndarray:
    z = S.numpy() if hasattr(S, "numpy") else np.asarray(S)
    return np.log(np.abs(z) + eps)


def phase(S) -> np.ndarray:
    """Phase in (-pi, pi]."""
    z = S.numpy() if hasattr(S, "numpy") else np.asarray(S)
    ph = np.arctan2(z.imag, z.real)
    return np.where(ph <= -np.pi, ph + 2 * np.pi, ph)
