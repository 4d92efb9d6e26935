"""Complex multi-resolution STFT loss on the real and imaginary planes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core.tensor import Tensor, as_tensor
from .dsp import StftConfig, stft

__all__ = [
    "MultiResConfig",
    "spectral_convergence",
    "log_magnitude_loss",
    "complex_multires_stft_loss",
]


def _default_resolutions() -> tuple[StftConfig, ...]:
    return (StftConfig(256, 128), StftConfig(512, 256), StftConfig(1024, 512))


@dataclass(frozen=True)
class MultiResConfig:
    resolutions: tuple[StftConfig, ...] = field(default_factory=_default_resolutions)
    eps: float = 1e-8

    def __post_init__(self):
        res = tuple(StftConfig(**r) if isinstance(r, dict) else r for r in self.resolutions)
        object.__setattr__(self, "resolutions", res)
        if not res:
            raise ValueError("at least one resolution is required")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    @property
    def max_window(self) -> int:
        return max(r.win_length for r in self.resolutions)

    def to_dict(self) -> dict:
        return {"resolutions": [r.to_dict() for r in self.resolutions], "eps": self.eps}


def _check_pair(x, y) -> None:
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")


def _frob(t: Tensor) -> Tensor:
    # the tiny floor keeps the sqrt differentiable when the residual vanishes
    return ((t * t).sum() + 1e-30).sqrt()


def spectral_convergence(X, X_hat, eps: float = 1e-8) -> Tensor:
    """``||X - X_hat||_F / (||X||_F + eps)`` for one real plane."""
    X, X_hat = as_tensor(X), as_tensor(X_hat)
    _check_pair(X, X_hat)
    ref = float(np.sqrt(np.sum(np.square(X.data, dtype=np.float64))))
    if X.requires_grad:
        return _frob(X - X_hat) / (_frob(X) + eps)
    return _frob(X - X_hat) * (1.0 / (ref + eps))


def log_magnitude_loss(X, X_hat, eps: float = 1e-8) -> Tensor:
    """Mean of ``|log(|X| + eps) - log(|X_hat| + eps)|`` over all bins."""
    X, X_hat = as_tensor(X), as_tensor(X_hat)
    _check_pair(X, X_hat)
    a = (X.abs() + eps).log()
    b = (X_hat.abs() + eps).log()
    return (a - b).abs().mean()


def complex_multires_stft_loss(x, x_hat, cfg: MultiResConfig | None = None) -> Tensor:
    """Average of SC + log-magnitude terms over resolutions, real plus imaginary.

    ``x`` is the reference waveform (``[N]`` or ``[B, N]``), ``x_hat`` the
    estimate, which may be a tape tensor.  For a batch, spectral convergence
    is taken over the whole batch tensor.
    """
    cfg = cfg or MultiResConfig()
    x, x_hat = as_tensor(x), as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {x_hat.shape}")
    if not (np.all(np.isfinite(x.data)) and np.all(np.isfinite(x_hat.data))):
        raise ValueError("waveforms must be finite")
    if x.shape[-1] < cfg.max_window:
        raise ValueError(f"waveform of {x.shape[-1]} samples is shorter than the "
                         f"largest window ({cfg.max_window})")
    if x_hat.dtype != x.dtype:
        x = Tensor(x.data.astype(x_hat.dtype))
    loss_r = loss_i = None
    for res in cfg.resolutions:
        S = stft(x, res).data
        S_hat = stft(x_hat, res).data
        lr = spectral_convergence(S.real, S_hat.real, cfg.eps) + log_magnitude_loss(S.real, S_hat.real, cfg.eps)
        li = spectral_convergence(S.imag, S_hat.imag, cfg.eps) + log_magnitude_loss(S.imag, S_hat.imag, cfg.eps)
        loss_r = lr if loss_r is None else loss_r + lr
        loss_i = li if loss_i is None else loss_i + li
    n = float(len(cfg.resolutions))
    return (loss_r + loss_i) * (1.0 / n)
