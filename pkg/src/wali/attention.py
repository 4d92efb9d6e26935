"""Complex conformer bottleneck and the complex global attention block (CGAB)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import tensor as T
from .core.complex import ComplexTensor, c_matmul, c_mul, concat_channels
from .layers import (
    ComplexBatchNorm,
    ComplexConv1d,
    ComplexConv2d,
    ComplexLinear,
    Module,
    crelu,
    init_complex,
)

__all__ = [
    "ConformerConfig",
    "CgabConfig",
    "ComplexMHSA",
    "complex_mhsa",
    "ConformerLayer",
    "ComplexConformer",
    "CGAB",
]


@dataclass(frozen=True)
class ConformerConfig:
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    conv_kernel: int = 7
    n_layers: int = 2

    def __post_init__(self):
        if min(self.d_model, self.n_heads, self.d_ff, self.conv_kernel, self.n_layers) < 1:
            raise ValueError(f"all conformer sizes must be >= 1: {self}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")


@dataclass(frozen=True)
class CgabConfig:
    c_attn: int = 5
    fixed_F: int | None = None
    fixed_T: int | None = None
    kernel: int = 9


class ComplexMHSA(Module):
    """Multi-head self-attention over complex tokens ``[N, S, d_model]``.

    Scores are ``Re(Q K^H) / sqrt(d_k)``, so the attention weights are real
    and each row is a proper softmax distribution.
    """

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, dtype=np.float32):
        if d_model % n_heads:
            raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.q = ComplexLinear(d_model, d_model, rng, dtype=dtype)
        self.k = ComplexLinear(d_model, d_model, rng, dtype=dtype)
        self.v = ComplexLinear(d_model, d_model, rng, dtype=dtype)
        self.out = ComplexLinear(d_model, d_model, rng, dtype=dtype)

    def attend(self, x: ComplexTensor) -> tuple[ComplexTensor, T.Tensor]:
        N, S, d = x.shape
        h = self.n_heads
        dk = d // h

        def heads(z: ComplexTensor) -> ComplexTensor:
            return z.reshape(N, S, h, dk).transpose(0, 2, 1, 3)

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        # Re(q conj(k)^T) = q_r k_r^T + q_i k_i^T, done as one product
        qc = T.concat([q.real, q.imag], axis=-1) * (1.0 / np.sqrt(dk))
        kc = T.concat([k.real, k.imag], axis=-1)
        weights = T.matmul(qc, kc.swapaxes(-1, -2)).softmax(axis=-1)
        ctx = T.matmul(weights, T.concat([v.real, v.imag], axis=-1))
        ctx = ComplexTensor(ctx[..., :dk], ctx[..., dk:])
        ctx = ctx.transpose(0, 2, 1, 3).reshape(N, S, d)
        return self.out(ctx), weights

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        return self.attend(x)[0]


def complex_mhsa(x: ComplexTensor, module: ComplexMHSA) -> ComplexTensor:
    if x.shape[1] < 1:
        raise ValueError("sequence must hold at least one token")
    return module(x)


class _FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng, dtype):
        self.lin1 = ComplexLinear(d_model, d_ff, rng, dtype=dtype)
        self.norm = ComplexBatchNorm(d_ff, channel_axis=-1, dtype=dtype)
        self.lin2 = ComplexLinear(d_ff, d_model, rng, dtype=dtype)

    def forward(self, x):
        return self.lin2(crelu(self.norm(self.lin1(x))))


class _ConvModule(Module):
    def __init__(self, d_model: int, kernel: int, rng, dtype):
        self.conv1 = ComplexConv1d(d_model, d_model, kernel, kernel // 2, rng, dtype)
        self.conv2 = ComplexConv1d(d_model, d_model, kernel, kernel // 2, rng, dtype)

    def forward(self, x):
        y = x.transpose(0, 2, 1)  # N, d, S
        y = crelu(self.conv2(crelu(self.conv1(y))))
        return y.transpose(0, 2, 1)


class ConformerLayer(Module):
    """FF -> MHSA -> conv -> FF; each a residual branch followed by CBN."""

    def __init__(self, cfg: ConformerConfig, rng: np.random.Generator, dtype=np.float32):
        d = cfg.d_model
        self.ff1 = _FeedForward(d, cfg.d_ff, rng, dtype)
        self.norm1 = ComplexBatchNorm(d, channel_axis=-1, dtype=dtype)
        self.mhsa = ComplexMHSA(d, cfg.n_heads, rng, dtype)
        self.norm2 = ComplexBatchNorm(d, channel_axis=-1, dtype=dtype)
        self.conv = _ConvModule(d, cfg.conv_kernel, rng, dtype)
        self.norm3 = ComplexBatchNorm(d, channel_axis=-1, dtype=dtype)
        self.ff2 = _FeedForward(d, cfg.d_ff, rng, dtype)
        self.norm4 = ComplexBatchNorm(d, channel_axis=-1, dtype=dtype)

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        x = self.norm1(x + self.ff1(x))
        x = self.norm2(x + self.mhsa(x))
        x = self.norm3(x + self.conv(x))
        return self.norm4(x + self.ff2(x))


class ComplexConformer(Module):
    """Bottleneck conformer applied to every channel of ``[B, C, F, T]``.

    Each channel is a length-T sequence of F-dimensional tokens, lifted to
    ``d_model`` by a complex linear map and projected back afterwards.
    """

    def __init__(self, n_freq: int, cfg: ConformerConfig, rng: np.random.Generator,
                 dtype=np.float32):
        self.n_freq = n_freq
        self.proj_in = ComplexLinear(n_freq, cfg.d_model, rng, dtype=dtype)
        self.layers = [ConformerLayer(cfg, rng, dtype) for _ in range(cfg.n_layers)]
        self.proj_out = ComplexLinear(cfg.d_model, n_freq, rng, dtype=dtype)

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        B, C, F, Tn = x.shape
        if F != self.n_freq:
            raise ValueError(f"conformer built for F={self.n_freq}, got {F}")
        z = x.transpose(0, 1, 3, 2).reshape(B * C, Tn, F)
        z = self.proj_in(z)
        for layer in self.layers:
            z = layer(z)
        z = self.proj_out(z)
        if not (np.all(np.isfinite(z.real.data)) and np.all(np.isfinite(z.imag.data))):
            raise FloatingPointError("non-finite conformer activations")
        return z.reshape(B, C, Tn, F).transpose(0, 1, 3, 2)


class _AxisAttention(Module):
    """One CGAB branch: 1x1 conv to ``c_attn`` channels, then a 1-D conv
    along ``axis`` that collapses the channels into a single map."""

    def __init__(self, channels: int, c_attn: int, kernel: int, rng, dtype):
        self.reduce = ComplexConv2d(channels, c_attn, (1, 1), (1, 1), (0, 0), rng, dtype)
        self.norm1 = ComplexBatchNorm(c_attn, dtype=dtype)
        self.conv = ComplexConv1d(c_attn, 1, kernel, kernel // 2, rng, dtype)
        self.norm2 = ComplexBatchNorm(1, dtype=dtype)

    def forward(self, x: ComplexTensor, along_freq: bool) -> ComplexTensor:
        B, _, F, Tn = x.shape
        y = crelu(self.norm1(self.reduce(x)))
        c = y.shape[1]
        if along_freq:
            # [B, c, F, T] -> [B*T, c, F]: one frequency vector per frame
            seq = y.transpose(0, 3, 1, 2).reshape(B * Tn, c, F)
            a = crelu(self.norm2(self.conv(seq)))
            return a.reshape(B, Tn, F).transpose(0, 2, 1).reshape(B, 1, F, Tn)
        seq = y.transpose(0, 2, 1, 3).reshape(B * F, c, Tn)
        a = crelu(self.norm2(self.conv(seq)))
        return a.reshape(B, 1, F, Tn)


class CGAB(Module):
    """Complex global attention block for a fixed ``[C, F, T]`` geometry.

    Step 1 derives a frequency map and a time map (each ``[B, 1, F, T]``)
    and modulates the input with them by complex multiplication.  Step 2
    applies a complex F x F map along frequency to the first branch and a
    complex T x T map along time to the second.  The input and both branches
    are concatenated and fused back to ``C`` channels by 1x1 conv -> CBN ->
    CReLU.
    """

    def __init__(self, channels: int, cfg: CgabConfig, rng: np.random.Generator,
                 dtype=np.float32):
        if cfg.fixed_F is None or cfg.fixed_T is None:
            raise ValueError("CGAB needs fixed_F and fixed_T")
        if cfg.c_attn > channels:
            raise ValueError(f"c_attn {cfg.c_attn} exceeds input channels {channels}")
        self.channels = channels
        self.fixed_F = cfg.fixed_F
        self.fixed_T = cfg.fixed_T
        self.freq_branch = _AxisAttention(channels, cfg.c_attn, cfg.kernel, rng, dtype)
        self.time_branch = _AxisAttention(channels, cfg.c_attn, cfg.kernel, rng, dtype)
        self.freq_fc = init_complex(rng, (cfg.fixed_F, cfg.fixed_F), cfg.fixed_F, dtype)
        self.time_fc = init_complex(rng, (cfg.fixed_T, cfg.fixed_T), cfg.fixed_T, dtype)
        self.fuse = ComplexConv2d(3 * channels, channels, (1, 1), (1, 1), (0, 0), rng, dtype)
        self.norm = ComplexBatchNorm(channels, dtype=dtype)

    def attention_maps(self, x: ComplexTensor) -> tuple[ComplexTensor, ComplexTensor]:
        return self.freq_branch(x, True), self.time_branch(x, False)

    def combine(self, x: ComplexTensor, freq_map: ComplexTensor,
                time_map: ComplexTensor) -> ComplexTensor:
        xf = c_mul(freq_map, x)
        xt = c_mul(time_map, x)
        yf = c_matmul(xf.transpose(0, 1, 3, 2), self.freq_fc).transpose(0, 1, 3, 2)
        yt = c_matmul(xt, self.time_fc)
        return crelu(self.norm(self.fuse(concat_channels([x, yf, yt]))))

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        B, C, F, Tn = x.shape
        if (C, F, Tn) != (self.channels, self.fixed_F, self.fixed_T):
            raise ValueError(f"CGAB built for {(self.channels, self.fixed_F, self.fixed_T)}, "
                             f"got {(C, F, Tn)}")
        fmap, tmap = self.attention_maps(x)
        return self.combine(x, fmap, tmap)
