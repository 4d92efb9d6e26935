"""Complex layers: activation, batch normalization, linear/conv wrappers and
the encoder, decoder and skip blocks of the U-Net."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .core import tensor as T
from .core.complex import (
    ComplexConvParams,
    ComplexTensor,
    c_conv1d,
    c_conv2d,
    c_conv_transpose2d,
    c_matmul,
    concat_channels,
)

__all__ = [
    "Module",
    "crelu",
    "init_complex",
    "ComplexBatchNorm",
    "cbn_forward",
    "CbnState",
    "ComplexLinear",
    "complex_linear",
    "ComplexConv2d",
    "ComplexConvTranspose2d",
    "ComplexConv1d",
    "EncoderBlock",
    "DecoderBlock",
    "SkipBlock",
]


class Module:
    """Minimal parameter container.

    Parameters are :class:`ComplexTensor` attributes with ``requires_grad``;
    submodules may be attributes or lists of modules.  Attribute insertion
    order fixes parameter order, so construction with a seeded generator is
    reproducible.
    """

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, ComplexTensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, ComplexTensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[ComplexTensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffer_names", ()):
            yield f"{prefix}{name}", getattr(self, name)
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        """Real scalar count (real and imaginary planes counted separately)."""
        return sum(2 * p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def init_complex(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> ComplexTensor:
    """Plane-wise uniform fan-in initialization, bound ``1 / sqrt(fan_in)``."""
    bound = 1.0 / np.sqrt(fan_in)
    re = rng.uniform(-bound, bound, size=shape).astype(dtype)
    im = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ComplexTensor(re, im, requires_grad=True)


def _zeros_param(shape, dtype) -> ComplexTensor:
    return ComplexTensor(np.zeros(shape, dtype), np.zeros(shape, dtype), requires_grad=True)


def crelu(x: ComplexTensor) -> ComplexTensor:
    """Split complex ReLU: ``max(0, re) + j max(0, im)``."""
    return ComplexTensor(x.real.relu(), x.imag.relu())


class CbnState:
    """Running statistics of a complex batch norm.

    ``running_cov[:, 0]`` is Var(re), ``[:, 1]`` Var(im), ``[:, 2]`` Cov(re, im).
    """

    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.running_mean = np.zeros((2, num_features), dtype)
        self.running_cov = np.tile(np.array([1.0, 1.0, 0.0], dtype), (num_features, 1))
        self.momentum = momentum
        self.eps = eps


def _inv_sqrt_2x2(vrr, vii, vri):
    """Closed-form inverse square root of ``[[vrr, vri], [vri, vii]]``."""
    s = (vrr * vii - vri * vri).sqrt()
    t = (vrr + vii + 2.0 * s).sqrt()
    inv = 1.0 / (s * t)
    return (vii + s) * inv, (vrr + s) * inv, -vri * inv


def cbn_forward(x: ComplexTensor, state: CbnState, training: bool = True,
                channel_axis: int = 1) -> ComplexTensor:
    """Whiten the (re, im) pair per channel with its 2x2 covariance.

    Train mode normalizes with batch statistics (gradients flow through them)
    and updates ``state``; eval mode uses the running statistics.
    """
    axis = channel_axis % x.ndim
    C = x.shape[axis]
    red = tuple(i for i in range(x.ndim) if i != axis)
    bshape = [1] * x.ndim
    bshape[axis] = C
    dtype = x.dtype
    eps = state.eps
    if training:
        count = x.size // C
        if count < 2:
            raise ValueError(f"batch statistics need >= 2 samples per channel, got {count}")
        mr = x.real.mean(axis=red, keepdims=True)
        mi = x.imag.mean(axis=red, keepdims=True)
        cr = x.real - mr
        ci = x.imag - mi
        vrr_b = (cr * cr).mean(axis=red, keepdims=True)
        vii_b = (ci * ci).mean(axis=red, keepdims=True)
        vri = (cr * ci).mean(axis=red, keepdims=True)
        stats = np.stack([vrr_b.data.reshape(C), vii_b.data.reshape(C), vri.data.reshape(C)], 1)
        if not (np.all(np.isfinite(stats)) and np.all(np.isfinite(mr.data))):
            raise FloatingPointError("non-finite batch statistics in complex batch norm")
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean
                              + m * np.stack([mr.data.reshape(C), mi.data.reshape(C)])).astype(dtype)
        state.running_cov = ((1 - m) * state.running_cov + m * stats).astype(dtype)
        vrr = vrr_b + eps
        vii = vii_b + eps
    else:
        cr = x.real - state.running_mean[0].reshape(bshape).astype(dtype)
        ci = x.imag - state.running_mean[1].reshape(bshape).astype(dtype)
        cov = state.running_cov.astype(dtype)
        vrr = T.Tensor(cov[:, 0].reshape(bshape) + eps)
        vii = T.Tensor(cov[:, 1].reshape(bshape) + eps)
        vri = T.Tensor(cov[:, 2].reshape(bshape))
    wrr, wii, wri = _inv_sqrt_2x2(vrr, vii, vri)
    return ComplexTensor(wrr * cr + wri * ci, wri * cr + wii * ci)


class ComplexBatchNorm(Module):
    """Module wrapper around :func:`cbn_forward` with an optional affine term."""

    _buffer_names = ("running_mean", "running_cov")

    def __init__(self, num_features: int, channel_axis: int = 1, momentum: float = 0.1,
                 eps: float = 1e-5, affine: bool = False, dtype=np.float32):
        self.num_features = num_features
        self.channel_axis = channel_axis
        self._state = CbnState(num_features, momentum, eps, dtype)
        self.affine = affine
        if affine:
            ones = np.full((num_features,), 1 / np.sqrt(2), dtype)
            zeros = np.zeros((num_features,), dtype)
            # gamma packs the diagonal (g_rr + j g_ii); gamma_ri.real is the
            # off-diagonal term, its imaginary plane is unused.
            self.gamma = ComplexTensor(ones, ones.copy(), requires_grad=True)
            self.gamma_ri = ComplexTensor(zeros, zeros.copy(), requires_grad=True)
            self.beta = _zeros_param((num_features,), dtype)

    @property
    def running_mean(self) -> np.ndarray:
        return self._state.running_mean

    @running_mean.setter
    def running_mean(self, value):
        self._state.running_mean = np.asarray(value)

    @property
    def running_cov(self) -> np.ndarray:
        return self._state.running_cov

    @running_cov.setter
    def running_cov(self, value):
        self._state.running_cov = np.asarray(value)

    @property
    def state(self) -> CbnState:
        return self._state

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        y = cbn_forward(x, self._state, self.training, self.channel_axis)
        if not self.affine:
            return y
        axis = self.channel_axis % x.ndim
        shape = [1] * x.ndim
        shape[axis] = self.num_features
        grr = self.gamma.real.reshape(shape)
        gii = self.gamma.imag.reshape(shape)
        gri = self.gamma_ri.real.reshape(shape)
        re = grr * y.real + gri * y.imag + self.beta.real.reshape(shape)
        im = gri * y.real + gii * y.imag + self.beta.imag.reshape(shape)
        return ComplexTensor(re, im)


class ComplexLinear(Module):
    """``x @ W + b`` over the trailing axis with ``W`` of shape ``[d_in, d_out]``."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 dtype=np.float32):
        self.weight = init_complex(rng, (d_in, d_out), d_in, dtype)
        self.bias = _zeros_param((d_out,), dtype) if bias else None

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        return complex_linear(x, self.weight, self.bias)


def complex_linear(x: ComplexTensor, weight: ComplexTensor,
                   bias: ComplexTensor | None = None) -> ComplexTensor:
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"trailing extent {x.shape[-1]} != weight input {weight.shape[0]}")
    y = c_matmul(x, weight)
    if bias is None:
        return y
    return ComplexTensor(y.real + bias.real, y.imag + bias.imag)


class ComplexConv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel=(3, 3), stride=(1, 1), padding=(1, 1),
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = np.random.default_rng() if rng is None else rng
        kernel = tuple(kernel)
        self.weight = init_complex(rng, (c_out, c_in) + kernel, c_in * kernel[0] * kernel[1], dtype)
        self.bias = _zeros_param((c_out,), dtype)
        self._stride = tuple(stride)
        self._padding = tuple(padding)

    @property
    def params(self) -> ComplexConvParams:
        return ComplexConvParams(self.weight, self.bias, self._stride, self._padding)

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        return c_conv2d(x, self.params)


class ComplexConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel=(3, 3), stride=(2, 1), padding=(1, 1),
                 output_padding=(1, 0), rng: np.random.Generator | None = None, dtype=np.float32):
        rng = np.random.default_rng() if rng is None else rng
        kernel = tuple(kernel)
        self.weight = init_complex(rng, (c_in, c_out) + kernel, c_in * kernel[0] * kernel[1], dtype)
        self.bias = _zeros_param((c_out,), dtype)
        self._stride = tuple(stride)
        self._padding = tuple(padding)
        self._output_padding = tuple(output_padding)

    @property
    def params(self) -> ComplexConvParams:
        return ComplexConvParams(self.weight, self.bias, self._stride, self._padding,
                                 self._output_padding)

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        return c_conv_transpose2d(x, self.params)


class ComplexConv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, padding: int = 0,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = np.random.default_rng() if rng is None else rng
        self.weight = init_complex(rng, (c_out, c_in, kernel), c_in * kernel, dtype)
        self.bias = _zeros_param((c_out,), dtype)
        self._padding = padding

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        return c_conv1d(x, self.weight, self.bias, padding=self._padding)


class EncoderBlock(Module):
    """Strided complex conv (halves F) -> CBN -> CReLU."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, kernel=(3, 3),
                 dtype=np.float32):
        pad = (kernel[0] // 2, kernel[1] // 2)
        self.conv = ComplexConv2d(c_in, c_out, kernel, (2, 1), pad, rng, dtype)
        self.norm = ComplexBatchNorm(c_out, dtype=dtype)

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        if x.shape[-2] % 2:
            raise ValueError(f"encoder needs an even frequency extent, got {x.shape[-2]}")
        return crelu(self.norm(self.conv(x)))


class DecoderBlock(Module):
    """Concatenate the skip tensor, transposed conv (doubles F) -> CBN -> CReLU."""

    def __init__(self, c_in: int, c_skip: int, c_out: int, rng: np.random.Generator,
                 kernel=(3, 3), dtype=np.float32):
        pad = (kernel[0] // 2, kernel[1] // 2)
        # output padding makes the frequency extent exactly 2F for odd kernels
        out_pad = (2 - kernel[0] + 2 * pad[0], 0)
        self.conv = ComplexConvTranspose2d(c_in + c_skip, c_out, kernel, (2, 1), pad, out_pad,
                                           rng, dtype)
        self.norm = ComplexBatchNorm(c_out, dtype=dtype)

    def forward(self, x: ComplexTensor, skip: ComplexTensor) -> ComplexTensor:
        if skip.shape[0] != x.shape[0] or skip.shape[2:] != x.shape[2:]:
            raise ValueError(f"skip {skip.shape} does not match decoder input {x.shape}")
        return crelu(self.norm(self.conv(concat_channels([x, skip]))))


class SkipBlock(Module):
    """Shape-preserving 3x3 complex conv -> CBN -> CReLU."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        self.conv = ComplexConv2d(channels, channels, (3, 3), (1, 1), (1, 1), rng, dtype)
        self.norm = ComplexBatchNorm(channels, dtype=dtype)

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        return crelu(self.norm(self.conv(x)))
