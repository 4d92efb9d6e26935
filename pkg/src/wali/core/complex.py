"""Complex tensors as pairs of real planes, and the complex primitives.

Complex products everywhere use the textbook rule
``(a + jb)(c + jd) = (ac - bd) + j(ad + bc)``; in particular the imaginary
part of a complex convolution is ``W_r * x_i + W_i * x_r``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "ComplexTensor",
    "ComplexConvParams",
    "c_add",
    "c_sub",
    "c_mul",
    "c_scale",
    "c_matmul",
    "c_conv2d",
    "c_conv_transpose2d",
    "c_conv1d",
    "reshape_permute",
    "permute",
    "concat_channels",
    "split_channels",
    "abs2",
]


class ComplexTensor:
    """An N-d complex value held as two real :class:`Tensor` planes."""

    __slots__ = ("real", "imag")

    def __init__(self, real, imag=None, requires_grad: bool = False):
        real = real if isinstance(real, Tensor) else Tensor(np.asarray(real))
        if imag is None:
            imag = Tensor(np.zeros_like(real.data))
        elif not isinstance(imag, Tensor):
            imag = Tensor(np.asarray(imag, dtype=real.dtype))
        if real.shape != imag.shape:
            raise ValueError(f"real {real.shape} and imag {imag.shape} planes differ")
        if requires_grad:
            real.requires_grad = imag.requires_grad = True
        self.real = real
        self.imag = imag

    @classmethod
    def from_numpy(cls, z: np.ndarray, dtype=np.float64, requires_grad: bool = False):
        z = np.asarray(z)
        return cls(np.ascontiguousarray(z.real, dtype=dtype),
                   np.ascontiguousarray(np.imag(z), dtype=dtype), requires_grad=requires_grad)

    @classmethod
    def zeros(cls, shape, dtype=np.float64):
        return cls(np.zeros(shape, dtype), np.zeros(shape, dtype))

    # -- properties ------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.real.shape

    @property
    def ndim(self) -> int:
        return self.real.ndim

    @property
    def dtype(self):
        return self.real.dtype

    @property
    def size(self) -> int:
        return self.real.size

    @property
    def requires_grad(self) -> bool:
        return self.real.requires_grad or self.imag.requires_grad

    @property
    def grad(self) -> tuple[np.ndarray, np.ndarray] | None:
        if self.real.grad is None and self.imag.grad is None:
            return None
        gr = self.real.grad if self.real.grad is not None else np.zeros(self.shape, self.dtype)
        gi = self.imag.grad if self.imag.grad is not None else np.zeros(self.shape, self.dtype)
        return gr, gi

    def zero_grad(self) -> None:
        self.real.grad = None
        self.imag.grad = None

    def numpy(self) -> np.ndarray:
        return self.real.data + 1j * self.imag.data

    def detach(self) -> "ComplexTensor":
        return ComplexTensor(self.real.detach(), self.imag.detach())

    def conj(self) -> "ComplexTensor":
        return ComplexTensor(self.real, -self.imag)

    def __repr__(self) -> str:
        return f"ComplexTensor(shape={self.shape}, dtype={self.dtype})"

    # -- sugar -------------------------------------------------------------
    def __add__(self, other):
        return c_add(self, other)

    def __sub__(self, other):
        return c_sub(self, other)

    def __mul__(self, other):
        if isinstance(other, ComplexTensor):
            return c_mul(self, other)
        return c_scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return ComplexTensor(-self.real, -self.imag)

    def __getitem__(self, index):
        return ComplexTensor(self.real[index], self.imag[index])

    def reshape(self, *shape):
        return ComplexTensor(self.real.reshape(*shape), self.imag.reshape(*shape))

    def transpose(self, *axes):
        return ComplexTensor(self.real.transpose(*axes), self.imag.transpose(*axes))


def _check_broadcast(a: ComplexTensor, b: ComplexTensor, op: str, channel_axis: int | None) -> None:
    if a.shape == b.shape:
        return
    if channel_axis is None or a.ndim != b.ndim:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    for i, (m, n) in enumerate(zip(a.shape, b.shape)):
        if m != n and not (i == channel_axis and 1 in (m, n)):
            raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def c_add(a: ComplexTensor, b: ComplexTensor) -> ComplexTensor:
    """Elementwise sum; ``b`` may be a per-channel bias ``[C]`` for ``a`` of ``[B, C, ...]``
    or ``[C, ...]``."""
    if b.shape != a.shape:
        if b.ndim == 1 and a.ndim >= 2:
            axis = 1 if a.ndim == 4 else 0
            if a.shape[axis] != b.shape[0]:
                raise ValueError(f"c_add: bias of {b.shape[0]} channels for shape {a.shape}")
            shape = [1] * a.ndim
            shape[axis] = b.shape[0]
            b = b.reshape(shape)
        else:
            raise ValueError(f"c_add: shape mismatch {a.shape} vs {b.shape}")
    return ComplexTensor(a.real + b.real, a.imag + b.imag)


def c_sub(a: ComplexTensor, b: ComplexTensor) -> ComplexTensor:
    if a.shape != b.shape:
        raise ValueError(f"c_sub: shape mismatch {a.shape} vs {b.shape}")
    return ComplexTensor(a.real - b.real, a.imag - b.imag)


def c_mul(a: ComplexTensor, b: ComplexTensor, channel_axis: int | None = 1) -> ComplexTensor:
    """Full complex product per element.

    One operand may carry a singleton extent on ``channel_axis`` which is
    then broadcast over channels.
    """
    _check_broadcast(a, b, "c_mul", channel_axis)
    re = a.real * b.real - a.imag * b.imag
    im = a.real * b.imag + a.imag * b.real
    return ComplexTensor(re, im)


def c_scale(a: ComplexTensor, s) -> ComplexTensor:
    """Multiply both planes by a real scalar or real tensor."""
    return ComplexTensor(a.real * s, a.imag * s)


def abs2(a: ComplexTensor) -> Tensor:
    return a.real * a.real + a.imag * a.imag


def c_matmul(a: ComplexTensor, b: ComplexTensor) -> ComplexTensor:
    """Complex matrix product over the last two axes (leading axes broadcast).

    Evaluated as a single real product of the stacked planes
    ``[a_r, a_i] @ [[b_r, b_i], [-b_i, b_r]]``.
    """
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"c_matmul: inner extents differ {a.shape} @ {b.shape}")
    n = b.shape[-1]
    lhs = T.concat([a.real, a.imag], axis=-1)
    top = T.concat([b.real, b.imag], axis=-1)
    bottom = T.concat([-b.imag, b.real], axis=-1)
    out = T.matmul(lhs, T.concat([top, bottom], axis=-2))
    return ComplexTensor(out[..., :n], out[..., n:])


@dataclass
class ComplexConvParams:
    """Weight ``[C_out, C_in, k_f, k_t]`` (for transposed convs ``[C_in, C_out, k_f, k_t]``),
    bias ``[C_out]``, stride and zero padding."""

    weight: ComplexTensor
    bias: ComplexTensor | None = None
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    output_padding: tuple[int, int] = field(default=(0, 0))

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ValueError("complex conv weight must be 4-D")
        if min(self.weight.shape[2:]) < 1:
            raise ValueError("kernel extents must be >= 1")
        if min(self.stride) < 1:
            raise ValueError("strides must be >= 1")

    def parameters(self) -> list[ComplexTensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


def _batched(x: ComplexTensor) -> tuple[ComplexTensor, bool]:
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected [B,C,F,T] or [C,F,T], got {x.shape}")
    return x, False


def _add_bias(re: Tensor, im: Tensor, bias: ComplexTensor | None):
    if bias is None:
        return re, im
    shape = (1, bias.shape[0], 1, 1)
    return re + bias.real.reshape(shape), im + bias.imag.reshape(shape)


def c_conv2d(x: ComplexTensor, p: ComplexConvParams) -> ComplexTensor:
    """Complex 2-D convolution of ``[B, C_in, F, T]`` (or unbatched ``[C_in, F, T]``)."""
    xb, squeeze = _batched(x)
    w = p.weight
    co = w.shape[0]
    xs = T.concat([xb.real, xb.imag], axis=1)
    ws = T.concat([T.concat([w.real, -w.imag], axis=1),
                   T.concat([w.imag, w.real], axis=1)], axis=0)
    out = T.conv2d(xs, ws, p.stride, p.padding)
    re, im = _add_bias(out[:, :co], out[:, co:], p.bias)
    y = ComplexTensor(re, im)
    return y.reshape(y.shape[1:]) if squeeze else y


def c_conv_transpose2d(x: ComplexTensor, p: ComplexConvParams) -> ComplexTensor:
    """Complex transposed convolution; weight ``[C_in, C_out, k_f, k_t]``."""
    xb, squeeze = _batched(x)
    w = p.weight
    co = w.shape[1]
    xs = T.concat([xb.real, xb.imag], axis=1)
    ws = T.concat([T.concat([w.real, w.imag], axis=1),
                   T.concat([-w.imag, w.real], axis=1)], axis=0)
    out = T.conv_transpose2d(xs, ws, p.stride, p.padding, p.output_padding)
    re, im = _add_bias(out[:, :co], out[:, co:], p.bias)
    y = ComplexTensor(re, im)
    return y.reshape(y.shape[1:]) if squeeze else y


def c_conv1d(x: ComplexTensor, weight: ComplexTensor, bias: ComplexTensor | None = None,
             stride: int = 1, padding: int = 0) -> ComplexTensor:
    """Complex 1-D convolution of ``[B, C_in, L]`` (or ``[C_in, L]``); weight ``[C_out, C_in, k]``."""
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape((1,) + x.shape)
    B, C, L = x.shape
    w4 = weight.reshape(weight.shape + (1,))
    p = ComplexConvParams(w4, bias, (stride, 1), (padding, 0))
    y = c_conv2d(x.reshape(B, C, L, 1), p)
    y = y.reshape(y.shape[:3])
    return y.reshape(y.shape[1:]) if squeeze else y


def permute(x: ComplexTensor, axes: Sequence[int]) -> ComplexTensor:
    return x.transpose(tuple(axes))


def reshape_permute(x: ComplexTensor, shape: Sequence[int] | None = None,
                    axes: Sequence[int] | None = None) -> ComplexTensor:
    """Optionally permute, then optionally reshape; both planes move together."""
    if axes is not None:
        x = x.transpose(tuple(axes))
    if shape is not None:
        shape = tuple(shape)
        known = int(np.prod([s for s in shape if s != -1]))
        if -1 not in shape and known != x.size:
            raise ValueError(f"cannot reshape {x.shape} ({x.size} elements) to {shape}")
        x = x.reshape(shape)
    return x


def concat_channels(xs: Sequence[ComplexTensor], axis: int = 1) -> ComplexTensor:
    """Concatenate along the channel axis (1 for batched tensors)."""
    xs = list(xs)
    if len(xs) == 1:
        return xs[0]
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != axis):
            raise ValueError(f"concat_channels: extents differ {x.shape} vs {ref}")
    return ComplexTensor(T.concat([x.real for x in xs], axis=axis),
                         T.concat([x.imag for x in xs], axis=axis))


def split_channels(x: ComplexTensor, sizes: Sequence[int], axis: int = 1) -> list[ComplexTensor]:
    out, start = [], 0
    for n in sizes:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, start + n)
        out.append(x[tuple(idx)])
        start += n
    return out
