"""Real-valued tensors recorded on an explicit reverse-mode tape.

Every differentiable quantity in the package is built from the primitives in
this module.  Complex values are pairs of real tensors (see
:mod:`wali.core.complex`), so gradients are always taken with respect to the
real and imaginary planes as independent real coordinates.

Usage::

    with Tape() as tape:
        y = (x * x).sum()
    tape.backward(y)
    x.grad
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "backward",
    "as_tensor",
    "active_tape",
]


class TapeError(RuntimeError):
    """Misuse of the tape: non-scalar loss, replayed tape, missing tape."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("inputs", "outputs", "backward")

    def __init__(self, inputs, outputs, backward):
        self.inputs = inputs
        self.outputs = outputs
        self.backward = backward


class Tape:
    """Ordered record of operations, confined to the thread that created it.

    Nodes are appended in execution order, which is already a topological
    order.  :meth:`backward` walks them in exact reverse and then marks the
    tape as consumed.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._thread = threading.get_ident()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, inputs, outputs, backward_fn) -> None:
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        if threading.get_ident() != self._thread:
            raise TapeError("a tape is confined to the thread that created it")
        for out in outputs:
            out.requires_grad = True
            out._tape = self
        self.nodes.append(_Node(tuple(inputs), tuple(outputs), backward_fn))

    def backward(self, loss: "Tensor", accumulate: bool = True) -> None:
        """Propagate d(loss) to every leaf tensor with ``requires_grad``.

        Leaf gradients are summed into ``.grad``; pass ``accumulate=False``
        to overwrite instead.
        """
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        produced = set()
        for node in self.nodes:
            for out in node.outputs:
                produced.add(id(out))
        for node in reversed(self.nodes):
            gouts = [grads.pop(id(o), None) for o in node.outputs]
            if all(g is None for g in gouts):
                continue
            gouts = [np.zeros_like(o.data) if g is None else g
                     for g, o in zip(gouts, node.outputs)]
            gins = node.backward(gouts if len(gouts) > 1 else gouts[0])
            if not isinstance(gins, (tuple, list)):
                gins = (gins,)
            for inp, g in zip(node.inputs, gins):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if key not in produced:
                    leaves[key] = inp
        if id(loss) not in produced and loss.requires_grad:
            leaves[id(loss)] = loss
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
            if accumulate and leaf.grad is not None:
                leaf.grad = leaf.grad + g
            else:
                leaf.grad = g
        self.nodes = []


def backward(loss: "Tensor", accumulate: bool = True) -> None:
    """Run reverse-mode differentiation on the tape that produced ``loss``."""
    tape = getattr(loss, "_tape", None)
    if tape is None:
        raise TapeError("loss was not computed on a tape (no parameter reaches it)")
    tape.backward(loss, accumulate=accumulate)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def as_tensor(x, dtype=None) -> "Tensor":
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _lift(x, like: "Tensor") -> "Tensor":
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _op(inputs: Sequence["Tensor"], data, backward_fn: Callable) -> "Tensor":
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(inputs, (out,), backward_fn)
    return out


def _multi_op(inputs, datas, backward_fn) -> tuple:
    outs = tuple(Tensor(d) for d in datas)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(inputs, outs, backward_fn)
    return outs


class Tensor:
    """A real ndarray plus the bookkeeping reverse mode needs."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        other = _lift(other, self)
        a_shape, b_shape = self.shape, other.shape
        return _op((self, other), self.data + other.data,
                   lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)))

    __radd__ = __add__

    def __sub__(self, other):
        other = _lift(other, self)
        a_shape, b_shape = self.shape, other.shape
        return _op((self, other), self.data - other.data,
                   lambda g: (_unbroadcast(g, a_shape), -_unbroadcast(g, b_shape)))

    def __rsub__(self, other):
        return _lift(other, self) - self

    def __neg__(self):
        return _op((self,), -self.data, lambda g: (-g,))

    def __mul__(self, other):
        other = _lift(other, self)
        a, b = self.data, other.data
        return _op((self, other), a * b,
                   lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other, self)
        a, b = self.data, other.data
        out = a / b
        return _op((self, other), out,
                   lambda g: (_unbroadcast(g / b, a.shape),
                              _unbroadcast(-g * out / b, b.shape)))

    def __rtruediv__(self, other):
        return _lift(other, self) / self

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        src_shape, dtype = self.shape, self.dtype

        def bw(g):
            full = np.zeros(src_shape, dtype=dtype)
            if _needs_add_at(index):
                np.add.at(full, index, g)
            else:
                full[index] = g
            return (full,)

        return _op((self,), self.data[index], bw)

    # -- reductions / shape -------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _op((self,), self.data.sum(axis=axis, keepdims=keepdims), bw)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return _op((self,), self.data.reshape(shape), lambda g: (g.reshape(src),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return _op((self,), self.data.transpose(axes), lambda g: (g.transpose(inv),))

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(axes)

    # -- elementwise functions -----------------------------------------
    def relu(self):
        mask = self.data > 0
        return _op((self,), np.where(mask, self.data, 0), lambda g: (g * mask,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return _op((self,), out, lambda g: (g * 0.5 / out,))

    def log(self):
        x = self.data
        return _op((self,), np.log(x), lambda g: (g / x,))

    def exp(self):
        out = np.exp(self.data)
        return _op((self,), out, lambda g: (g * out,))

    def abs(self):
        sign = np.sign(self.data)
        return _op((self,), np.abs(self.data), lambda g: (g * sign,))

    def square(self):
        x = self.data
        return _op((self,), x * x, lambda g: (2.0 * g * x,))

    def softmax(self, axis: int = -1):
        out = self.data - self.data.max(axis=axis, keepdims=True)
        np.exp(out, out=out)
        out /= out.sum(axis=axis, keepdims=True)

        def bw(g):
            gx = g * out
            gx -= out * gx.sum(axis=axis, keepdims=True)
            return (gx,)

        return _op((self,), out, bw)


def _needs_add_at(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


# ---------------------------------------------------------------------------
# free functions
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    if A.shape[-1] != B.shape[-2]:
        raise ValueError(f"inner extents differ: {A.shape} @ {B.shape}")
    if B.ndim == 2 and A.ndim > 2:
        # shared right operand: fold the batch axes into rows so the weight
        # gradient is one GEMM instead of a per-batch outer product
        K, N = B.shape
        A2 = A.reshape(-1, K)

        def bw2(g):
            g2 = g.reshape(-1, N)
            return (g2 @ B.T).reshape(A.shape), A2.T @ g2

        return _op((a, b), (A2 @ B).reshape(A.shape[:-1] + (N,)), bw2)

    def bw(g):
        ga = g @ np.swapaxes(B, -1, -2)
        gb = np.swapaxes(A, -1, -2) @ g
        return _unbroadcast(ga, A.shape), _unbroadcast(gb, B.shape)

    return _op((a, b), A @ B, bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _op(tuple(xs), np.concatenate([x.data for x in xs], axis=axis), bw)


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _op((a, b), np.where(mask, a.data, b.data),
               lambda g: (_unbroadcast(np.where(mask, g, 0), a.shape),
                          _unbroadcast(np.where(mask, 0, g), b.shape)))


def pad(x: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` follows :func:`numpy.pad`."""
    widths = [tuple(w) for w in widths]
    slices = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))
    return _op((x,), np.pad(x.data, widths), lambda g: (g[slices],))


def take_last(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather along the last axis: ``out[..., *i] = x[..., index[*i]]``.

    The adjoint is a scatter-add, so framing, reflection padding and any
    other fixed re-indexing of a signal share this one primitive.
    """
    index = np.asarray(index)
    n = x.shape[-1]
    lead = x.shape[:-1]

    def bw(g):
        g2 = g.reshape(-1, index.size)
        rows = g2.shape[0]
        flat = (np.arange(rows)[:, None] * n + index.reshape(1, -1)).ravel()
        out = np.bincount(flat, weights=g2.ravel(), minlength=rows * n)
        return (out.reshape(lead + (n,)).astype(x.dtype, copy=False),)

    return _op((x,), x.data[..., index], bw)


def overlap_add(frames: Tensor, hop: int, length: int) -> Tensor:
    """Sum frames ``[..., T, W]`` into a signal ``[..., length]`` at ``hop``."""
    n_frames, width = frames.shape[-2:]
    index = (np.arange(n_frames)[:, None] * hop + np.arange(width)[None, :])
    if index.max() >= length:
        raise ValueError("frames extend past the requested signal length")
    lead = frames.shape[:-2]

    def scatter(fr):
        f2 = fr.reshape(-1, index.size)
        rows = f2.shape[0]
        flat = (np.arange(rows)[:, None] * length + index.reshape(1, -1)).ravel()
        out = np.bincount(flat, weights=f2.ravel(), minlength=rows * length)
        return out.reshape(lead + (length,)).astype(fr.dtype, copy=False)

    return _op((frames,), scatter(frames.data), lambda g: (g[..., index],))


def rfft(x: Tensor, n: int | None = None) -> tuple[Tensor, Tensor]:
    """Real FFT along the last axis, returned as (real, imag) planes."""
    n = x.shape[-1] if n is None else n
    if n != x.shape[-1]:
        raise ValueError("rfft expects the last extent to equal n")
    spec = np.fft.rfft(x.data, n=n, axis=-1)
    dtype = x.dtype
    k = spec.shape[-1]

    def bw(gs):
        gr, gi = gs
        # adjoint: Re(sum_k G_k e^{+j 2 pi k m / n}) == n * irfft(G') with
        # interior bins halved (irfft doubles them).
        z = (gr + 1j * gi).astype(np.complex128)
        z[..., 1:k - 1 if n % 2 == 0 else k] *= 0.5
        return (np.fft.irfft(z, n=n, axis=-1).astype(dtype, copy=False) * n,)

    return _multi_op((x,), (spec.real.astype(dtype), spec.imag.astype(dtype)), bw)


def irfft(re: Tensor, im: Tensor, n: int) -> Tensor:
    """Inverse real FFT of the (re, im) planes along the last axis."""
    dtype = re.dtype
    z = re.data.astype(np.float64) + 1j * im.data
    out = np.fft.irfft(z, n=n, axis=-1).astype(dtype, copy=False)
    k = re.shape[-1]
    scale = np.full(k, 2.0 / n)
    scale[0] = 1.0 / n
    if n % 2 == 0:
        scale[-1] = 1.0 / n

    def bw(g):
        G = np.fft.rfft(g, n=n, axis=-1)
        gr = (G.real * scale).astype(dtype, copy=False)
        gi = (G.imag * scale).astype(dtype, copy=False)
        gi[..., 0] = 0
        if n % 2 == 0:
            gi[..., -1] = 0
        return gr, gi

    return _op((re, im), out, bw)


# ---------------------------------------------------------------------------
# convolution kernels (plain numpy, shared by forward and adjoint)
# ---------------------------------------------------------------------------

def _gather_conv(xp: np.ndarray, w: np.ndarray, stride: tuple[int, int]) -> np.ndarray:
    """Valid correlation of padded input [B,Ci,H,W] with w [Co,Ci,kh,kw]."""
    kh, kw = w.shape[2:]
    sh, sw = stride
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # B,Ho,Wo,Co
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _scatter_conv(g: np.ndarray, w: np.ndarray, stride: tuple[int, int],
                  out_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of :func:`_gather_conv` with respect to its input."""
    kh, kw = w.shape[2:]
    sh, sw = stride
    B, _, Ho, Wo = g.shape
    cols = np.tensordot(g, w, axes=([1], [0]))  # B,Ho,Wo,Ci,kh,kw
    cols = cols.transpose(0, 3, 4, 5, 1, 2)  # B,Ci,kh,kw,Ho,Wo
    H = max(out_hw[0], (Ho - 1) * sh + kh)
    W = max(out_hw[1], (Wo - 1) * sw + kw)
    out = np.zeros((B, w.shape[1], H, W), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw] += cols[:, :, i, j]
    return out[:, :, :out_hw[0], :out_hw[1]]


def _weight_grad(xp: np.ndarray, g: np.ndarray, ksize: tuple[int, int],
                 stride: tuple[int, int]) -> np.ndarray:
    sh, sw = stride
    win = sliding_window_view(xp, ksize, axis=(2, 3))[:, :, ::sh, ::sw]
    win = win[:, :, :g.shape[2], :g.shape[3]]
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # Co,Ci,kh,kw


def conv2d(x: Tensor, w: Tensor, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """Real 2-D cross-correlation, input [B,Ci,H,W], weight [Co,Ci,kh,kw]."""
    B, Ci, H, W = x.shape
    Co, Ci_w, kh, kw = w.shape
    if Ci != Ci_w:
        raise ValueError(f"input has {Ci} channels, weight expects {Ci_w}")
    ph, pw = padding
    sh, sw = stride
    if H + 2 * ph < kh or W + 2 * pw < kw:
        raise ValueError("kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    out = _gather_conv(xp, w.data, stride)
    if out.size == 0:
        raise ValueError("convolution produces an empty output")
    wdata = w.data

    def bw(g):
        gxp = _scatter_conv(g, wdata, stride, xp.shape[2:])
        gx = gxp[:, :, ph:ph + H, pw:pw + W]
        gw = _weight_grad(xp, g, (kh, kw), stride)
        return gx, gw

    return _op((x, w), out, bw)


def conv_transpose2d(x: Tensor, w: Tensor, stride=(1, 1), padding=(0, 0),
                     output_padding=(0, 0)) -> Tensor:
    """Adjoint of :func:`conv2d`; weight layout [Ci, Co, kh, kw].

    ``H_out = (H - 1) * s - 2 * p + k + output_padding``.
    """
    B, Ci, H, W = x.shape
    Ci_w, Co, kh, kw = w.shape
    if Ci != Ci_w:
        raise ValueError(f"input has {Ci} channels, weight expects {Ci_w}")
    sh, sw = stride
    ph, pw = padding
    oph, opw = output_padding
    Ho = (H - 1) * sh - 2 * ph + kh + oph
    Wo = (W - 1) * sw - 2 * pw + kw + opw
    if Ho <= 0 or Wo <= 0:
        raise ValueError(f"negative or zero output extent ({Ho}, {Wo})")
    full_h = (H - 1) * sh + kh + oph
    full_w = (W - 1) * sw + kw + opw
    wdata = w.data
    full = _scatter_conv(x.data, wdata, stride, (full_h, full_w))
    out = np.ascontiguousarray(full[:, :, ph:ph + Ho, pw:pw + Wo])

    def bw(g):
        gfull = np.zeros((B, Co, full_h, full_w), dtype=g.dtype)
        gfull[:, :, ph:ph + Ho, pw:pw + Wo] = g
        gx = _gather_conv(gfull, wdata, stride)[:, :, :H, :W]
        # d/dw of sum(g * scatter(x, w)) == correlation of g-windows with x
        gw = _weight_grad(gfull, x.data, (kh, kw), stride)  # Ci,Co,kh,kw
        return gx, gw

    return _op((x, w), out, bw)
