"""Finite-difference gradient checks for every differentiable building block.

Each check builds a small double-precision instance, reduces its output to a
scalar with fixed random weights and compares tape gradients (inputs and
parameters) with central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .attention import CGAB, CgabConfig, ComplexConformer, ComplexMHSA, ConformerConfig, ConformerLayer
from .core import tensor as T
from .core.complex import (
    ComplexConvParams,
    ComplexTensor,
    c_conv1d,
    c_conv2d,
    c_conv_transpose2d,
    c_matmul,
    c_mul,
)
from .core.gradcheck import finite_diff_gradcheck
from .core.tensor import Tensor
from .dsp import StftConfig, istft, stft
from .layers import ComplexBatchNorm, DecoderBlock, EncoderBlock, SkipBlock, crelu
from .loss import MultiResConfig, complex_multires_stft_loss
from .network import NetworkConfig, build

__all__ = ["GradResult", "CHECKS", "run_gradchecks", "TOLERANCE"]

TOLERANCE = 1e-4
F64 = np.float64


@dataclass
class GradResult:
    group: str
    name: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < TOLERANCE)


def _rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)


def _c(rng, *shape) -> ComplexTensor:
    return ComplexTensor(rng.standard_normal(shape), rng.standard_normal(shape))


def _r(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape))


def _reduce(y, rng_seed: int = 99):
    """Scalar ``sum(w_r * re + w_i * im)`` with fixed random weights."""
    rng = _rng(rng_seed)
    if isinstance(y, ComplexTensor):
        wr = rng.standard_normal(y.shape)
        wi = rng.standard_normal(y.shape)
        return (y.real * wr).sum() + (y.imag * wi).sum()
    return (y * rng.standard_normal(y.shape)).sum()


def _check(fn, inputs, module=None, max_coords: int = 48) -> float:
    params = list(module.parameters()) if module is not None else []
    n_in = len(inputs)

    def f(*args):
        return _reduce(fn(*args[:n_in]))

    return finite_diff_gradcheck(f, list(inputs) + params, max_coords=max_coords)


# -- core ---------------------------------------------------------------------

def _core_checks() -> dict[str, Callable[[], float]]:
    rng = _rng(1)
    a, b = _r(rng, 3, 4), _r(rng, 3, 4)
    pos = Tensor(rng.uniform(0.5, 2.0, (3, 4)))
    m1, m2 = _r(rng, 2, 3, 4), _r(rng, 4, 5)
    ca, cb = _c(rng, 2, 3, 4, 4), _c(rng, 2, 1, 4, 4)
    cm1, cm2 = _c(rng, 2, 3, 4), _c(rng, 4, 5)
    x = _c(rng, 2, 3, 6, 5)
    w = ComplexConvParams(_c(rng, 4, 3, 3, 3), _c(rng, 4), (2, 1), (1, 1))
    xt = _c(rng, 2, 4, 3, 5)
    wt = ComplexConvParams(_c(rng, 4, 3, 3, 3), _c(rng, 3), (2, 1), (1, 1), (1, 0))
    x1 = _c(rng, 2, 3, 9)
    w1, b1 = _c(rng, 2, 3, 5), _c(rng, 2)
    idx = rng.integers(0, 7, size=(3, 5))
    frames = _r(rng, 2, 4, 8)
    wave = _r(rng, 2, 96)
    spec_cfg = StftConfig(32, 8)

    def weights(t):
        return (lambda *_: t)

    return {
        "add": lambda: _check(lambda p, q: p + q, [a, b]),
        "sub_broadcast": lambda: _check(lambda p, q: p - q[0:1], [a, b]),
        "mul": lambda: _check(lambda p, q: p * q, [a, b]),
        "div": lambda: _check(lambda p, q: p / q, [a, pos]),
        "matmul": lambda: _check(T.matmul, [m1, m2]),
        "matmul_batched": lambda: _check(lambda p, q: T.matmul(p, q.swapaxes(-1, -2)), [m1, _r(rng, 2, 5, 4)]),
        "sum_mean": lambda: _check(lambda p: p.sum(axis=1) + p.mean(axis=1), [a]),
        "sqrt_log_exp": lambda: _check(lambda p: p.sqrt() + p.log() + (p * 0.3).exp(), [pos]),
        "abs_square": lambda: _check(lambda p: p.abs() + p.square(), [pos]),
        "softmax": lambda: _check(lambda p: p.softmax(axis=-1), [a]),
        "concat_getitem": lambda: _check(lambda p, q: T.concat([p, q[:, 1:3]], axis=1)[1:], [a, b]),
        "reshape_transpose": lambda: _check(lambda p: p.reshape(4, 3).transpose(1, 0), [a]),
        "take_last": lambda: _check(lambda p: T.take_last(p, idx), [_r(rng, 2, 7)]),
        "overlap_add": lambda: _check(lambda p: T.overlap_add(p, 4, 20), [frames]),
        "rfft": lambda: _check(lambda p: T.rfft(p)[0] * 1.3 + T.rfft(p)[1], [_r(rng, 3, 8)]),
        "irfft": lambda: _check(lambda p, q: T.irfft(p, q, 8), [_r(rng, 3, 5), _r(rng, 3, 5)]),
        "c_mul": lambda: _check(c_mul, [ca, cb]),
        "c_matmul": lambda: _check(c_matmul, [cm1, cm2]),
        "c_conv2d": lambda: _check(lambda p, wr, bb: c_conv2d(p, w), [x, w.weight, w.bias]),
        "c_conv_transpose2d": lambda: _check(lambda p, wr, bb: c_conv_transpose2d(p, wt),
                                             [xt, wt.weight, wt.bias]),
        "c_conv1d": lambda: _check(lambda p, ww, bb: c_conv1d(p, ww, bb, padding=2), [x1, w1, b1]),
        "stft": lambda: _check(lambda p: stft(p, spec_cfg).data, [wave]),
        "istft": lambda: _check(lambda s: istft(s, 96, spec_cfg), [_c(rng, 2, 17, 13)]),
    }


# -- layers -------------------------------------------------------------------

def _layer_checks() -> dict[str, Callable[[], float]]:
    rng = _rng(2)
    x = _c(rng, 2, 3, 8, 5)
    bn = ComplexBatchNorm(3, dtype=F64)
    bn_aff = ComplexBatchNorm(3, affine=True, dtype=F64)
    for p in bn_aff.parameters():
        p.real.data += 0.1 * rng.standard_normal(p.shape)
        p.imag.data += 0.1 * rng.standard_normal(p.shape)
    enc = EncoderBlock(3, 4, rng, dtype=F64)
    dec = DecoderBlock(4, 2, 3, rng, dtype=F64)
    skip = SkipBlock(3, rng, dtype=F64)
    h = _c(rng, 2, 4, 4, 5)
    s = _c(rng, 2, 2, 4, 5)
    return {
        "crelu": lambda: _check(crelu, [x]),
        "cbn_train": lambda: _check(bn, [x]),
        "cbn_affine": lambda: _check(bn_aff, [x], bn_aff),
        "encoder_block": lambda: _check(enc, [x], enc),
        "decoder_block": lambda: _check(dec, [h, s], dec),
        "skip_block": lambda: _check(skip, [x], skip),
    }


# -- attention ----------------------------------------------------------------

def _attention_checks() -> dict[str, Callable[[], float]]:
    rng = _rng(3)
    cfg = ConformerConfig(d_model=4, n_heads=2, d_ff=8, conv_kernel=3, n_layers=1)
    mhsa = ComplexMHSA(4, 2, rng, F64)
    layer = ConformerLayer(cfg, rng, F64)
    conformer = ComplexConformer(2, cfg, rng, F64)
    cgab = CGAB(3, CgabConfig(c_attn=2, fixed_F=4, fixed_T=5, kernel=3), rng, F64)
    seq = _c(rng, 2, 5, 4)
    return {
        "mhsa": lambda: _check(mhsa, [seq], mhsa),
        "conformer_layer": lambda: _check(layer, [seq], layer),
        "conformer": lambda: _check(conformer, [_c(rng, 2, 2, 2, 5)], conformer),
        "cgab": lambda: _check(cgab, [_c(rng, 2, 3, 4, 5)], cgab),
    }


# -- network and loss ---------------------------------------------------------

def _loss_checks() -> dict[str, Callable[[], float]]:
    rng = _rng(4)
    n = 1600  # 0.2 s at 8 kHz
    ref = rng.standard_normal(n) * 0.1
    est = Tensor(ref + 0.05 * rng.standard_normal(n))
    cfg = NetworkConfig(depth=2, channels=(3, 4), stft=StftConfig(32, 16),
                        conformer=ConformerConfig(d_model=4, n_heads=1, d_ff=8, conv_kernel=3,
                                                  n_layers=1),
                        cgab=CgabConfig(c_attn=2, kernel=3), cgab_placement=(1,),
                        clip_seconds=0.01, dtype="float64")
    net = build(cfg, seed=5)
    S = net.analyze(rng.standard_normal((2, cfg.n_samples)))
    return {
        "network_depth2": lambda: _check(net, [S], net, max_coords=64),
        # the log-magnitude term has large third derivatives at small bins,
        # so a shorter step keeps the central-difference truncation error low
        "multires_loss": lambda: finite_diff_gradcheck(
            lambda e: complex_multires_stft_loss(ref, e, MultiResConfig()), est, eps=1e-7,
            max_coords=64),
    }


CHECKS: dict[str, Callable[[], dict[str, Callable[[], float]]]] = {
    "core": _core_checks,
    "layers": _layer_checks,
    "attention": _attention_checks,
    "loss": _loss_checks,
}


def run_gradchecks(module: str = "all") -> list[GradResult]:
    """Run the checks of one group (``core``, ``layers``, ``attention``,
    ``loss``) or ``all`` of them."""
    groups = list(CHECKS) if module == "all" else [module]
    for g in groups:
        if g not in CHECKS:
            raise ValueError(f"unknown gradcheck group {g!r}; choose from all, {', '.join(CHECKS)}")
    results = []
    for g in groups:
        for name, check in CHECKS[g]().items():
            t0 = time.perf_counter()
            err = check()
            results.append(GradResult(g, name, err, time.perf_counter() - t0))
    return results
