"""Central finite-difference gradient checking against the tape."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .complex import ComplexTensor
from .tensor import Tape, Tensor

__all__ = ["finite_diff_gradcheck", "GradcheckError"]


class GradcheckError(ValueError):
    pass


def _planes(inputs) -> list[Tensor]:
    planes = []
    for x in inputs:
        if isinstance(x, ComplexTensor):
            planes.extend([x.real, x.imag])
        else:
            planes.append(x)
    return planes


def _scalar(out) -> Tensor:
    if isinstance(out, ComplexTensor):
        raise GradcheckError("function must return a real scalar, got a complex tensor")
    if out.size != 1:
        raise GradcheckError(f"function must return a scalar, got shape {out.shape}")
    return out


def finite_diff_gradcheck(
    f: Callable[..., Tensor],
    x: ComplexTensor | Tensor | Sequence[ComplexTensor | Tensor],
    eps: float = 1e-6,
    kink_tol: float | None = None,
    max_coords: int | None = None,
    seed: int = 0,
    stats: dict | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps the input(s) to a real scalar :class:`Tensor`.  Each real and
    imaginary coordinate is perturbed by ``+-eps``; the relative error of a
    coordinate is ``|a - n| / max(|a|, |n|, floor)`` where ``floor`` is
    ``1e-3`` times the largest analytic gradient entry (at least ``1e-8``).
    The floor keeps structurally zero gradients, such as a bias feeding a
    batch norm, from turning finite-difference roundoff into large ratios.

    Coordinates whose perturbation moves a piecewise-linear activation across
    its kink are excluded.  Differences are taken with steps ``eps`` and
    ``eps / 2``.  On smooth ground the two central estimates agree to
    ``O(eps**2)`` and the gap between forward and backward slopes halves
    with the step.  A kink inside the wider step splits the central
    estimates, and a kink at the point itself leaves the slope gap as large
    at the half step.  Either signal above ``kink_tol`` (default ``0.1``)
    relative to the floor-guarded scale skips the coordinate.

    ``max_coords`` limits the check to a random subset of coordinates for
    large inputs.  When ``stats`` is a dict it receives the number of
    ``checked`` and ``skipped`` coordinates.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    inputs = list(x) if isinstance(x, (list, tuple)) else [x]
    planes = _planes(inputs)
    for p in planes:
        # perturbations are written through a flat view, which needs a
        # contiguous buffer of its own
        p.data = np.array(p.data, copy=True, order="C")
        p.requires_grad = True
        p.grad = None

    with Tape() as tape:
        out = _scalar(f(*inputs))
    f0 = out.item()
    if not np.isfinite(f0):
        raise GradcheckError("non-finite function value")
    tape.backward(out, accumulate=False)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in planes]
    g_max = max((float(np.max(np.abs(g))) for g in analytic if g.size), default=0.0)
    floor = max(1e-8, 1e-3 * g_max)

    def evaluate() -> float:
        val = _scalar(f(*inputs)).item()
        if not np.isfinite(val):
            raise GradcheckError("non-finite function value under perturbation")
        return val

    def probe(flat, i, h) -> tuple[float, float]:
        """Central slope and forward-minus-backward slope gap at step ``h``."""
        orig = flat[i]
        flat[i] = orig + h
        f_plus = evaluate()
        flat[i] = orig - h
        f_minus = evaluate()
        flat[i] = orig
        return (f_plus - f_minus) / (2 * h), (f_plus - 2 * f0 + f_minus) / h

    coords = [(k, i) for k, p in enumerate(planes) for i in range(p.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[j] for j in sorted(pick)]

    if kink_tol is None:
        kink_tol = 0.1
    worst = 0.0
    skipped = 0
    for k, i in coords:
        flat = planes[k].data.reshape(-1)
        numeric, gap = probe(flat, i, eps)
        half, gap_half = probe(flat, i, eps / 2)
        scale = max(abs(numeric), abs(half), floor)
        split = abs(numeric - half) > kink_tol * scale
        corner = abs(gap_half) > kink_tol * scale and abs(gap_half) > 0.75 * abs(gap)
        if split or corner:
            skipped += 1
            continue
        a = analytic[k].reshape(-1)[i]
        if not np.isfinite(a):
            raise GradcheckError("non-finite analytic gradient")
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    if stats is not None:
        stats["checked"] = len(coords) - skipped
        stats["skipped"] = skipped
    if skipped == len(coords):
        raise GradcheckError("every sampled coordinate sits on a kink; nothing was checked")
    return float(worst)
