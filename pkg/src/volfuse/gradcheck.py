"""Finite-difference verification of hand-written backward passes."""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteError
from .rng import Rng
from .tensor import Tensor


def nudge_from_kinks(arr: np.ndarray, threshold: float) -> np.ndarray:
    """Push values within ``threshold`` of 0 away from the relu kink."""
    out = np.array(arr, copy=True)
    near = np.abs(out) < threshold
    out[near] = np.where(out[near] >= 0, threshold, -threshold)
    return out


def grad_check(
    op,
    inputs,
    eps: float = 1e-5,
    rng: Rng | None = None,
    max_elements: int | None = None,
    proj_scale: float = 1.0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``op`` maps a list of Tensors to one output Tensor.  The output is
    projected onto a fixed random direction so a single scalar drives both
    the backward pass and the finite differences.  When an input has more
    than ``max_elements`` entries, a deterministic subset of coordinates is
    probed instead of all of them (keeps whole-pipeline checks fast);
    per-op checks probe every coordinate.

    Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8).  The
    ratio is invariant to ``proj_scale`` wherever the gradient clears the
    1e-8 floor; deep pipelines pass a small scale so that zero-gradient
    coordinates (dead relu paths) sit below the floor instead of comparing
    centered-difference roundoff noise against it.

    A coordinate whose error exceeds 1e-6 is re-estimated at eps/8 and
    eps/64 and the best estimate wins: a +-eps step that crosses a relu
    kink or a max-pool tie gives an invalid difference quotient, and the
    artifact vanishes as eps shrinks, while a genuinely wrong backward
    stays wrong at every scale.
    """
    rng = rng or Rng(0)
    base = [
        Tensor(np.asarray(t.data, dtype=np.float64).copy(), requires_grad=True)
        for t in inputs
    ]

    out = op(base)
    proj = rng.uniform(-proj_scale, proj_scale, out.shape)
    out.backward(proj)
    analytic = []
    for t in base:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("analytic gradient is non-finite")
        analytic.append(np.asarray(g, dtype=np.float64))

    probe = [Tensor(t.data.copy()) for t in base]

    def scalar_of() -> float:
        return float(np.sum(op(probe).data * proj))

    worst = 0.0
    for which, t in enumerate(probe):
        n = t.data.size
        if max_elements is not None and n > max_elements:
            coords = rng.choice_no_replace(n, max_elements)
        else:
            coords = range(n)
        flat = t.data.reshape(-1)
        for c in coords:
            a = analytic[which].reshape(-1)[c]
            rel = np.inf
            for scale in (1.0, 8.0, 64.0):
                e = eps / scale
                orig = flat[c]
                flat[c] = orig + e
                f_plus = scalar_of()
                flat[c] = orig - e
                f_minus = scalar_of()
                flat[c] = orig
                numeric = (f_plus - f_minus) / (2.0 * e)
                rel = min(rel, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
                if rel < 1e-6:
                    break
            worst = max(worst, rel)
    return worst
