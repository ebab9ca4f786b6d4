"""Rank-pooling fusion of depth-ordered slice sequences.

A depth-ordered stack of slices (or per-slice feature maps) is summarized
by the parameter vector ``u`` of a linear function trained to rank the
slices by depth.  The pipeline is:

1. smooth the raw sequence into running depth means
   ``v_t = (1/t) * sum_{tau<=t} phi_tau``;
2. score each smoothed slice with ``S(t, u) = <u, v_t>`` and demand deeper
   slices score higher with unit margin;
3. minimize ``0.5*||u||^2 + lam * sum_{q>t} max(0, 1 - <u, v_q - v_t>)``.

Two routes are provided: an exact deterministic projected-subgradient
solver (offline / CLI / tests) and the closed-form approximation
``u = sum_t (2t - T - 1) * v_t``, which equals the negative subgradient of
the hinge sum at ``u = 0`` up to positive scale and is the differentiable
fusion used in the training path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError, ShapeError

_SUPPORTED_SCHEDULE = "inverse-lambda-k"  # step_k = 1 / (lam * k)


class SliceSequence:
    """Ordered stack of same-shaped arrays; index encodes increasing depth."""

    def __init__(self, items):
        items = [np.asarray(it) for it in items]
        if len(items) == 0:
            raise ShapeError("SliceSequence requires at least one slice")
        shape = items[0].shape
        for i, it in enumerate(items):
            if it.shape != shape:
                raise ShapeError(
                    f"slice {i} has shape {it.shape}, expected {shape}"
                )
        self.stack = np.stack(items, axis=0)
        if not np.all(np.isfinite(self.stack)):
            raise NonFiniteError("SliceSequence contains non-finite values")

    @classmethod
    def from_stack(cls, stack: np.ndarray) -> "SliceSequence":
        obj = cls.__new__(cls)
        stack = np.asarray(stack)
        if stack.shape[0] < 1:
            raise ShapeError("SliceSequence requires at least one slice")
        if not np.all(np.isfinite(stack)):
            raise NonFiniteError("SliceSequence contains non-finite values")
        obj.stack = stack
        return obj

    def __len__(self) -> int:
        return self.stack.shape[0]

    def __getitem__(self, t: int) -> np.ndarray:
        return self.stack[t]

    @property
    def item_shape(self) -> tuple:
        return self.stack.shape[1:]


@dataclass
class DynamicImage:
    """Single fused representation with the item shape of its source."""

    value: np.ndarray


@dataclass
class RankSolverConfig:
    lam: float = 1.0
    max_iters: int = 2000
    tolerance: float = 1e-6
    step_schedule: str = field(default=_SUPPORTED_SCHEDULE)

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError(f"lam must be positive, got {self.lam}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.tolerance <= 0:
            raise ValueError(f"tolerance must be positive, got {self.tolerance}")
        if self.step_schedule != _SUPPORTED_SCHEDULE:
            raise ValueError(
                f"unsupported step_schedule {self.step_schedule!r}; "
                f"only {_SUPPORTED_SCHEDULE!r} is defined"
            )


# --------------------------------------------------------------------------
# smoothing and coefficients
# --------------------------------------------------------------------------


def smooth_sequence(phi: SliceSequence) -> SliceSequence:
    """Running depth means: out[t] = mean(phi[0..t]).

    Uses the update form v_t = v_{t-1} + (phi_t - v_{t-1}) / t, which keeps
    constant sequences bit-exactly constant (the increment is exactly 0).
    """
    out = np.empty_like(phi.stack)
    out[0] = phi.stack[0]
    for t in range(1, len(phi)):
        out[t] = out[t - 1] + (phi.stack[t] - out[t - 1]) / (t + 1)
    return SliceSequence.from_stack(out)


def arp_beta(T: int) -> np.ndarray:
    """Closed-form weights on the smoothed sequence: beta_t = 2t - T - 1."""
    if T < 1:
        raise ShapeError("arp_beta requires T >= 1")
    t = np.arange(1, T + 1, dtype=np.float64)
    return 2.0 * t - T - 1.0


def arp_raw_coefficients(T: int) -> np.ndarray:
    """Weights on the raw sequence: beta composed with the prefix-mean map.

    alpha_tau = sum_{t >= tau} beta_t / t, so that
    sum_t beta_t * v_t == sum_tau alpha_tau * phi_tau exactly.
    """
    beta = arp_beta(T)
    over_t = beta / np.arange(1, T + 1, dtype=np.float64)
    return np.cumsum(over_t[::-1])[::-1].copy()


# --------------------------------------------------------------------------
# scoring and objective
# --------------------------------------------------------------------------


def _flat(u) -> np.ndarray:
    if isinstance(u, DynamicImage):
        u = u.value
    return np.asarray(u).reshape(-1)


def rank_score(u, v) -> float:
    """Flat inner product <u, v>; shapes must match."""
    uv = u.value if isinstance(u, DynamicImage) else np.asarray(u)
    vv = np.asarray(v)
    if uv.shape != vv.shape:
        raise ShapeError(f"rank_score shapes differ: {uv.shape} vs {vv.shape}")
    return float(uv.reshape(-1) @ vv.reshape(-1))


def _pair_differences(V: SliceSequence) -> np.ndarray:
    """All v_q - v_t for q > t, flattened to [P, d] in (t, q) lexicographic order."""
    flat = V.stack.reshape(len(V), -1)
    rows = [flat[q] - flat[t] for t in range(len(V)) for q in range(t + 1, len(V))]
    if not rows:
        return np.zeros((0, flat.shape[1]), dtype=flat.dtype)
    return np.stack(rows, axis=0)


def ranksvm_objective(u, V: SliceSequence, cfg: RankSolverConfig) -> float:
    """0.5*||u||^2 + lam * sum over pairs q>t of max(0, 1 - <u, v_q - v_t>)."""
    uf = _flat(u)
    if uf.shape[0] != int(np.prod(V.item_shape)):
        raise ShapeError(
            f"u has {uf.shape[0]} elements, slices have shape {V.item_shape}"
        )
    diffs = _pair_differences(V)
    margins = diffs @ uf
    hinge = np.maximum(0.0, 1.0 - margins).sum()
    return float(0.5 * uf @ uf + cfg.lam * hinge)


# --------------------------------------------------------------------------
# exact solver
# --------------------------------------------------------------------------


def minimize_rank_objective(V: SliceSequence, cfg: RankSolverConfig) -> np.ndarray:
    """Deterministic full-batch projected subgradient on a smoothed sequence.

    Steps are 1/(lam*k); iterates are projected onto the ball of radius
    sqrt(2*lam*P) that provably contains the optimum (the objective at 0 is
    lam*P, so 0.5*||u*||^2 <= lam*P).  The returned vector is the best of:
    zero, the closed-form approximation point, every projected iterate, and
    the suffix average of the second half of the trajectory, so its
    objective is within cfg.tolerance of the best iterate by construction.
    """
    T = len(V)
    d = int(np.prod(V.item_shape))
    if T == 1:
        return np.zeros(V.item_shape, dtype=np.float64)
    diffs = _pair_differences(V).astype(np.float64)
    P = diffs.shape[0]
    lam = float(cfg.lam)

    def objective(uf):
        margins = diffs @ uf
        return 0.5 * uf @ uf + lam * np.maximum(0.0, 1.0 - margins).sum()

    radius = np.sqrt(2.0 * lam * P)
    u = np.zeros(d, dtype=np.float64)
    best_u, best_obj = u.copy(), objective(u)

    arp_point = diffs.sum(axis=0)  # == sum_t beta_t v_t
    arp_obj = objective(arp_point)
    if arp_obj < best_obj:
        best_u, best_obj = arp_point.copy(), arp_obj

    K = cfg.max_iters
    suffix_start = K // 2
    suffix_sum = np.zeros_like(u)
    suffix_n = 0
    for k in range(1, K + 1):
        margins = diffs @ u
        viol = margins < 1.0
        g = u - lam * diffs[viol].sum(axis=0)
        u = u - g / (lam * k)
        norm = np.linalg.norm(u)
        if norm > radius:
            u *= radius / norm
        if not np.all(np.isfinite(u)):
            raise NonFiniteError("rank solver produced a non-finite iterate")
        obj = objective(u)
        if obj < best_obj:
            best_u, best_obj = u.copy(), obj
        if k > suffix_start:
            suffix_sum += u
            suffix_n += 1
    if suffix_n:
        avg = suffix_sum / suffix_n
        if objective(avg) < best_obj:
            best_u = avg
    return best_u.reshape(V.item_shape)


def ranksvm_solve(phi: SliceSequence, cfg: RankSolverConfig | None = None) -> DynamicImage:
    """Smooth per the running-mean rule, then minimize the ranking objective."""
    cfg = cfg or RankSolverConfig()
    V = smooth_sequence(_to_float64(phi))
    return DynamicImage(minimize_rank_objective(V, cfg))


def _to_float64(phi: SliceSequence) -> SliceSequence:
    if phi.stack.dtype == np.float64:
        return phi
    return SliceSequence.from_stack(phi.stack.astype(np.float64))


# --------------------------------------------------------------------------
# approximate (closed-form) pooling and its exact backward
# --------------------------------------------------------------------------


def approx_rank_pool(phi: SliceSequence) -> DynamicImage:
    """u = sum_t beta_t * v_t over the smoothed sequence (linear in phi).

    Computed as sum_t beta_t * (v_t - v_T); identical as a linear map since
    the beta weights sum to zero, and exactly zero on constant sequences
    (every centered term is bit-exactly zero there).
    """
    V = smooth_sequence(phi)
    T = len(phi)
    beta = arp_beta(T).astype(phi.stack.dtype)
    centered = V.stack - V.stack[-1]
    value = np.tensordot(beta, centered, axes=(0, 0))
    return DynamicImage(value)


def arp_backward(upstream: np.ndarray, T: int) -> np.ndarray:
    """Gradient of approx_rank_pool w.r.t. the raw slices.

    The pooling is the linear map phi -> alpha . phi, so the backward is its
    transpose: slice tau receives alpha_tau * upstream.  Returns [T, *shape].
    """
    upstream = np.asarray(upstream)
    alpha = arp_raw_coefficients(T).astype(upstream.dtype)
    return alpha.reshape((T,) + (1,) * upstream.ndim) * upstream[None]


def chunked_fuse(phi: SliceSequence, k: int) -> SliceSequence:
    """Fuse consecutive depth chunks of size k (last chunk may be shorter)."""
    if k < 1:
        raise ShapeError(f"chunk size must be >= 1, got {k}")
    T = len(phi)
    fused = [
        approx_rank_pool(SliceSequence.from_stack(phi.stack[lo : min(lo + k, T)])).value
        for lo in range(0, T, k)
    ]
    return SliceSequence(fused)


def maxpool_fuse(phi: SliceSequence) -> DynamicImage:
    """Elementwise maximum over depth (the temporal max-pooling ablation)."""
    return DynamicImage(phi.stack.max(axis=0))
