"""Forward ops with hand-written backward passes.

Convolution follows the deep-learning convention: it is cross-correlation,
no kernel flip.  Strided output extents must divide exactly,
``out = (in + 2*pad - k) / stride + 1``; a remainder is an error rather
than a silent floor.  Max reductions route gradient to the first maximum
in row-major scan order.
"""

from __future__ import annotations

from itertools import product

import numpy as np

from .errors import ShapeError
from .tensor import Scalar, Tensor, broadcast_shape, result_tensor, _unbroadcast


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Scalar):
        return Tensor(np.asarray(x, dtype=dtype))
    return Tensor(np.asarray(x, dtype=dtype))


# --------------------------------------------------------------------------
# elementwise and structural ops
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, None)
    b = _as_tensor(b, a.dtype)
    broadcast_shape(a.shape, b.shape)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return result_tensor(out, "add", (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, None)
    b = _as_tensor(b, a.dtype)
    broadcast_shape(a.shape, b.shape)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return result_tensor(out, "mul", (a, b), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}: {e}") from e

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return result_tensor(out, "reshape", (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = x.data.transpose(axes)
    inv = np.argsort(axes)

    def backward(g):
        x._accumulate(g.transpose(inv))

    return result_tensor(out, "transpose", (x,), backward)


def take(x: Tensor, index) -> Tensor:
    out = x.data[index]
    if np.isscalar(out) or out.ndim == 0:
        out = np.asarray(out)

    def backward(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, index, g)
        x._accumulate(dx)

    return result_tensor(np.array(out, copy=True), "slice", (x,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return result_tensor(out, "concat", tuple(tensors), backward)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum())

    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape).astype(x.dtype, copy=False))

    return result_tensor(out, "sum", (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean())

    def backward(g):
        x._accumulate(np.broadcast_to(g / n, x.shape).astype(x.dtype, copy=False))

    return result_tensor(out, "mean", (x,), backward)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)
    mask = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        x._accumulate(g * mask)

    return result_tensor(out, "clamp", (x,), backward)


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)

    def backward(g):
        x._accumulate(g / x.data)

    return result_tensor(out, "log", (x,), backward)


def weighted_sum_over_axis(x: Tensor, weights: np.ndarray, axis: int) -> Tensor:
    """``out = sum_t weights[t] * x[..., t, ...]`` along ``axis`` (linear map)."""
    weights = np.asarray(weights, dtype=x.dtype)
    if weights.ndim != 1 or weights.shape[0] != x.shape[axis]:
        raise ShapeError(
            f"weights length {weights.shape} does not match axis {axis} of {x.shape}"
        )
    out = np.tensordot(weights, x.data, axes=(0, axis))
    wshape = [1] * len(x.shape)
    wshape[axis] = weights.shape[0]
    wexp = weights.reshape(wshape)

    def backward(g):
        x._accumulate(np.expand_dims(g, axis) * wexp)

    return result_tensor(out, "weighted_sum", (x,), backward)


def max_over_axis(x: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis``; gradient goes to the first argmax only."""
    out = x.data.max(axis=axis)
    idx = np.expand_dims(x.data.argmax(axis=axis), axis)

    def backward(g):
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, idx, np.expand_dims(g, axis), axis)
        x._accumulate(dx)

    return result_tensor(out, "max_over_axis", (x,), backward)


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    mask = x.data > 0  # subgradient 0 at the kink

    def backward(g):
        x._accumulate(g * mask)

    return result_tensor(out, "relu", (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_stable(x.data)

    def backward(g):
        x._accumulate(g * out * (1.0 - out))

    return result_tensor(out, "sigmoid", (x,), backward)


def _sigmoid_stable(z: np.ndarray) -> np.ndarray:
    """Branching form: never exponentiates a positive argument."""
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# --------------------------------------------------------------------------
# dense
# --------------------------------------------------------------------------


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``out = x @ w.T + b`` for x:[B,n], w:[m,n], b:[m]."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"dense expects 2-D input/weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"dense inner extents differ: input {x.shape} vs weight {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"dense bias shape {b.shape} != ({w.shape[0]},)")
    out = x.data @ w.data.T + b.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.data)
        if w.requires_grad:
            w._accumulate(g.T @ x.data)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return result_tensor(out, "dense", (x, w, b), backward)


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------


def _out_extent(n: int, k: int, stride: int, pad: int, what: str) -> int:
    span = n + 2 * pad - k
    if span < 0:
        raise ShapeError(f"{what}: kernel {k} exceeds padded extent {n + 2 * pad}")
    if span % stride != 0:
        raise ShapeError(
            f"{what}: extent {n} with kernel {k}, stride {stride}, pad {pad} "
            f"gives non-integer output"
        )
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x:[B,C,H,W] with w:[F,C,kh,kw] plus bias b:[F].

    Lowered to one GEMM over im2col patches; the patch matrix is kept for
    the backward pass, which is two GEMMs plus a scatter-add over offsets.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/kernel, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    F, Cw, kh, kw = w.shape
    if C != Cw:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    if b.shape != (F,):
        raise ShapeError(f"conv2d bias shape {b.shape} != ({F},)")
    Ho = _out_extent(H, kh, stride, pad, "conv2d height")
    Wo = _out_extent(W, kw, stride, pad, "conv2d width")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    xt = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))  # [B, Hp, Wp, C]
    patches = np.empty((B, Ho, Wo, kh * kw, C), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patches[:, :, :, i * kw + j, :] = xt[
                :, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :
            ]
    pmat = patches.reshape(B * Ho * Wo, kh * kw * C)
    wmat = np.ascontiguousarray(
        w.data.transpose(2, 3, 1, 0).reshape(kh * kw * C, F)
    )
    out2 = pmat @ wmat + b.data
    out = np.ascontiguousarray(out2.reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, F)
        if b.requires_grad:
            b._accumulate(g2.sum(axis=0))
        if w.requires_grad:
            dwmat = pmat.T @ g2  # [kh*kw*C, F]
            w._accumulate(
                dwmat.reshape(kh, kw, C, F).transpose(3, 2, 0, 1)
            )
        if x.requires_grad:
            dpat = (g2 @ wmat.T).reshape(B, Ho, Wo, kh * kw, C)
            dxt = np.zeros_like(xt)
            for i in range(kh):
                for j in range(kw):
                    dxt[
                        :, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :
                    ] += dpat[:, :, :, i * kw + j, :]
            dxp = dxt.transpose(0, 3, 1, 2)
            x._accumulate(dxp[:, :, pad : pad + H, pad : pad + W] if pad else dxp)

    return result_tensor(out, "conv2d", (x, w, b), backward)


def conv3d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x:[B,C,D,H,W] with w:[F,C,kd,kh,kw] plus bias."""
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D input/kernel, got {x.shape} and {w.shape}")
    B, C, D, H, W = x.shape
    F, Cw, kd, kh, kw = w.shape
    if C != Cw:
        raise ShapeError(f"conv3d channel mismatch: input {x.shape} vs kernel {w.shape}")
    if b.shape != (F,):
        raise ShapeError(f"conv3d bias shape {b.shape} != ({F},)")
    Do = _out_extent(D, kd, stride, pad, "conv3d depth")
    Ho = _out_extent(H, kh, stride, pad, "conv3d height")
    Wo = _out_extent(W, kw, stride, pad, "conv3d width")

    if pad:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    else:
        xp = x.data
    acc = np.zeros((B, Do, Ho, Wo, F), dtype=x.dtype)
    for d, i, j in product(range(kd), range(kh), range(kw)):
        xs = xp[
            :,
            :,
            d : d + stride * Do : stride,
            i : i + stride * Ho : stride,
            j : j + stride * Wo : stride,
        ]
        acc += xs.transpose(0, 2, 3, 4, 1) @ w.data[:, :, d, i, j].T
    out = np.ascontiguousarray(acc.transpose(0, 4, 1, 2, 3)) + b.data.reshape(1, F, 1, 1, 1)

    def backward(g):
        if b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3, 4)))
        need_x = x.requires_grad
        need_w = w.requires_grad
        dxp = np.zeros_like(xp) if need_x else None
        dw = np.zeros_like(w.data) if need_w else None
        gT = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1))
        for d, i, j in product(range(kd), range(kh), range(kw)):
            sl = (
                slice(None),
                slice(None),
                slice(d, d + stride * Do, stride),
                slice(i, i + stride * Ho, stride),
                slice(j, j + stride * Wo, stride),
            )
            if need_w:
                dw[:, :, d, i, j] = np.tensordot(g, xp[sl], axes=([0, 2, 3, 4], [0, 2, 3, 4]))
            if need_x:
                dxp[sl] += (gT @ w.data[:, :, d, i, j]).transpose(0, 4, 1, 2, 3)
        if need_w:
            w._accumulate(dw)
        if need_x:
            if pad:
                x._accumulate(dxp[:, :, pad : pad + D, pad : pad + H, pad : pad + W])
            else:
                x._accumulate(dxp)

    return result_tensor(out, "conv3d", (x, w, b), backward)


# --------------------------------------------------------------------------
# pooling
# --------------------------------------------------------------------------

POOL_MODES = ("spatial-avg", "spatial-max", "channel-avg", "channel-max", "window-max")


def pooling(x: Tensor, mode: str, k: int | None = None, s: int | None = None) -> Tensor:
    """Reductions on [B,C,*spatial] tensors.

    spatial-avg/max reduce every spatial axis to 1 keeping C; channel-avg/max
    reduce C to 1 keeping the spatial grid; window-max tiles each spatial
    axis with windows of extent ``k`` and step ``s`` (extents must fit
    exactly: ``(ext - k) % s == 0``).
    """
    if x.data.ndim < 3:
        raise ShapeError(f"pooling expects [B,C,*spatial], got {x.shape}")
    if x.data.size == 0:
        raise ShapeError("pooling over an empty tensor")
    spatial_axes = tuple(range(2, x.data.ndim))

    if mode == "spatial-avg":
        out = x.data.mean(axis=spatial_axes, keepdims=True)
        n = int(np.prod([x.shape[a] for a in spatial_axes]))

        def backward(g):
            x._accumulate(np.broadcast_to(g / n, x.shape).astype(x.dtype, copy=False))

        return result_tensor(out, "spatial-avg", (x,), backward)

    if mode == "spatial-max":
        B, C = x.shape[0], x.shape[1]
        flat = x.data.reshape(B, C, -1)
        idx = flat.argmax(axis=2)  # first max in row-major scan order
        out_shape = (B, C) + (1,) * len(spatial_axes)
        out = np.take_along_axis(flat, idx[:, :, None], axis=2).reshape(out_shape)

        def backward(g):
            dflat = np.zeros_like(flat)
            np.put_along_axis(dflat, idx[:, :, None], g.reshape(B, C, 1), axis=2)
            x._accumulate(dflat.reshape(x.shape))

        return result_tensor(out, "spatial-max", (x,), backward)

    if mode == "channel-avg":
        out = x.data.mean(axis=1, keepdims=True)
        c = x.shape[1]

        def backward(g):
            x._accumulate(np.broadcast_to(g / c, x.shape).astype(x.dtype, copy=False))

        return result_tensor(out, "channel-avg", (x,), backward)

    if mode == "channel-max":
        out = x.data.max(axis=1, keepdims=True)
        idx = np.expand_dims(x.data.argmax(axis=1), 1)

        def backward(g):
            dx = np.zeros_like(x.data)
            np.put_along_axis(dx, idx, g, axis=1)
            x._accumulate(dx)

        return result_tensor(out, "channel-max", (x,), backward)

    if mode == "window-max":
        if k is None or k < 1:
            raise ShapeError("window-max requires a window extent k >= 1")
        s = k if s is None else s
        return _window_max(x, k, s)

    raise ShapeError(f"unknown pooling mode {mode!r}; expected one of {POOL_MODES}")


def _window_max(x: Tensor, k: int, s: int) -> Tensor:
    nd = x.data.ndim - 2
    exts = x.shape[2:]
    for e in exts:
        if e < k or (e - k) % s != 0:
            raise ShapeError(
                f"window-max(k={k}, s={s}) does not tile spatial extents {exts}"
            )
    outs = tuple((e - k) // s + 1 for e in exts)
    offsets = list(product(range(k), repeat=nd))  # lexicographic == scan order
    out = None
    choice = None
    slices = []
    for oid, off in enumerate(offsets):
        sl = (slice(None), slice(None)) + tuple(
            slice(o, o + s * n, s) for o, n in zip(off, outs)
        )
        slices.append(sl)
        xs = x.data[sl]
        if out is None:
            out = xs.copy()
            choice = np.zeros(out.shape, dtype=np.int32)
        else:
            better = xs > out  # strict: keeps the first maximum
            out[better] = xs[better]
            choice[better] = oid

    def backward(g):
        dx = np.zeros_like(x.data)
        for oid, sl in enumerate(slices):
            dx[sl] += g * (choice == oid)
        x._accumulate(dx)

    return result_tensor(out, "window-max", (x,), backward)
