"""Registry of gradient checks over every op and every pipeline variant."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .cbam import CbamConfig, CbamParams, cbam_apply, channel_attention, spatial_attention
from .gradcheck import grad_check, nudge_from_kinks
from .models import ModelConfig, bce_loss_batch, build_model, forward
from .rng import Rng
from .tensor import Tensor

OP_THRESHOLD = 1e-5
VARIANT_THRESHOLD = 1e-4
TINY_DIMS = (6, 8, 8)  # per-variant pipeline checks run on 2 x 1 x this


def _t(rng: Rng, shape) -> Tensor:
    return Tensor(rng.uniform(-1.0, 1.0, shape))


def _check_dense(seed: int) -> float:
    rng = Rng(seed)
    x, w, b = _t(rng, (3, 5)), _t(rng, (4, 5)), _t(rng, (4,))
    return grad_check(lambda ts: ops.dense(*ts), [x, w, b], rng=rng.spawn(1))


def _check_conv2d(seed: int) -> float:
    rng = Rng(seed)
    x, w, b = _t(rng, (1, 2, 5, 5)), _t(rng, (3, 2, 3, 3)), _t(rng, (3,))
    return grad_check(lambda ts: ops.conv2d(*ts, stride=1, pad=1), [x, w, b], rng=rng.spawn(1))


def _check_conv2d_strided(seed: int) -> float:
    rng = Rng(seed)
    x, w, b = _t(rng, (2, 2, 6, 6)), _t(rng, (2, 2, 2, 2)), _t(rng, (2,))
    return grad_check(lambda ts: ops.conv2d(*ts, stride=2, pad=0), [x, w, b], rng=rng.spawn(1))


def _check_conv3d(seed: int) -> float:
    rng = Rng(seed)
    x, w, b = _t(rng, (1, 2, 4, 4, 4)), _t(rng, (2, 2, 3, 3, 3)), _t(rng, (2,))
    return grad_check(lambda ts: ops.conv3d(*ts, stride=1, pad=1), [x, w, b], rng=rng.spawn(1))


def _check_pool(mode: str):
    def run(seed: int) -> float:
        rng = Rng(seed)
        x = _t(rng, (2, 3, 4, 4))
        kwargs = {"k": 2, "s": 2} if mode == "window-max" else {}
        return grad_check(lambda ts: ops.pooling(ts[0], mode, **kwargs), [x], rng=rng.spawn(1))

    return run


def _check_relu(seed: int) -> float:
    rng = Rng(seed)
    x = Tensor(nudge_from_kinks(rng.uniform(-1.0, 1.0, (4, 5)), 1e-3))
    return grad_check(lambda ts: ops.relu(ts[0]), [x], rng=rng.spawn(1))


def _check_sigmoid(seed: int) -> float:
    rng = Rng(seed)
    x = _t(rng, (4, 5))
    return grad_check(lambda ts: ops.sigmoid(ts[0]), [x], rng=rng.spawn(1))


def _check_sigmoid_chain(seed: int) -> float:
    rng = Rng(seed)
    x, w, b = _t(rng, (3, 4)), _t(rng, (2, 4)), _t(rng, (2,))
    return grad_check(
        lambda ts: ops.sigmoid(ops.dense(ts[0], ts[1], ts[2])), [x, w, b], rng=rng.spawn(1)
    )


def _check_bce_chain(seed: int) -> float:
    rng = Rng(seed)
    p = Tensor(rng.uniform(0.1, 0.9, (6,)))
    labels = (rng.uniform(0, 1, (6,)) > 0.5).astype(np.int64)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    return grad_check(lambda ts: bce_loss_batch(ops.sigmoid(ts[0]), labels), [p], rng=rng.spawn(1))


def _check_mul_broadcast(seed: int) -> float:
    rng = Rng(seed)
    f, gates = _t(rng, (2, 3, 4, 4)), _t(rng, (2, 3, 1, 1))
    return grad_check(lambda ts: ops.mul(ts[0], ts[1]), [f, gates], rng=rng.spawn(1))


def _check_weighted_sum(seed: int) -> float:
    rng = Rng(seed)
    x = _t(rng, (2, 5, 3, 2, 2))
    wts = rng.uniform(-2.0, 2.0, (5,))
    return grad_check(
        lambda ts: ops.weighted_sum_over_axis(ts[0], wts, axis=1), [x], rng=rng.spawn(1)
    )


def _check_max_over_axis(seed: int) -> float:
    rng = Rng(seed)
    x = _t(rng, (2, 5, 3, 2, 2))
    return grad_check(lambda ts: ops.max_over_axis(ts[0], axis=1), [x], rng=rng.spawn(1))


def _check_concat(seed: int) -> float:
    rng = Rng(seed)
    a, b = _t(rng, (2, 1, 3, 3)), _t(rng, (2, 1, 3, 3))
    return grad_check(lambda ts: ops.concat(ts, axis=1), [a, b], rng=rng.spawn(1))


def _cbam_inputs(rng: Rng):
    cfg = CbamConfig(channels=8, reduction_ratio=4, spatial_kernel=3)
    params = CbamParams.initialize(cfg, rng.spawn(7))
    f = _t(rng, (2, 8, 4, 4))
    tensors = [f, params.w0, params.w1, params.conv_w, params.conv_b]

    def rebuild(ts):
        return ts[0], CbamParams(cfg, ts[1], ts[2], ts[3], ts[4])

    return tensors, rebuild


def _check_channel_attention(seed: int) -> float:
    rng = Rng(seed)
    tensors, rebuild = _cbam_inputs(rng)
    return grad_check(
        lambda ts: channel_attention(*rebuild(ts)), tensors, rng=rng.spawn(1)
    )


def _check_spatial_attention(seed: int) -> float:
    rng = Rng(seed)
    tensors, rebuild = _cbam_inputs(rng)
    return grad_check(
        lambda ts: spatial_attention(*rebuild(ts)), tensors, rng=rng.spawn(1)
    )


def _check_cbam_apply(seed: int) -> float:
    rng = Rng(seed)
    tensors, rebuild = _cbam_inputs(rng)
    return grad_check(lambda ts: cbam_apply(*rebuild(ts)), tensors, rng=rng.spawn(1))


OP_CHECKS = [
    ("dense", _check_dense),
    ("conv2d", _check_conv2d),
    ("conv2d_strided", _check_conv2d_strided),
    ("conv3d", _check_conv3d),
    ("pool_spatial_avg", _check_pool("spatial-avg")),
    ("pool_spatial_max", _check_pool("spatial-max")),
    ("pool_channel_avg", _check_pool("channel-avg")),
    ("pool_channel_max", _check_pool("channel-max")),
    ("pool_window_max", _check_pool("window-max")),
    ("relu", _check_relu),
    ("sigmoid", _check_sigmoid),
    ("sigmoid_chain", _check_sigmoid_chain),
    ("bce_chain", _check_bce_chain),
    ("mul_broadcast", _check_mul_broadcast),
    ("weighted_sum_over_axis", _check_weighted_sum),
    ("max_over_axis", _check_max_over_axis),
    ("concat", _check_concat),
]


def variant_configs() -> dict[str, ModelConfig]:
    """Tiny-dims configs covering every row of the benchmark model column."""
    dims = TINY_DIMS
    return {
        "conv3d_baseline": ModelConfig(variant="conv3d_baseline", use_cbam=False,
                                       input_dims=dims),
        "pre_fusion": ModelConfig(variant="pre_fusion", input_dims=dims),
        "post_fusion_a": ModelConfig(variant="post_fusion_a", input_dims=dims),
        "post_fusion_b": ModelConfig(variant="post_fusion_b", chunk_k=3, input_dims=dims),
        "post_fusion_a_svm_features": ModelConfig(variant="post_fusion_a", head="svm",
                                                  input_dims=dims),
        "post_fusion_a_no_cbam": ModelConfig(variant="post_fusion_a", use_cbam=False,
                                             input_dims=dims),
        "post_fusion_a_maxpool": ModelConfig(variant="post_fusion_a", fusion="max",
                                             input_dims=dims),
        "post_fusion_a_plain_backbone": ModelConfig(variant="post_fusion_a",
                                                    backbone="plain_small", input_dims=dims),
    }


def check_variant(name: str, config: ModelConfig, seed: int,
                  max_elements: int = 3) -> float:
    """Finite-difference check of a whole pipeline w.r.t. its parameters."""
    model = build_model(config, seed, dtype=np.float64)
    rng = Rng(seed)
    d, h, w = config.input_dims
    batch = Tensor(rng.uniform(-1.0, 1.0, (2, 1, d, h, w)))
    names = sorted(model.params)

    svm_features = name.endswith("svm_features")

    def op(tensors):
        for nm, t in zip(names, tensors):
            model.params[nm] = t
        if svm_features:
            _, pooled = forward(model, batch, return_features=True)
            return pooled
        return forward(model, batch)

    inputs = [model.params[nm] for nm in names]
    return grad_check(op, inputs, rng=rng.spawn(99), max_elements=max_elements,
                      proj_scale=1e-3)


@dataclass
class CheckRow:
    kind: str  # "op" or "variant"
    name: str
    worst: float
    threshold: float

    @property
    def ok(self) -> bool:
        return self.worst < self.threshold


def run_suite(seeds=range(5), op_checks=None, variant_names=None) -> list[CheckRow]:
    """Run every registered check over the seeds; returns one row per check."""
    rows = []
    for name, fn in op_checks if op_checks is not None else OP_CHECKS:
        worst = max(fn(seed) for seed in seeds)
        rows.append(CheckRow("op", name, worst, OP_THRESHOLD))
    configs = variant_configs()
    names = variant_names if variant_names is not None else list(configs)
    for name in names:
        worst = max(check_variant(name, configs[name], seed) for seed in seeds)
        rows.append(CheckRow("variant", name, worst, VARIANT_THRESHOLD))
    return rows
