"""Pipeline variants: fusion strategy x backbone x attention x head.

Variants mirror the benchmark matrix:

* ``post_fusion_a`` — every depth slice runs through a shared 2D backbone;
  the per-slice feature maps are rank-pooled across depth, gated by CBAM,
  pooled and classified.
* ``post_fusion_b`` — raw slices are first rank-pooled in chunks of
  ``chunk_k``; each chunk image runs through the backbone and the chunk
  features are rank-pooled again.
* ``pre_fusion`` — all raw slices are rank-pooled into one dynamic image
  which runs through the 2D backbone.
* ``conv3d_baseline`` — a VGG-style stack of 3D convolutions.

Backbones: ``residual_small`` is a stem conv plus three conv-relu-conv
blocks with identity skips (widths 8/16/32 in the desk preset);
``plain_small`` is the same stack without the skips, so both have
identical parameter counts.  Downsampling is a parameter-free 2x2 window
max applied whenever the spatial extents are even, so the same weights
serve any input size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .cbam import CbamConfig, CbamParams, cbam_apply, channel_attention, spatial_attention
from .errors import ConfigError, NonFiniteError, ShapeError
from .rankpool import SliceSequence, arp_raw_coefficients, chunked_fuse, approx_rank_pool
from .rng import Rng
from .tensor import Parameter, Tensor

VARIANTS = ("post_fusion_a", "post_fusion_b", "pre_fusion", "conv3d_baseline")
BACKBONES = ("residual_small", "plain_small")
HEADS = ("fc", "svm")
FUSIONS = ("rank", "max")
PRESETS = {
    "desk": {"widths": (8, 16, 32), "in_channels": 1, "reduction_ratio": 8},
    "full": {"widths": (64, 128, 256), "in_channels": 3, "reduction_ratio": 8},
}


@dataclass
class ModelConfig:
    variant: str = "post_fusion_a"
    backbone: str = "residual_small"
    use_cbam: bool = True
    head: str = "fc"
    fusion: str = "rank"
    chunk_k: int = 10
    preset: str = "desk"
    input_dims: tuple = (32, 32, 32)

    def __post_init__(self):
        self.input_dims = tuple(int(d) for d in self.input_dims)
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}; expected one of {BACKBONES}")
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}; expected one of {HEADS}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion {self.fusion!r}; expected one of {FUSIONS}")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; expected one of {tuple(PRESETS)}")
        if self.chunk_k < 1:
            raise ConfigError(f"chunk_k must be >= 1, got {self.chunk_k}")
        if len(self.input_dims) != 3 or any(d < 1 for d in self.input_dims):
            raise ConfigError(f"input_dims must be three positive extents, got {self.input_dims}")
        if self.variant == "conv3d_baseline" and self.use_cbam:
            raise ConfigError("conv3d_baseline does not take a CBAM stage")
        if self.fusion == "max" and self.variant != "post_fusion_a":
            raise ConfigError("max fusion is the post_fusion_a ablation only")
        if self.head == "svm" and self.variant != "post_fusion_a":
            raise ConfigError("the svm head replaces the FC classifier of post_fusion_a only")

    @property
    def widths(self) -> tuple:
        return PRESETS[self.preset]["widths"]

    @property
    def in_channels(self) -> int:
        return PRESETS[self.preset]["in_channels"]

    @property
    def feature_channels(self) -> int:
        return self.widths[-1]

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "backbone": self.backbone,
            "use_cbam": self.use_cbam,
            "head": self.head,
            "fusion": self.fusion,
            "chunk_k": self.chunk_k,
            "preset": self.preset,
            "input_dims": list(self.input_dims),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "input_dims": tuple(d.get("input_dims", (32, 32, 32)))})


@dataclass
class ModelInstance:
    config: ModelConfig
    params: dict = field(default_factory=dict)
    seed: int = 0
    dtype: np.dtype = np.float64

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def cbam_params(self) -> CbamParams:
        cfg = CbamConfig(
            channels=self.config.feature_channels,
            reduction_ratio=PRESETS[self.config.preset]["reduction_ratio"],
        )
        return CbamParams(
            cfg,
            self.params["cbam.w0"],
            self.params["cbam.w1"],
            self.params["cbam.conv.w"],
            self.params["cbam.conv.b"],
        )


def _he_uniform(rng: Rng, shape, fan_in: int, name: str, dtype) -> Parameter:
    bound = np.sqrt(6.0 / fan_in)
    return Parameter(rng.uniform(-bound, bound, shape, dtype=dtype), name)


def _zero(shape, name: str, dtype) -> Parameter:
    return Parameter(np.zeros(shape, dtype=dtype), name)


def build_model(config: ModelConfig, seed: int, dtype=np.float64) -> ModelInstance:
    """Deterministic parameter construction from (config, seed)."""
    rng = Rng(seed)
    params: dict[str, Parameter] = {}

    def conv2(name, cout, cin, k=3):
        params[f"{name}.w"] = _he_uniform(rng, (cout, cin, k, k), cin * k * k, f"{name}.w", dtype)
        params[f"{name}.b"] = _zero((cout,), f"{name}.b", dtype)

    def conv3(name, cout, cin, k=3):
        params[f"{name}.w"] = _he_uniform(
            rng, (cout, cin, k, k, k), cin * k * k * k, f"{name}.w", dtype
        )
        params[f"{name}.b"] = _zero((cout,), f"{name}.b", dtype)

    w1, w2, w3 = config.widths
    cin = config.in_channels
    if config.variant == "conv3d_baseline":
        conv3("stage1.conv1", w1, cin)
        conv3("stage1.conv2", w1, w1)
        conv3("stage2.conv1", w2, w1)
        conv3("stage2.conv2", w2, w2)
        conv3("stage3.conv1", w3, w2)
        conv3("stage3.conv2", w3, w3)
    else:
        conv2("backbone.stem", w1, cin)
        conv2("backbone.block1.conv1", w1, w1)
        conv2("backbone.block1.conv2", w1, w1)
        conv2("backbone.trans1", w2, w1)
        conv2("backbone.block2.conv1", w2, w2)
        conv2("backbone.block2.conv2", w2, w2)
        conv2("backbone.trans2", w3, w2)
        conv2("backbone.block3.conv1", w3, w3)
        conv2("backbone.block3.conv2", w3, w3)
        if config.use_cbam:
            cb = CbamParams.initialize(
                CbamConfig(w3, PRESETS[config.preset]["reduction_ratio"]), rng, dtype=dtype
            )
            params["cbam.w0"] = cb.w0
            params["cbam.w1"] = cb.w1
            params["cbam.conv.w"] = cb.conv_w
            params["cbam.conv.b"] = cb.conv_b
    params["head.fc.w"] = _he_uniform(rng, (1, w3), w3, "head.fc.w", dtype)
    params["head.fc.b"] = _zero((1,), "head.fc.b", dtype)
    return ModelInstance(config=config, params=params, seed=seed, dtype=np.dtype(dtype))


# --------------------------------------------------------------------------
# forward
# --------------------------------------------------------------------------


def _maybe_pool(h: Tensor) -> Tensor:
    if all(e % 2 == 0 for e in h.shape[2:]):
        return ops.pooling(h, "window-max", k=2, s=2)
    return h


def _block(h: Tensor, params, name: str, residual: bool) -> Tensor:
    y = ops.conv2d(h, params[f"{name}.conv1.w"], params[f"{name}.conv1.b"], pad=1)
    y = ops.conv2d(ops.relu(y), params[f"{name}.conv2.w"], params[f"{name}.conv2.b"], pad=1)
    if residual:
        y = ops.add(y, h)
    return ops.relu(y)


def _backbone2d(x: Tensor, model: ModelInstance) -> Tensor:
    p = model.params
    residual = model.config.backbone == "residual_small"
    h = ops.relu(ops.conv2d(x, p["backbone.stem.w"], p["backbone.stem.b"], pad=1))
    h = _maybe_pool(h)
    h = _block(h, p, "backbone.block1", residual)
    h = ops.relu(ops.conv2d(h, p["backbone.trans1.w"], p["backbone.trans1.b"], pad=1))
    h = _maybe_pool(h)
    h = _block(h, p, "backbone.block2", residual)
    h = ops.relu(ops.conv2d(h, p["backbone.trans2.w"], p["backbone.trans2.b"], pad=1))
    h = _maybe_pool(h)
    h = _block(h, p, "backbone.block3", residual)
    return h


def _head(pooled: Tensor, model: ModelInstance) -> Tensor:
    logits = ops.dense(pooled, model.params["head.fc.w"], model.params["head.fc.b"])
    return ops.reshape(ops.sigmoid(logits), (pooled.shape[0],))


def _attend_and_classify(fused: Tensor, model: ModelInstance) -> tuple[Tensor, Tensor]:
    att = cbam_apply(fused, model.cbam_params()) if model.config.use_cbam else fused
    b, c = att.shape[0], att.shape[1]
    pooled = ops.reshape(ops.pooling(att, "spatial-avg"), (b, c))
    return _head(pooled, model), pooled


def minmax_rescale01(img: np.ndarray) -> np.ndarray:
    """Per-image min-max to [0,1]; constant images map to zeros."""
    lo, hi = img.min(), img.max()
    if hi - lo < 1e-12:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def _fuse_raw_chunks(batch: np.ndarray, k: int) -> np.ndarray:
    """Chunked rank pooling of raw slices, rescaled per chunk image."""
    out = []
    for vol in batch:  # [C, D, H, W]
        seq = SliceSequence.from_stack(np.moveaxis(vol, 1, 0))  # [D, C, H, W]
        fused = chunked_fuse(seq, k)
        out.append(np.stack([minmax_rescale01(im) for im in fused.stack], axis=0))
    return np.stack(out, axis=0)  # [B, M, C, H, W]


def _fuse_raw_full(batch: np.ndarray) -> np.ndarray:
    """Whole-stack rank pooling of raw slices into one rescaled image each."""
    out = []
    for vol in batch:
        seq = SliceSequence.from_stack(np.moveaxis(vol, 1, 0))
        out.append(minmax_rescale01(approx_rank_pool(seq).value))
    return np.stack(out, axis=0)  # [B, C, H, W]


def _validate_batch(model: ModelInstance, batch: Tensor) -> Tensor:
    if batch.data.ndim != 5:
        raise ShapeError(f"forward expects [B,C,D,H,W], got {batch.shape}")
    cfg = model.config
    if batch.shape[2:] != cfg.input_dims:
        raise ShapeError(
            f"batch volume dims {batch.shape[2:]} do not match config {cfg.input_dims}"
        )
    if batch.shape[1] == cfg.in_channels:
        return batch
    if batch.shape[1] == 1 and cfg.in_channels > 1:
        return ops.concat([batch] * cfg.in_channels, axis=1)
    raise ShapeError(
        f"batch has {batch.shape[1]} channels, config wants {cfg.in_channels}"
    )


def _fused_features(model: ModelInstance, batch: Tensor) -> Tensor:
    """Variant routing up to the fused 2D feature map (pre-attention)."""
    cfg = model.config
    b, c, d = batch.shape[0], batch.shape[1], batch.shape[2]
    h, w = batch.shape[3], batch.shape[4]
    if cfg.variant == "post_fusion_a":
        slices = ops.reshape(ops.transpose(batch, (0, 2, 1, 3, 4)), (b * d, c, h, w))
        feats = _backbone2d(slices, model)
        fc, fh, fw = feats.shape[1], feats.shape[2], feats.shape[3]
        stack = ops.reshape(feats, (b, d, fc, fh, fw))
        if cfg.fusion == "rank":
            return ops.weighted_sum_over_axis(stack, arp_raw_coefficients(d), axis=1)
        return ops.max_over_axis(stack, axis=1)
    if cfg.variant == "post_fusion_b":
        chunks = _fuse_raw_chunks(batch.data, cfg.chunk_k)  # [B, M, C, H, W]
        m = chunks.shape[1]
        imgs = Tensor(chunks.reshape(b * m, c, h, w))
        feats = _backbone2d(imgs, model)
        fc, fh, fw = feats.shape[1], feats.shape[2], feats.shape[3]
        stack = ops.reshape(feats, (b, m, fc, fh, fw))
        return ops.weighted_sum_over_axis(stack, arp_raw_coefficients(m), axis=1)
    # pre_fusion
    img = Tensor(_fuse_raw_full(batch.data))
    return _backbone2d(img, model)


def forward(model: ModelInstance, batch, return_features: bool = False):
    """Class-1 probabilities in (0,1), shape [B]."""
    if not isinstance(batch, Tensor):
        batch = Tensor(np.asarray(batch, dtype=model.dtype))
    batch = _validate_batch(model, batch)
    cfg = model.config

    if cfg.variant == "conv3d_baseline":
        p = model.params
        hcur = batch
        for stage in ("stage1", "stage2", "stage3"):
            hcur = ops.relu(ops.conv3d(hcur, p[f"{stage}.conv1.w"], p[f"{stage}.conv1.b"], pad=1))
            hcur = ops.relu(ops.conv3d(hcur, p[f"{stage}.conv2.w"], p[f"{stage}.conv2.b"], pad=1))
            hcur = _maybe_pool(hcur)
        pooled = ops.reshape(ops.pooling(hcur, "spatial-avg"), (batch.shape[0], hcur.shape[1]))
        probs = _head(pooled, model)
    else:
        fused = _fused_features(model, batch)
        probs, pooled = _attend_and_classify(fused, model)

    if return_features:
        return probs, pooled
    return probs


def attention_maps(model: ModelInstance, batch) -> tuple[np.ndarray, np.ndarray]:
    """Channel gates [B, C] and spatial gates [B, h, w] for inspection."""
    if not model.config.use_cbam:
        raise ConfigError("attention maps require a CBAM-enabled config")
    if not isinstance(batch, Tensor):
        batch = Tensor(np.asarray(batch, dtype=model.dtype))
    batch = _validate_batch(model, batch)
    fused = _fused_features(model, batch)
    params = model.cbam_params()
    mc = channel_attention(fused, params)
    gated = ops.mul(fused, mc)
    ms = spatial_attention(gated, params)
    b, c = mc.shape[0], mc.shape[1]
    return mc.data.reshape(b, c), ms.data.reshape(b, ms.shape[2], ms.shape[3])


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

_CLAMP = 1e-7


def bce_loss(label: int, p: float) -> float:
    """Binary cross-entropy of one prediction, with probability clamping."""
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    pc = min(max(float(p), _CLAMP), 1.0 - _CLAMP)
    return -(label * np.log(pc) + (1 - label) * np.log(1.0 - pc))


def bce_loss_batch(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean BCE over a batch, differentiable w.r.t. ``probs``."""
    labels = np.asarray(labels)
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must all be 0 or 1")
    y = labels.astype(probs.dtype)
    pc = ops.clamp(probs, _CLAMP, 1.0 - _CLAMP)
    one_minus = ops.add(ops.mul(pc, -1.0), 1.0)
    terms = ops.add(ops.mul(ops.log(pc), y), ops.mul(ops.log(one_minus), 1.0 - y))
    return ops.mul(ops.mean_all(terms), -1.0)


# --------------------------------------------------------------------------
# SVM head (trained separately on frozen features)
# --------------------------------------------------------------------------


@dataclass
class SvmHead:
    w: np.ndarray
    b: float

    def decision(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.w + self.b

    def predict(self, x: np.ndarray) -> np.ndarray:
        return (self.decision(x) >= 0).astype(np.int64)

    def scores01(self, x: np.ndarray) -> np.ndarray:
        """Decision values squashed to (0,1) so metric code can reuse them."""
        d = self.decision(x)
        out = np.empty_like(d)
        pos = d >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
        ed = np.exp(d[~pos])
        out[~pos] = ed / (1.0 + ed)
        return out


def svm_objective(w: np.ndarray, b: float, x: np.ndarray, y: np.ndarray, reg: float) -> float:
    margins = y * (x @ w + b)
    return float(0.5 * w @ w + reg * np.maximum(0.0, 1.0 - margins).sum())


def svm_head(features: np.ndarray, labels: np.ndarray, reg: float = 1.0,
             max_iters: int = 2000) -> SvmHead:
    """Hinge-loss linear classifier by deterministic subgradient descent.

    Minimizes 0.5*||w||^2 + reg * sum_i max(0, 1 - y_i*(w.x_i + b)) with
    labels mapped to {-1,+1}; steps are 1/(reg*k) and the best-objective
    iterate is returned.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if set(np.unique(labels)) <= {0, 1}:
        y = np.where(labels == 1, 1.0, -1.0)
    else:
        y = labels.astype(np.float64)
    if len(np.unique(y)) < 2:
        raise ValueError("svm_head needs samples from both classes")
    n, d = x.shape
    w = np.zeros(d)
    b = 0.0
    best = (w.copy(), b)
    best_obj = svm_objective(w, b, x, y, reg)
    for k in range(1, max_iters + 1):
        margins = y * (x @ w + b)
        viol = margins < 1.0
        gw = w - reg * (y[viol, None] * x[viol]).sum(axis=0)
        gb = -reg * y[viol].sum()
        step = 1.0 / (reg * k)
        w = w - step * gw
        b = b - step * gb
        if not (np.all(np.isfinite(w)) and np.isfinite(b)):
            raise NonFiniteError("svm_head produced a non-finite iterate")
        obj = svm_objective(w, b, x, y, reg)
        if obj < best_obj:
            best, best_obj = (w.copy(), b), obj
    return SvmHead(w=best[0], b=best[1])
