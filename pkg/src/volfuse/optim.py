"""Adam, the deterministic training loop, and checkpoint persistence."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointHashError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    DatasetError,
    NonFiniteError,
)
from .models import ModelConfig, ModelInstance, bce_loss_batch, build_model, forward
from .rng import Rng, derive_seed
from .tensor import Tensor


class AdamState:
    """First/second moment estimates per parameter plus the step counter."""

    def __init__(self, model: ModelInstance, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in model.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in model.params.items()}


def adam_step(model: ModelInstance, state: AdamState) -> None:
    """One bias-corrected update; parameters are mutated in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name in sorted(model.params):
        p = model.params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 16
    lr: float = 1e-4
    seed: int = 0
    precision: str = "float32"
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32/float64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "seed": self.seed,
            "precision": self.precision,
            "model": self.model.to_dict(),
        }


@dataclass
class TrainResult:
    curve: list  # (epoch, train_loss, eval_loss)
    best_epoch: int
    best_eval_loss: float
    model: ModelInstance
    best_params: dict  # name -> np.ndarray snapshot at the best epoch


def _batch_tensor(volumes, idx, dtype) -> Tensor:
    x = np.stack([volumes[i] for i in idx], axis=0).astype(dtype, copy=False)
    return Tensor(x[:, None])  # add the channel axis: [B, 1, D, H, W]


def _mean_loss(model: ModelInstance, volumes, labels, idx, batch_size, dtype) -> float:
    total = 0.0
    for lo in range(0, len(idx), batch_size):
        chunk = idx[lo : lo + batch_size]
        probs = forward(model, _batch_tensor(volumes, chunk, dtype))
        loss = bce_loss_batch(probs, labels[chunk])
        total += loss.item() * len(chunk)
    return total / len(idx)


def train_epoch(model: ModelInstance, state: AdamState, cfg: TrainConfig,
                volumes, labels, epoch: int) -> float:
    """One shuffled pass over the training split; returns its mean loss."""
    n = len(volumes)
    order = Rng(derive_seed(cfg.seed, epoch)).shuffled_indices(n)
    running = 0.0
    for lo in range(0, n, cfg.batch_size):
        idx = order[lo : lo + cfg.batch_size]
        probs = forward(model, _batch_tensor(volumes, idx, cfg.dtype))
        loss = bce_loss_batch(probs, labels[idx])
        model.zero_grad()
        loss.backward()
        adam_step(model, state)
        running += loss.item() * len(idx)
    return running / n


def train(cfg: TrainConfig, train_volumes, train_labels, eval_volumes, eval_labels,
          epoch_hook=None) -> TrainResult:
    """Deterministic epoch loop; a pure function of (cfg, dataset bytes).

    Shuffling is Fisher-Yates seeded by hash(seed, epoch); losses are
    reduced in index order.  The best epoch is the lowest evaluation loss
    with ties going to the earlier epoch.
    """
    train_labels = np.asarray(train_labels)
    eval_labels = np.asarray(eval_labels)
    if len(train_volumes) == 0 or len(eval_volumes) == 0:
        raise DatasetError("training requires non-empty train and eval splits")
    if len(set(train_labels.tolist())) < 2:
        raise DatasetError("training split contains a single class")

    model = build_model(cfg.model, cfg.seed, dtype=cfg.dtype)
    state = AdamState(model, lr=cfg.lr)
    curve = []
    best_epoch, best_eval, best_params = -1, np.inf, None
    for epoch in range(1, cfg.epochs + 1):
        train_loss = train_epoch(model, state, cfg, train_volumes, train_labels, epoch)
        eval_loss = _mean_loss(model, eval_volumes, eval_labels,
                               np.arange(len(eval_volumes)), cfg.batch_size, cfg.dtype)
        curve.append((epoch, train_loss, eval_loss))
        if eval_loss < best_eval:
            best_epoch, best_eval = epoch, eval_loss
            best_params = {k: p.data.copy() for k, p in model.params.items()}
        if epoch_hook is not None:
            epoch_hook(epoch, train_loss, eval_loss)
    return TrainResult(curve=curve, best_epoch=best_epoch, best_eval_loss=best_eval,
                       model=model, best_params=best_params)


def predict_probs(model: ModelInstance, volumes, batch_size: int = 16) -> np.ndarray:
    """Forward probabilities over a list of volumes, batched, in order."""
    out = []
    for lo in range(0, len(volumes), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(volumes)))
        probs = forward(model, _batch_tensor(volumes, idx, model.dtype))
        out.append(probs.data)
    return np.concatenate(out)


def write_curve(curve, path) -> None:
    lines = ["epoch,train_loss,eval_loss"]
    for epoch, tr, ev in curve:
        lines.append(f"{epoch},{tr:.17g},{ev:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# checkpoints: JSON manifest + flat little-endian blob
# --------------------------------------------------------------------------

_FORMAT = "volfuse-checkpoint-v1"
_DTYPE_TAGS = {np.dtype(np.float32): "<f4", np.dtype(np.float64): "<f8"}


def checkpoint_save(model: ModelInstance, stem, epoch: int = 0, metrics: dict | None = None,
                    params_override: dict | None = None) -> None:
    """Write ``<stem>.json`` and ``<stem>.bin``; round trips are bit-exact."""
    stem = Path(stem)
    tag = _DTYPE_TAGS[np.dtype(model.dtype)]
    index = []
    blobs = []
    offset = 0
    for name in sorted(model.params):
        arr = params_override[name] if params_override else model.params[name].data
        raw = np.ascontiguousarray(arr, dtype=np.dtype(tag)).tobytes()
        index.append({"name": name, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    blob = b"".join(blobs)
    manifest = {
        "format": _FORMAT,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "dtype": tag,
        "epoch": epoch,
        "metrics": metrics or {},
        "params": index,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    stem.with_suffix(".bin").write_bytes(blob)
    stem.with_suffix(".json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    )


def checkpoint_load(stem) -> tuple[ModelInstance, dict]:
    """Rebuild the model from a checkpoint; validates hash, sizes, shapes."""
    stem = Path(stem)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    blob = stem.with_suffix(".bin").read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointHashError(f"blob hash mismatch for {stem}")
    tag = manifest["dtype"]
    dtype = np.float32 if tag == "<f4" else np.float64
    config = ModelConfig.from_dict(manifest["config"])
    model = build_model(config, manifest["seed"], dtype=dtype)
    seen = set()
    for entry in manifest["params"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in model.params:
            raise CheckpointShapeError(f"checkpoint parameter {name!r} not in model")
        if model.params[name].shape != shape:
            raise CheckpointShapeError(
                f"parameter {name!r}: checkpoint shape {shape} vs model "
                f"{model.params[name].shape}"
            )
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(blob):
            raise CheckpointTruncatedError(
                f"blob length {len(blob)} too short for parameter {name!r} "
                f"(needs {hi} bytes)"
            )
        arr = np.frombuffer(blob[lo:hi], dtype=np.dtype(tag)).reshape(shape)
        if arr.size != int(np.prod(shape)):
            raise CheckpointTruncatedError(f"parameter {name!r} byte count mismatch")
        model.params[name].data = arr.astype(dtype, copy=True)
        seen.add(name)
    missing = set(model.params) - seen
    if missing:
        raise CheckpointShapeError(f"checkpoint is missing parameters: {sorted(missing)}")
    return model, manifest
