"""Volume persistence, normalization, phantom generation, dataset splits.

Volumes live on disk as raw little-endian 32-bit floats (``.vol``) next to
a JSON sidecar carrying dims, dtype tag, label, subject id and seed.  The
two-class "atrophy phantom" stands in for real scans: an ellipsoidal head
of intensity 1 with an inner spherical cavity of intensity 0 whose radius
distribution separates the classes (class 1 gets the larger cavities),
plus seeded Gaussian noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, DatasetError
from .rng import Rng, derive_seed

DTYPE_TAG = "<f4"  # little-endian float32, fixed regardless of platform


@dataclass
class VolumeRecord:
    data: np.ndarray  # (D, H, W) float32
    label: int
    subject_id: str
    seed: int = 0


def save_volume(rec: VolumeRecord, stem) -> None:
    stem = Path(stem)
    arr = np.ascontiguousarray(rec.data, dtype=np.dtype(DTYPE_TAG))
    stem.with_suffix(".vol").write_bytes(arr.tobytes())
    header = {
        "dims": list(arr.shape),
        "dtype": DTYPE_TAG,
        "label": int(rec.label),
        "subject_id": rec.subject_id,
        "seed": int(rec.seed),
    }
    stem.with_suffix(".json").write_text(json.dumps(header, sort_keys=True) + "\n")


def load_volume(stem) -> VolumeRecord:
    stem = Path(stem)
    sidecar = stem.with_suffix(".json")
    if not sidecar.exists():
        raise DataFormatError(f"missing sidecar header {sidecar}")
    header = json.loads(sidecar.read_text())
    if header.get("dtype") != DTYPE_TAG:
        raise DataFormatError(
            f"bad dtype tag {header.get('dtype')!r} in {sidecar}, expected {DTYPE_TAG!r}"
        )
    dims = tuple(int(d) for d in header["dims"])
    if len(dims) != 3:
        raise DataFormatError(f"dims {dims} in {sidecar} are not 3-D")
    raw = stem.with_suffix(".vol").read_bytes()
    expected = int(np.prod(dims)) * 4
    if len(raw) != expected:
        raise DataFormatError(
            f"{stem.with_suffix('.vol')}: {len(raw)} bytes but dims {dims} need {expected}"
        )
    data = np.frombuffer(raw, dtype=np.dtype(DTYPE_TAG)).reshape(dims).copy()
    label = int(header["label"])
    if label not in (0, 1):
        raise DataFormatError(f"label {label} in {sidecar} must be 0 or 1")
    return VolumeRecord(data=data, label=label,
                        subject_id=header["subject_id"], seed=int(header.get("seed", 0)))


def normalize_intensity(data: np.ndarray) -> np.ndarray:
    """Per-volume z-score (population std); constant volumes become zeros."""
    data = np.asarray(data)
    mean = data.mean()
    std = data.std()
    if std < 1e-12:
        return np.zeros_like(data)
    return (data - mean) / std


# --------------------------------------------------------------------------
# phantoms
# --------------------------------------------------------------------------


@dataclass
class PhantomConfig:
    count_per_class: int = 75
    dims: tuple = (32, 32, 32)
    cavity_radius_nc: tuple = (2.0, 4.0)
    cavity_radius_ad: tuple = (6.0, 9.0)
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.cavity_radius_nc = tuple(float(r) for r in self.cavity_radius_nc)
        self.cavity_radius_ad = tuple(float(r) for r in self.cavity_radius_ad)
        if self.count_per_class < 1:
            raise ConfigError("count_per_class must be >= 1")
        if len(self.dims) != 3 or any(d < 4 for d in self.dims):
            raise ConfigError(f"dims must be three extents >= 4, got {self.dims}")
        for rng_ in (self.cavity_radius_nc, self.cavity_radius_ad):
            if not (0 < rng_[0] <= rng_[1]):
                raise ConfigError(f"bad cavity radius range {rng_}")
        if self.cavity_radius_ad[0] <= self.cavity_radius_nc[1]:
            raise ConfigError(
                "overlapping radius ranges: class-1 cavities "
                f"{self.cavity_radius_ad} must sit strictly above class-0 "
                f"{self.cavity_radius_nc}"
            )
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")

    @classmethod
    def full_scale(cls, seed: int = 0) -> "PhantomConfig":
        """110^3 preset matching the full-scale scan size."""
        return cls(dims=(110, 110, 110), cavity_radius_nc=(7.0, 14.0),
                   cavity_radius_ad=(21.0, 31.0), seed=seed)

    def to_dict(self) -> dict:
        return {
            "count_per_class": self.count_per_class,
            "dims": list(self.dims),
            "cavity_radius_nc": list(self.cavity_radius_nc),
            "cavity_radius_ad": list(self.cavity_radius_ad),
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
        }


def make_phantom(cfg: PhantomConfig, subject_index: int) -> VolumeRecord:
    """One phantom, a pure function of (cfg, cfg.seed, subject_index)."""
    label = 0 if subject_index < cfg.count_per_class else 1
    rng = Rng(derive_seed(cfg.seed, subject_index))
    d, h, w = cfg.dims
    lo, hi = cfg.cavity_radius_ad if label == 1 else cfg.cavity_radius_nc
    radius = float(rng.uniform(lo, hi, ()))
    center = np.array([d, h, w], dtype=np.float64) / 2.0
    center = center + rng.uniform(-0.03, 0.03, (3,)) * np.array([d, h, w])
    semi = 0.45 * np.array([d, h, w], dtype=np.float64)
    cavity_jitter = rng.uniform(-0.05, 0.05, (3,)) * np.array([d, h, w])

    zz, yy, xx = np.meshgrid(
        np.arange(d, dtype=np.float64),
        np.arange(h, dtype=np.float64),
        np.arange(w, dtype=np.float64),
        indexing="ij",
    )
    norm = (
        ((zz - center[0]) / semi[0]) ** 2
        + ((yy - center[1]) / semi[1]) ** 2
        + ((xx - center[2]) / semi[2]) ** 2
    )
    vol = (norm <= 1.0).astype(np.float64)
    cav = center + cavity_jitter
    dist2 = (zz - cav[0]) ** 2 + (yy - cav[1]) ** 2 + (xx - cav[2]) ** 2
    vol[dist2 <= radius**2] = 0.0
    if cfg.noise_sigma > 0:
        vol = vol + rng.normal((d, h, w), sigma=cfg.noise_sigma)
    return VolumeRecord(data=vol.astype(np.float32), label=label,
                        subject_id=f"subj{subject_index:04d}",
                        seed=derive_seed(cfg.seed, subject_index))


# --------------------------------------------------------------------------
# manifests and splits
# --------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    path: str  # relative to the manifest file
    label: int
    subject_id: str
    split: str = ""  # "train" / "test" once split


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)

    def __post_init__(self):
        ids = [e.subject_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DataFormatError("subject_ids in a manifest must be unique")

    def save(self, path) -> None:
        rows = [
            {"path": e.path, "label": e.label, "subject_id": e.subject_id, "split": e.split}
            for e in self.entries
        ]
        Path(path).write_text(json.dumps(rows, sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        rows = json.loads(Path(path).read_text())
        if not isinstance(rows, list):
            raise DataFormatError(f"manifest {path} must be a JSON list")
        return cls([ManifestEntry(**row) for row in rows])

    def subset(self, split: str) -> list:
        return [e for e in self.entries if e.split == split]


def generate_phantom_dataset(cfg: PhantomConfig, out_dir, threads: int = 1) -> DatasetManifest:
    """Write 2*count_per_class phantoms plus their manifest into out_dir.

    Each volume depends only on (cfg, seed, subject index), so any thread
    count produces bit-identical files.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = 2 * cfg.count_per_class
    indices = list(range(n))

    def write_one(i: int) -> ManifestEntry:
        rec = make_phantom(cfg, i)
        stem = out_dir / rec.subject_id
        save_volume(rec, stem)
        return ManifestEntry(path=f"{rec.subject_id}.vol", label=rec.label,
                             subject_id=rec.subject_id)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            entries = list(pool.map(write_one, indices))
    else:
        entries = [write_one(i) for i in indices]
    return DatasetManifest(entries)


def split_dataset(manifest: DatasetManifest, ratio: float, seed: int) -> DatasetManifest:
    """Seeded, per-class stratified, subject-level split."""
    if not 0 < ratio < 1:
        raise ConfigError(f"split ratio must be in (0,1), got {ratio}")
    by_class: dict[int, list[ManifestEntry]] = {0: [], 1: []}
    for e in manifest.entries:
        by_class[e.label].append(e)
    out = []
    for label, group in sorted(by_class.items()):
        if len(group) < 2:
            raise DatasetError(f"class {label} has {len(group)} subjects; need >= 2")
        order = Rng(derive_seed(seed, label)).shuffled_indices(len(group))
        n_train = int(len(group) * ratio)
        n_train = min(max(n_train, 1), len(group) - 1)  # both splits non-empty
        for rank, idx in enumerate(order):
            e = group[idx]
            out.append(ManifestEntry(path=e.path, label=e.label, subject_id=e.subject_id,
                                     split="train" if rank < n_train else "test"))
    out.sort(key=lambda e: e.subject_id)
    return DatasetManifest(out)


def write_pgm(image: np.ndarray, path) -> None:
    """8-bit binary PGM (P5), min-max scaled; constant images render mid-gray."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DataFormatError(f"PGM export needs a 2-D image, got shape {image.shape}")
    lo, hi = image.min(), image.max()
    if hi - lo < 1e-12:
        scaled = np.full(image.shape, 128, dtype=np.uint8)
    else:
        scaled = np.round(255.0 * (image - lo) / (hi - lo)).astype(np.uint8)
    h, w = image.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + scaled.tobytes())


def load_split(manifest_path, split: str, normalize: bool = True):
    """Volumes and labels of one split, in manifest order."""
    manifest_path = Path(manifest_path)
    manifest = DatasetManifest.load(manifest_path)
    volumes, labels = [], []
    for e in manifest.subset(split):
        rec = load_volume(manifest_path.parent / e.path)
        if rec.label != e.label:
            raise DataFormatError(
                f"manifest label {e.label} disagrees with sidecar {rec.label} for {e.path}"
            )
        arr = rec.data.astype(np.float64)
        volumes.append(normalize_intensity(arr) if normalize else arr)
        labels.append(rec.label)
    return volumes, np.asarray(labels, dtype=np.int64)
