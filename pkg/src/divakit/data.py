"""Datasets: IDX (MNIST-format) ingestion, seeded synthetic gratings, filtering."""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .nn import predict

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class DataError(ValueError):
    pass


class EmptyValidationError(DataError):
    pass


@dataclass
class Dataset:
    id: str
    inputs: np.ndarray  # (n, H, W, C) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    split: str = "train"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise DataError(f"{self.id}: {len(self.inputs)} inputs but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    @property
    def xy(self):
        return self.inputs, self.labels

    def hashes(self):
        """Per-sample content hash (pixels and label)."""
        return [hashlib.sha1(x.tobytes() + int(y).to_bytes(8, "little")).hexdigest()
                for x, y in zip(self.inputs, self.labels)]

    def subset(self, idx, split=None, **prov):
        idx = np.asarray(idx)
        if idx.size == 0:
            idx = idx.astype(np.intp)
        return Dataset(self.id, self.inputs[idx], self.labels[idx], split or self.split,
                       dict(self.provenance, **prov))


def check_disjoint(*datasets):
    """Raise DataError if any two datasets share a sample."""
    seen = {}
    for ds in datasets:
        for h in ds.hashes():
            if h in seen and seen[h] is not ds:
                raise DataError(f"sample overlap between splits {seen[h].split!r} and {ds.split!r}")
            seen[h] = ds


# ------------------------------------------------------------------------ IDX


def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def _read_idx(path, magic):
    with _open(path) as f:
        data = f.read()
    if len(data) < 8:
        raise DataError(f"{path}: truncated IDX header")
    got = struct.unpack(">I", data[:4])[0]
    if got != magic:
        raise DataError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    if len(data) < 4 + 4 * ndim:
        raise DataError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", data[4 : 4 + 4 * ndim])
    body = data[4 + 4 * ndim :]
    count = int(np.prod(dims))
    if len(body) < count:
        raise DataError(f"{path}: truncated payload ({len(body)} of {count} bytes)")
    return np.frombuffer(body[:count], dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, split="train", dataset_id=None):
    """Load an IDX ubyte image/label file pair; pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES)
    labels = _read_idx(labels_path, IDX_LABELS)
    if len(images) != len(labels):
        raise DataError(f"label count {len(labels)} != image count {len(images)}")
    inputs = (images.astype(np.float32) / np.float32(255))[..., None]
    return Dataset(dataset_id or str(images_path), inputs, labels.astype(np.int64), split,
                   {"source": "idx", "images": str(images_path), "labels": str(labels_path)})


def write_idx(images_path, labels_path, images_u8, labels):
    """Write uint8 images ``(n, H, W)`` and labels as an IDX pair."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES, *images_u8.shape))
        f.write(images_u8.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS, len(labels)))
        f.write(labels.tobytes())


# ------------------------------------------------------------------ synthetic


def synth_dataset(seed, n, classes=10, size=28, noise=0.08, jitter_deg=4.0, contrast=(0.06, 0.12), split="train"):
    """Seeded oriented-grating images, one orientation per class.

    Each image is a sinusoidal grating at angle ``180 * k / classes`` degrees
    (plus Gaussian angle jitter), random phase and contrast, and additive
    pixel noise, clipped to [0, 1]. Class counts differ by at most one.
    """
    if classes < 2:
        raise DataError("need at least two classes")
    if n < classes:
        raise DataError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    theta = np.pi * labels / classes + np.deg2rad(jitter_deg) * rng.standard_normal(n)
    freq = 2 * np.pi * (3.0 + 0.5 * (labels % 3)) / size
    phase = rng.uniform(0, 2 * np.pi, n)
    contrast = rng.uniform(contrast[0], contrast[1], n)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) - (size - 1) / 2
    proj = np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy
    img = 0.5 + contrast[:, None, None] * np.sin(freq[:, None, None] * proj + phase[:, None, None])
    img += noise * rng.standard_normal(img.shape)
    inputs = np.clip(img, 0, 1).astype(np.float32)[..., None]
    return Dataset(f"synth-{seed}", inputs, labels.astype(np.int64), split,
                   {"source": "synth", "seed": seed, "n": n, "classes": classes})


def synth_splits(seed, n_train, n_transfer, n_val, classes=10, **kw):
    """Train / transfer / validation sets from independent seeds, checked disjoint."""
    ss = np.random.SeedSequence(seed)
    s_train, s_transfer, s_val = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    train = synth_dataset(s_train, n_train, classes, split="train", **kw)
    transfer = synth_dataset(s_transfer, n_transfer, classes, split="transfer", **kw)
    val = synth_dataset(s_val, n_val, classes, split="validation", **kw)
    check_disjoint(train, transfer, val)
    return train, transfer, val


# ------------------------------------------------------------------ filtering


def filter_correct(models, dataset: Dataset):
    """Keep the samples every model classifies correctly.

    ``models`` is a ModelPair or a sequence of models. The retention ratio is
    recorded in the returned dataset's provenance.
    """
    if len(dataset) == 0:
        raise DataError("cannot filter an empty dataset")
    if hasattr(models, "original"):
        models = [models.original, models.adapted]
    keep = np.ones(len(dataset), dtype=bool)
    for m in models:
        keep &= predict(m, dataset.inputs) == dataset.labels
    if not keep.any():
        raise EmptyValidationError(f"{dataset.id}: no sample is classified correctly by every model")
    return dataset.subset(np.flatnonzero(keep), retention=float(keep.mean()))
