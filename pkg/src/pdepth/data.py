"""Labeled datasets: synthetic generators, fixed label noise, IDX ingestion."""

import csv
import gzip
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .rng import generator

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Feature matrix with current (possibly noisy) and original labels.

    ``examples`` is float32 [n, d]; label arrays are int64 [n]. Arrays are
    read-only once constructed.
    """

    examples: np.ndarray
    labels: np.ndarray
    num_classes: int
    original_labels: np.ndarray = None
    noise_mask: np.ndarray = None
    descriptor: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.asarray(self.examples, dtype=np.float32)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ValueError(f"examples must be a non-empty 2-d matrix, got shape {x.shape}")
        y = np.asarray(self.labels, dtype=np.int64)
        orig = y if self.original_labels is None else np.asarray(self.original_labels, dtype=np.int64)
        mask = np.zeros(len(y), dtype=bool) if self.noise_mask is None else np.asarray(self.noise_mask, dtype=bool)
        n = x.shape[0]
        if not (len(y) == len(orig) == len(mask) == n):
            raise ValueError("label arrays must match the number of examples")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        for arr in (y, orig):
            if arr.min() < 0 or arr.max() >= self.num_classes:
                raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if np.any(mask != (y != orig)):
            raise ValueError("noise_mask must flag exactly the relabeled examples")
        object.__setattr__(self, "examples", _frozen(x))
        object.__setattr__(self, "labels", _frozen(y))
        object.__setattr__(self, "original_labels", _frozen(orig))
        object.__setattr__(self, "noise_mask", _frozen(mask))

    @property
    def n(self):
        return self.examples.shape[0]

    @property
    def dim(self):
        return self.examples.shape[1]

    def digest(self):
        import hashlib

        h = hashlib.sha256()
        for arr in (self.examples, self.labels, self.original_labels, self.noise_mask):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(str(self.num_classes).encode())
        return h.hexdigest()


@dataclass(frozen=True)
class SplitSpec:
    train_indices: np.ndarray
    val_indices: np.ndarray
    seed: int

    def __post_init__(self):
        tr = np.asarray(self.train_indices, dtype=np.int64)
        va = np.asarray(self.val_indices, dtype=np.int64)
        if np.intersect1d(tr, va).size:
            raise ValueError("train and validation indices overlap")
        object.__setattr__(self, "train_indices", _frozen(tr))
        object.__setattr__(self, "val_indices", _frozen(va))


def round_half_up(x):
    return int(np.floor(x + 0.5))


def _check_sizes(num_classes, per_class):
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    if per_class < 1:
        raise ValueError("per_class must be positive")


def blob_centers(num_classes, dim, center_scale, seed):
    """Class centers: scaled basis vectors when they fit, else random unit directions."""
    if num_classes <= dim:
        return center_scale * np.eye(num_classes, dim)
    g = generator(seed, "blob-centers").standard_normal((num_classes, dim))
    return center_scale * g / np.linalg.norm(g, axis=1, keepdims=True)


def gaussian_blobs(num_classes, per_class, dim, center_scale=5.0, sigma=1.0, seed=0):
    """Isotropic Gaussian clusters, ``per_class`` points each, class-major order.

    Centers are ``center_scale * e_c`` when ``num_classes <= dim`` and random unit
    directions scaled by ``center_scale`` otherwise. ``sigma == 0`` puts every
    point exactly on its center.
    """
    _check_sizes(num_classes, per_class)
    if dim < 1:
        raise ValueError("dim must be positive")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    centers = blob_centers(num_classes, dim, center_scale, seed)
    noise = generator(seed, "blobs").standard_normal((num_classes * per_class, dim))
    labels = np.repeat(np.arange(num_classes), per_class)
    x = centers[labels] + sigma * noise
    desc = dict(kind="gaussian_blobs", num_classes=num_classes, per_class=per_class, dim=dim,
                center_scale=float(center_scale), sigma=float(sigma), seed=int(seed))
    return Dataset(x, labels, num_classes, descriptor=desc)


def concentric_rings(num_classes, per_class, radius_gap=1.0, noise_sigma=0.1, seed=0):
    """2-d rings; class ``c`` sits at radius ``(c + 1) * radius_gap`` plus radial noise."""
    _check_sizes(num_classes, per_class)
    if radius_gap <= 0:
        raise ValueError("radius_gap must be positive")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    rng = generator(seed, "rings")
    n = num_classes * per_class
    labels = np.repeat(np.arange(num_classes), per_class)
    angle = rng.uniform(0.0, 2 * np.pi, n)
    radius = (labels + 1) * radius_gap + noise_sigma * rng.standard_normal(n)
    x = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
    desc = dict(kind="concentric_rings", num_classes=num_classes, per_class=per_class,
                radius_gap=float(radius_gap), noise_sigma=float(noise_sigma), seed=int(seed))
    return Dataset(x, labels, num_classes, descriptor=desc)


def concatenate(first, second):
    """Stack two datasets over a shared label space; narrower features are zero-padded."""
    dim = max(first.dim, second.dim)
    parts = []
    for ds in (first, second):
        x = np.zeros((ds.n, dim), dtype=np.float32)
        x[:, :ds.dim] = ds.examples
        parts.append(x)
    num_classes = max(first.num_classes, second.num_classes)
    return Dataset(
        np.concatenate(parts),
        np.concatenate([first.labels, second.labels]),
        num_classes,
        np.concatenate([first.original_labels, second.original_labels]),
        np.concatenate([first.noise_mask, second.noise_mask]),
        descriptor=dict(kind="concat", parts=[first.descriptor, second.descriptor]),
    )


def append_distractors(dataset, count, sigma, seed):
    """Append ``count`` feature columns of pure N(0, sigma^2) noise, independent of the label."""
    if count < 0 or sigma < 0:
        raise ValueError("count and sigma must be non-negative")
    noise = sigma * generator(seed, "distractors").standard_normal((dataset.n, count))
    desc = dict(dataset.descriptor)
    desc["distractors"] = dict(count=int(count), sigma=float(sigma), seed=int(seed))
    return Dataset(np.hstack([dataset.examples, noise.astype(np.float32)]), dataset.labels, dataset.num_classes,
                   dataset.original_labels, dataset.noise_mask, descriptor=desc)


def inject_label_noise(dataset, fraction, seed):
    """Relabel exactly ``round_half_up(fraction * n)`` examples to a different class.

    Indices are drawn without replacement; the new label is uniform over the
    other ``num_classes - 1`` classes, counted from the original label, which is
    kept in ``original_labels``.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"noise fraction must lie in [0, 1], got {fraction}")
    n = dataset.n
    count = round_half_up(fraction * n)
    rng = generator(seed, "label-noise")
    idx = rng.choice(n, size=count, replace=False)
    shift = rng.integers(1, dataset.num_classes, size=count)
    labels = dataset.labels.copy()
    labels[idx] = (dataset.original_labels[idx] + shift) % dataset.num_classes
    desc = dict(dataset.descriptor)
    desc["label_noise"] = dict(fraction=float(fraction), seed=int(seed), count=count)
    return Dataset(dataset.examples, labels, dataset.num_classes, dataset.original_labels,
                   labels != dataset.original_labels, descriptor=desc)


def make_split(n, val_fraction, seed):
    """Random train/validation partition of ``range(n)``; both halves sorted."""
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError("val_fraction must lie in [0, 1)")
    n_val = round_half_up(val_fraction * n)
    perm = generator(seed, "split").permutation(n)
    return SplitSpec(np.sort(perm[n_val:]), np.sort(perm[:n_val]), int(seed))


# -- IDX -------------------------------------------------------------------

def _read_bytes(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(buf, magic, name):
    if len(buf) < 8:
        return None
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise IdxFormatError(f"{name}: magic mismatch, expected 0x{magic:08x}, got 0x{got:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IdxFormatError(f"{name}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, buf[4:header])
    size = int(np.prod(dims))
    payload = buf[header:]
    if len(payload) < size:
        raise IdxFormatError(f"{name}: truncated payload, expected {size} bytes, got {len(payload)}")
    return np.frombuffer(payload[:size], dtype=np.uint8).reshape(dims)


def load_idx(path_images, path_labels, num_classes=None):
    """Read an IDX image/label pair (optionally gzipped); pixels scale to [0, 1]."""
    images = _parse_idx(_read_bytes(path_images), IDX_IMAGES_MAGIC, "images")
    if images is None:
        raise IdxFormatError("images: truncated header")
    labels = _parse_idx(_read_bytes(path_labels), IDX_LABELS_MAGIC, "labels")
    n_labels = 0 if labels is None else len(labels)
    if n_labels != images.shape[0]:
        raise IdxFormatError(f"count mismatch: {images.shape[0]} images, {n_labels} labels")
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = max(2, int(labels.max()) + 1)
    if labels.max() >= num_classes:
        raise IdxFormatError(f"label {labels.max()} outside declared {num_classes} classes")
    x = images.reshape(images.shape[0], -1).astype(np.float32) / 255.0
    desc = dict(kind="idx", images=str(path_images), labels=str(path_labels), num_classes=num_classes)
    return Dataset(x, labels, num_classes, descriptor=desc)


def write_idx(path_images, path_labels, images, labels):
    images = np.asarray(images, dtype=np.uint8)
    with open(path_images, "wb") as f:
        f.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        f.write(struct.pack(">III", *images.shape))
        f.write(images.tobytes())
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path_labels, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def csv_text(dataset):
    """Header ``id,label,original_label,noisy,f0..f{d-1}``; features as round-trip reprs."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "label", "original_label", "noisy"] + [f"f{j}" for j in range(dataset.dim)])
    for i in range(dataset.n):
        w.writerow([i, int(dataset.labels[i]), int(dataset.original_labels[i]),
                    int(dataset.noise_mask[i])] + [repr(float(v)) for v in dataset.examples[i]])
    return buf.getvalue()


def write_csv(dataset, path):
    with open(path, "w", newline="") as f:
        f.write(csv_text(dataset))
