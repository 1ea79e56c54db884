"""Deterministic procedural image datasets.

Classification images are parametric textures (oriented gratings, a
checkerboard, gaussian blobs, concentric rings) with random phase, jittered
frequency/orientation, a random colour tint and additive gaussian noise.
Segmentation images are a smooth background with textured rectangles and
disks painted on top; the mask records which texture owns each pixel.

Each split draws from its own child of the spec's ``SeedSequence``, so
splits never share a sample and regenerating a spec is bitwise identical.
Images are ``float32`` in channels-last layout ``(N, H, W, 3)``.
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

SPLITS = ("train", "val", "test")

# (kind, orientation in degrees, cycles per image)
CLASS_TEXTURES = (
    ("grating", 0.0, 3.0),
    ("grating", 90.0, 3.0),
    ("grating", 45.0, 3.0),
    ("grating", 135.0, 3.0),
    ("grating", 0.0, 7.0),
    ("checker", 0.0, 4.0),
    ("blobs", 0.0, 0.0),
    ("rings", 0.0, 3.0),
    ("grating", 90.0, 7.0),
    ("checker", 45.0, 3.0),
)

SEGMENT_TEXTURES = (
    ("grating", 0.0, 8.0),
    ("grating", 90.0, 8.0),
    ("checker", 0.0, 6.0),
    ("blobs", 0.0, 0.0),
    ("grating", 45.0, 8.0),
    ("checker", 45.0, 5.0),
    ("grating", 135.0, 8.0),
)


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "classification"
    num_classes: int = 8
    n_train: int = 2048
    n_val: int = 512
    n_test: int = 512
    resolution: int = 32
    seed: int = 0
    noise: float = 0.5
    jitter: float = 1.0

    def __post_init__(self):
        if self.kind not in ("classification", "segmentation"):
            raise DataError(f"unknown dataset kind {self.kind!r}")
        limit = len(CLASS_TEXTURES) if self.kind == "classification" else len(SEGMENT_TEXTURES) + 1
        if not 2 <= self.num_classes <= limit:
            raise DataError(f"{self.kind} supports 2..{limit} classes")

    def to_dict(self):
        return asdict(self)


def segmentation_spec(**kw):
    return DatasetSpec(**{"kind": "segmentation", "num_classes": 6, "n_train": 1024,
                          "n_val": 256, "n_test": 256, **kw})


@dataclass
class Split:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.images)

    def batches(self, batch_size, rng=None, drop_last=False):
        """Yield ``(images, labels)``; shuffled when ``rng`` is given."""
        n = len(self)
        order = rng.permutation(n) if rng is not None else np.arange(n)
        stop = n - n % batch_size if drop_last else n
        for i in range(0, stop, batch_size):
            idx = order[i:i + batch_size]
            yield self.images[idx], self.labels[idx]

    def image_batches(self, batch_size):
        for i in range(0, len(self), batch_size):
            yield self.images[i:i + batch_size]

    def subset(self, n):
        return Split(self.images[:n], self.labels[:n])


@dataclass
class Dataset:
    spec: DatasetSpec
    train: Split
    val: Split
    test: Split

    @property
    def num_classes(self):
        return self.spec.num_classes

    @property
    def task(self):
        return self.spec.kind

    def split(self, name):
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}")
        return getattr(self, name)


def _coords(res):
    y, x = np.mgrid[0:res, 0:res].astype(np.float64)
    return y, x


def texture(kind, angle, freq, rng, res, jitter=1.0):
    """One ``(res, res)`` pattern in roughly [-1, 1]."""
    y, x = _coords(res)
    theta = np.deg2rad(angle + jitter * rng.uniform(-10, 10))
    f = freq * (1.0 + jitter * rng.uniform(-0.15, 0.15))
    phase = rng.uniform(0, 2 * np.pi)
    if kind == "grating":
        return np.cos(2 * np.pi * f * (x * np.cos(theta) + y * np.sin(theta)) / res + phase)
    if kind == "checker":
        u = x * np.cos(theta) + y * np.sin(theta)
        v = -x * np.sin(theta) + y * np.cos(theta)
        phase2 = rng.uniform(0, 2 * np.pi)
        return np.tanh(3 * np.cos(2 * np.pi * f * u / res + phase)
                       * np.cos(2 * np.pi * f * v / res + phase2))
    if kind == "blobs":
        out = np.zeros((res, res))
        for _ in range(int(rng.integers(4, 8))):
            cy, cx = rng.uniform(0, res, size=2)
            s = res * rng.uniform(0.04, 0.08)
            out += np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * s * s))
        return 2 * np.clip(out, 0, 1) - 1
    if kind == "rings":
        cy, cx = rng.uniform(0.3 * res, 0.7 * res, size=2)
        r = np.sqrt((y - cy) ** 2 + (x - cx) ** 2)
        return np.cos(2 * np.pi * f * r / res + phase)
    raise DataError(f"unknown texture {kind!r}")


def _tint(pattern, rng, jitter):
    color = rng.uniform(0.4, 1.0, size=3) * rng.choice([-1.0, 1.0])
    contrast = 1.0 - 0.5 * jitter * rng.uniform()
    bias = jitter * rng.uniform(-0.3, 0.3, size=3)
    return pattern[..., None] * color * contrast + bias


def _classification_split(spec, n, rng):
    res = spec.resolution
    labels = rng.permutation(np.arange(n) % spec.num_classes)
    images = np.empty((n, res, res, 3), dtype=np.float32)
    for i, c in enumerate(labels):
        kind, angle, freq = CLASS_TEXTURES[c]
        img = _tint(texture(kind, angle, freq, rng, res, spec.jitter), rng, spec.jitter)
        img += spec.noise * rng.standard_normal(img.shape)
        images[i] = img
    return Split(images, labels.astype(np.int64))


def _segmentation_sample(spec, rng):
    """One image, its mask and the per-class pixel counts kept while painting."""
    res = spec.resolution
    y, x = _coords(res)
    bg = 0.3 * texture("grating", 0.0, 1.0, rng, res, 1.0)
    img = _tint(bg, rng, spec.jitter)
    mask = np.zeros((res, res), dtype=np.int64)
    counts = np.zeros(spec.num_classes, dtype=np.int64)
    counts[0] = res * res
    for _ in range(int(rng.integers(2, 5))):
        c = int(rng.integers(1, spec.num_classes))
        size = rng.uniform(0.25, 0.55) * res
        cy, cx = rng.uniform(0, res, size=2)
        if rng.uniform() < 0.5:
            region = (np.abs(y - cy) <= size / 2) & (np.abs(x - cx) <= size / 2)
        else:
            region = (y - cy) ** 2 + (x - cx) ** 2 <= (size / 2) ** 2
        kind, angle, freq = SEGMENT_TEXTURES[c - 1]
        patch = _tint(texture(kind, angle, freq, rng, res, spec.jitter), rng, spec.jitter)
        img[region] = patch[region]
        np.subtract.at(counts, mask[region], 1)
        counts[c] += int(region.sum())
        mask[region] = c
    img += spec.noise * rng.standard_normal(img.shape)
    return img, mask, counts


def _segmentation_split(spec, n, rng):
    res = spec.resolution
    images = np.empty((n, res, res, 3), dtype=np.float32)
    masks = np.empty((n, res, res), dtype=np.int64)
    counts = np.zeros(spec.num_classes, dtype=np.int64)
    for i in range(n):
        img, mask, c = _segmentation_sample(spec, rng)
        images[i], masks[i] = img, mask
        counts += c
    split = Split(images, masks)
    split.label_counts = counts
    return split


def generate(spec):
    """Build all three splits of ``spec``."""
    seeds = np.random.SeedSequence(spec.seed).spawn(len(SPLITS))
    make = _classification_split if spec.kind == "classification" else _segmentation_split
    sizes = (spec.n_train, spec.n_val, spec.n_test)
    splits = [make(spec, n, np.random.default_rng(s)) for n, s in zip(sizes, seeds)]
    return Dataset(spec, *splits)


def rotate90(images, k, masks=None):
    """Rotate ``(N, H, W, ...)`` arrays by ``k`` quarter turns in the image plane."""
    out = np.rot90(images, k, axes=(1, 2))
    if masks is None:
        return out
    return out, np.rot90(masks, k, axes=(1, 2))


def augment(images, rng, labels=None, pad=4, p_flip=0.0, rotate=False, crop=True):
    """Random crop after reflect padding, optional h/v mirroring and quarter turns.

    Mirroring and rotation are off by default: several classes differ only
    in orientation (0 vs 90 degrees, 45 vs 135 degrees), so those
    transforms would relabel the image. When ``labels`` is a per-pixel map
    it receives exactly the same transform.
    """
    images = np.array(images, copy=True)
    dense = labels is not None and np.ndim(labels) == 3
    masks = np.array(labels, copy=True) if dense else None
    n, h, w = images.shape[:3]
    if crop and pad > 0:
        ip = np.pad(images, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="reflect")
        mp = np.pad(masks, ((0, 0), (pad, pad), (pad, pad)), mode="reflect") if dense else None
        offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
        for i, (dy, dx) in enumerate(offs):
            images[i] = ip[i, dy:dy + h, dx:dx + w]
            if dense:
                masks[i] = mp[i, dy:dy + h, dx:dx + w]
    hflip = rng.uniform(size=n) < p_flip
    vflip = rng.uniform(size=n) < p_flip
    turns = rng.integers(0, 4, size=n) if rotate else np.zeros(n, dtype=np.int64)
    for i in range(n):
        if hflip[i]:
            images[i] = images[i, :, ::-1]
            if dense:
                masks[i] = masks[i, :, ::-1]
        if vflip[i]:
            images[i] = images[i, ::-1]
            if dense:
                masks[i] = masks[i, ::-1]
        if turns[i]:
            images[i] = np.rot90(images[i], turns[i], axes=(0, 1))
            if dense:
                masks[i] = np.rot90(masks[i], turns[i], axes=(0, 1))
    if labels is None:
        return images
    return images, (masks if dense else labels)


def spectrum_features(images):
    """Phase-invariant features: L2-normalised magnitude spectrum of the grey image."""
    grey = images.mean(axis=-1)
    grey = grey - grey.mean(axis=(1, 2), keepdims=True)
    mag = np.abs(np.fft.rfft2(grey)).reshape(len(images), -1)
    return mag / (np.linalg.norm(mag, axis=1, keepdims=True) + 1e-12)


def export_raw(dataset, path):
    """Dump every split as raw little-endian f32 tensors plus a JSON index."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name in SPLITS:
        split = dataset.split(name)
        for field_name, arr in (("images", split.images), ("labels", split.labels)):
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append({"name": f"{name}.{field_name}", "shape": list(arr.shape),
                            "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    (path / "tensors.bin").write_bytes(b"".join(chunks))
    index = {"spec": dataset.spec.to_dict(), "dtype": "float32-le", "tensors": entries}
    (path / "manifest.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return path
