"""Manifests, image decoding and 128x128 preprocessing.

A manifest is a UTF-8 CSV whose header fixes the label schema:

* ``path,class``                       categorical class ids
* ``path,p0,p1,...,p{K-1}``            per-sample label distributions
* ``path,valence,arousal[,group]``     continuous affect in [-1, 1]

Image paths are resolved relative to the manifest's directory.
"""

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

IMAGE_SIZE = 128
SCHEMAS = ("categorical", "distribution", "dimensional")
NEUTRAL = "neutral"


class ManifestError(ValueError):
    pass


@dataclass
class Manifest:
    schema: str
    num_classes: int
    paths: list
    labels: np.ndarray
    groups: list = None
    source: str = ""

    def __len__(self):
        return len(self.paths)


@dataclass
class Dataset:
    """Decoded images [N, 3, 128, 128] in [0, 1] with labels in the manifest schema."""

    images: np.ndarray
    labels: np.ndarray
    schema: str
    num_classes: int = 0
    groups: list = field(default=None)

    def __len__(self):
        return len(self.images)

    def targets(self):
        """Soft targets for categorical schemas, raw (valence, arousal) otherwise."""
        if self.schema == "categorical":
            return np.eye(self.num_classes)[self.labels]
        return self.labels

    def class_ids(self):
        if self.schema == "categorical":
            return self.labels
        if self.schema == "distribution":
            return self.labels.argmax(axis=1)
        raise ValueError("dimensional labels have no class ids")

    def subset(self, idx):
        groups = None if self.groups is None else [self.groups[i] for i in idx]
        return Dataset(self.images[idx], self.labels[idx], self.schema, self.num_classes, groups)


def _schema_from_header(header):
    cols = [h.strip().lower() for h in header]
    if not cols or cols[0] != "path":
        raise ManifestError(f"manifest header must start with 'path', got {header}")
    rest = cols[1:]
    if rest == ["class"]:
        return "categorical", 0
    if rest[:2] == ["valence", "arousal"] and rest[2:] in ([], ["group"]):
        return "dimensional", 2
    if rest and rest == [f"p{i}" for i in range(len(rest))]:
        return "distribution", len(rest)
    raise ManifestError(f"unrecognized manifest header {header}")


def load_manifest(path, num_classes=None, neutral_class=False, check_files=True):
    """Parse and validate a manifest CSV.

    For categorical manifests ``num_classes`` defaults to ``max(class) + 1``.
    With ``neutral_class`` the literal label ``neutral`` maps to class
    ``num_classes - 1``, which is then reserved for it.
    """
    if not os.path.exists(path):
        raise ManifestError(f"manifest not found: {path}")
    base = os.path.dirname(os.path.abspath(path))
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ManifestError(f"{path}: empty manifest (header row is mandatory)")
    schema, k = _schema_from_header(rows[0])
    has_group = schema == "dimensional" and len(rows[0]) == 4
    paths, labels, groups, linenos = [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(rows[0]):
            raise ManifestError(f"{path}:{lineno}: expected {len(rows[0])} fields, got {len(row)}")
        img = row[0].strip()
        full = img if os.path.isabs(img) else os.path.join(base, img)
        if check_files and not os.path.exists(full):
            raise ManifestError(f"{path}:{lineno}: image file not found: {img}")
        paths.append(full)
        linenos.append(lineno)
        try:
            if schema == "categorical":
                cell = row[1].strip()
                if neutral_class and cell.lower() == NEUTRAL:
                    labels.append(-1)
                else:
                    labels.append(int(cell))
            else:
                labels.append([float(c) for c in row[1:1 + k]])
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: malformed label ({exc})") from None
        if has_group:
            groups.append(row[3].strip())
        if schema == "distribution":
            p = np.asarray(labels[-1])
            if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-4:
                raise ManifestError(f"{path}:{lineno}: label distribution sums to {p.sum():.6g}, not 1")
        elif schema == "dimensional":
            if any(not -1.0 <= v <= 1.0 for v in labels[-1]):
                raise ManifestError(f"{path}:{lineno}: valence/arousal {labels[-1]} outside [-1, 1]")
    if schema == "categorical":
        arr = np.asarray(labels, dtype=np.int64)
        neutral = arr == -1 if neutral_class else np.zeros(arr.shape, bool)
        if num_classes is None:
            num_classes = int(arr.max(initial=-1)) + 1 + (1 if neutral_class else 0)
        k = num_classes
        # the last class is reserved for neutral frames
        limit = k - 1 if neutral_class else k
        bad = np.flatnonzero(~neutral & ((arr < 0) | (arr >= limit)))
        if bad.size:
            raise ManifestError(f"{path}:{linenos[bad[0]]}: class {arr[bad[0]]} out of range [0, {limit})")
        arr[neutral] = k - 1
    else:
        arr = np.asarray(labels, dtype=np.float64).reshape(len(labels), k)
        if schema == "distribution" and num_classes is not None and num_classes != k:
            raise ManifestError(f"{path}: manifest has {k} classes, expected {num_classes}")
    return Manifest(schema, k, paths, arr, groups or None, source=path)


def resize_bilinear(img, size=(IMAGE_SIZE, IMAGE_SIZE)):
    """Bilinear resize of a [C, H, W] image using half-pixel centers (align_corners off)."""
    img = np.asarray(img)
    c, h, w = img.shape
    if h < 2 or w < 2:
        raise ValueError(f"image too small to resize: {h}x{w}")
    oh, ow = size

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, wy = axis(h, oh)
    x0, x1, wx = axis(w, ow)
    wy = wy[:, None].astype(img.dtype)
    wx = wx[None, :].astype(img.dtype)
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def preprocess(img):
    """Bring a [3, H, W] image in [0, 1] to the 128x128 network input."""
    img = np.asarray(img, dtype=np.float32)
    if img.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE):
        img = resize_bilinear(img)
    return np.clip(img, 0.0, 1.0)


def read_image(path):
    """Decode a PNG/PPM/PGM file into a [3, H, W] float32 array in [0, 1]."""
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "PPM", "PGM"):
                raise ValueError(f"unsupported image format {im.format}")
            rgb = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise ManifestError(f"cannot read image {path}: {exc}") from None
    return rgb.transpose(2, 0, 1)


def load_image(path):
    return preprocess(read_image(path))


def batch_iterator(manifest, batch_size, seed=0, shuffle=True):
    """Yield ``(images [N, 3, 128, 128], labels)`` batches; the last batch may be short."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(manifest))
    if shuffle:
        order = np.random.default_rng(seed).permutation(order)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        images = np.stack([load_image(manifest.paths[i]) for i in idx])
        yield images, manifest.labels[idx]


def load_dataset(manifest):
    """Decode every image of ``manifest`` into an in-memory :class:`Dataset`."""
    if isinstance(manifest, (str, os.PathLike)):
        manifest = load_manifest(manifest)
    images = np.stack([load_image(p) for p in manifest.paths]) if len(manifest) else \
        np.zeros((0, 3, IMAGE_SIZE, IMAGE_SIZE), np.float32)
    return Dataset(images, manifest.labels, manifest.schema, manifest.num_classes, manifest.groups)
