"""Synthetic colored-blob images for smoke tests and demos."""

import csv
import os

import numpy as np
from PIL import Image

from .data import IMAGE_SIZE, Dataset

PALETTE = np.array([
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.1],
    [0.1, 0.2, 0.9],
    [0.9, 0.9, 0.1],
    [0.8, 0.1, 0.8],
    [0.1, 0.9, 0.9],
    [0.6, 0.4, 0.2],
    [0.5, 0.5, 0.5],
])


def blob_image(color, rng, size=IMAGE_SIZE, noise=0.05):
    """One [3, size, size] image: a soft disc of ``color`` on a noisy dark background."""
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = rng.uniform(0.3, 0.7, 2) * size
    r = rng.uniform(0.15, 0.3) * size
    disc = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (r * r)) ** 2)
    img = 0.2 + noise * rng.standard_normal((3, size, size))
    img = img * (1 - disc) + np.asarray(color)[:, None, None] * disc
    return np.clip(img, 0, 1).astype(np.float32)


def blob_dataset(n, num_classes=2, seed=0, palette_offset=0, schema="categorical"):
    """Balanced colored-blob dataset; class ``c`` uses palette entry ``c + palette_offset``.

    With ``schema="dimensional"`` labels are (valence, arousal) read off the
    blob color: red minus blue, and brightness.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    colors = PALETTE[(labels + palette_offset) % len(PALETTE)]
    if schema == "dimensional":
        colors = rng.uniform(0.1, 0.9, (n, 3))
    images = np.stack([blob_image(c, rng) for c in colors])
    if schema == "dimensional":
        va = np.stack([colors[:, 0] - colors[:, 2], 2 * colors.mean(axis=1) - 1], axis=1)
        return Dataset(images, np.clip(va, -1, 1), "dimensional", 2)
    if schema == "distribution":
        dist = np.full((n, num_classes), 0.1 / max(num_classes - 1, 1))
        dist[np.arange(n), labels] = 0.9
        return Dataset(images, dist, "distribution", num_classes)
    return Dataset(images, labels.astype(np.int64), "categorical", num_classes)


def write_manifest(dataset, directory, name="manifest.csv", image_dir="images"):
    """Write ``dataset`` as PNG files plus a manifest CSV; returns the manifest path."""
    os.makedirs(os.path.join(directory, image_dir), exist_ok=True)
    path = os.path.join(directory, name)
    stem = os.path.splitext(name)[0]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if dataset.schema == "categorical":
            w.writerow(["path", "class"])
        elif dataset.schema == "distribution":
            w.writerow(["path"] + [f"p{i}" for i in range(dataset.num_classes)])
        else:
            w.writerow(["path", "valence", "arousal"])
        for i, img in enumerate(dataset.images):
            rel = f"{image_dir}/{stem}_{i:04d}.png"
            pixels = np.round(img.transpose(1, 2, 0) * 255).astype(np.uint8)
            Image.fromarray(pixels).save(os.path.join(directory, rel))
            label = dataset.labels[i]
            w.writerow([rel] + ([int(label)] if np.ndim(label) == 0 else [repr(float(v)) for v in label]))
    return path
