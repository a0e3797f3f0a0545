import numpy as np
import pytest

from facechannel.model import ModelConfig
from facechannel.synthetic import blob_dataset, write_manifest

TINY_WIDTHS = [4, 4, "P", 4, 4, "P", 8, 8, 8, "P", 8, 8, 8, "P"]


def tiny_config(**kw):
    """Full 10-conv / 4-pool topology with narrow layers, for fast tests."""
    base = dict(conv_block_widths=list(TINY_WIDTHS), dense_units=16, num_classes=2, dropout_rate=0.1,
                enforce_budget=False)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def blob_manifests(tmp_path):
    """Small categorical train/val manifests on disk plus a tiny-model config file."""
    train = write_manifest(blob_dataset(8, 2, seed=0), tmp_path, "train.csv")
    val = write_manifest(blob_dataset(6, 2, seed=1), tmp_path, "val.csv")
    dim = write_manifest(blob_dataset(6, seed=2, schema="dimensional"), tmp_path, "dim.csv")
    cfg = tmp_path / "tiny.toml"
    cfg.write_text(
        "[model]\n"
        'conv_block_widths = [4, 4, "P", 4, 4, "P", 8, 8, 8, "P", 8, 8, 8, "P"]\n'
        "dense_units = 16\nnum_classes = 2\ndropout_rate = 0.1\nenforce_budget = false\n\n"
        "[train]\nbatch_size = 4\n")
    return {"train": train, "val": val, "dim": dim, "config": str(cfg), "dir": tmp_path}
