"""FCW1 weight files.

Layout (little-endian): magic ``b"FCW1"``, u32 tensor count, then per tensor
a u16 name length, the UTF-8 name, u8 rank, u32 dims and raw float32 data.
Running statistics are stored alongside parameters.
"""

import re
import struct
from collections import OrderedDict

import numpy as np

from .model import POOL, DEFAULT_WIDTHS, ModelConfig, build_model

MAGIC = b"FCW1"


class WeightFileError(ValueError):
    pass


class BadMagicError(WeightFileError):
    pass


class TruncatedFileError(WeightFileError):
    pass


class WeightShapeError(WeightFileError):
    pass


def write_tensors(tensors, path):
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_tensors(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a FaceChannel weight file")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedFileError(f"{path}: truncated weight file (needed {n} bytes at offset {pos})")
        out = buf[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    tensors = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).copy()
    if pos != len(buf):
        raise WeightFileError(f"{path}: {len(buf) - pos} trailing bytes after last tensor")
    return tensors


def save_weights(model, path):
    write_tensors(model.state(), path)


def infer_config(tensors):
    """Reconstruct a ModelConfig from tensor shapes, assuming the default pool layout."""
    convs = sorted((int(m.group(1)), t) for name, t in tensors.items()
                   if (m := re.fullmatch(r"conv(\d+)\.weight", name)))
    if not convs:
        raise WeightFileError("weight file holds no conv tensors")
    widths = [t.shape[0] for _, t in convs]
    layout = []
    it = iter(widths)
    for w in DEFAULT_WIDTHS:
        layout.append(POOL if w == POOL else next(it, None))
    if None in layout or next(it, None) is not None:
        raise WeightFileError("cannot infer pool layout; pass an explicit ModelConfig")
    has_cat = "cat_head.weight" in tensors
    has_dim = "dim_head.weight" in tensors
    head = "both" if has_cat and has_dim else "categorical" if has_cat else "dimensional"
    return ModelConfig(
        in_channels=convs[0][1].shape[1],
        conv_block_widths=layout,
        kernel=convs[0][1].shape[2],
        dense_units=tensors["dense.weight"].shape[1],
        head=head,
        num_classes=tensors["cat_head.weight"].shape[1] if has_cat else 8,
        shunting_kernel=tuple(tensors["shunt.inhib_weight"].shape[2:]),
        enforce_budget=False,
    )


def load_state(model, tensors):
    """Copy ``tensors`` into ``model``; every model tensor must be present with its shape."""
    state = model.state()
    missing = [k for k in state if k not in tensors]
    if missing:
        raise WeightShapeError(f"shape mismatch: tensor {missing[0]!r} expected by the config "
                               f"is absent from the weight file")
    extra = [k for k in tensors if k not in state]
    if extra:
        raise WeightShapeError(f"shape mismatch: weight file tensor {extra[0]!r} has no place "
                               f"in the configured model")
    for name, dst in state.items():
        src = tensors[name]
        if src.shape != dst.shape:
            raise WeightShapeError(f"shape mismatch for {name!r}: file has {src.shape}, "
                                   f"config expects {dst.shape}")
        dst[...] = src
    for layer in model.layers:
        if hasattr(layer, "initialized"):
            layer.initialized = True
    return model


def load_weights(path, config=None):
    """Build a model from ``config`` (inferred from the file when omitted) and fill it."""
    tensors = read_tensors(path)
    config = config or infer_config(tensors)
    return load_state(build_model(config), tensors)
