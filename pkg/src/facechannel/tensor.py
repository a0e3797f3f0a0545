"""Dense array primitives shared by the layers.

Tensors are plain row-major ``numpy.ndarray`` objects. float32 is the
compute default; float64 is used for gradient checking.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

_BINARY_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "max": np.maximum,
}
_UNARY_OPS = {"exp": np.exp, "log": np.log}


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


def as_tensor(data, dtype=None):
    """Return ``data`` as a C-contiguous array of ``dtype`` (float32 by default)."""
    return np.ascontiguousarray(data, dtype=dtype or DEFAULT_DTYPE)


def elementwise(op, a, b=None):
    """Apply a pointwise ``op`` to ``a`` (and ``b``, an equal-shape array or scalar).

    ``exp`` and ``log`` are unary and ignore ``b``.
    """
    a = np.asarray(a)
    if op in _UNARY_OPS:
        if op == "log":
            bad = np.flatnonzero(~(a > 0))
            if bad.size:
                idx = np.unravel_index(bad[0], a.shape)
                raise DomainError(f"log of non-positive value at index {tuple(map(int, idx))}")
        return _UNARY_OPS[op](a)
    if op not in _BINARY_OPS:
        raise ValueError(f"unknown elementwise op {op!r}")
    if b is None:
        raise ValueError(f"op {op!r} needs a second operand")
    b = np.asarray(b)
    if b.ndim != 0 and b.shape != a.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if op == "div":
        zero = np.flatnonzero(np.broadcast_to(b, a.shape) == 0)
        if zero.size:
            idx = np.unravel_index(zero[0], a.shape)
            raise DomainError(f"division by zero at index {tuple(map(int, idx))}")
    return _BINARY_OPS[op](a, b)


def matmul(a, b):
    """Matrix product of ``a`` [m, k] and ``b`` [k, n]."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def conv_output_size(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


def im2col(x, kernel, stride=1, pad=0):
    """Lower a [C, H, W] image into a [C*kh*kw, Hout*Wout] patch matrix.

    Column ``j`` is the (zero padded) receptive field of output position ``j``
    in row-major order; rows run over (channel, kernel row, kernel col).
    """
    kh, kw = kernel
    if kh < 1 or kw < 1 or stride < 1 or pad < 0:
        raise ValueError(f"invalid kernel {kernel}, stride {stride} or pad {pad}")
    c, h, w = x.shape
    hout = conv_output_size(h, kh, stride, pad)
    wout = conv_output_size(w, kw, stride, pad)
    if hout < 1 or wout < 1:
        raise ShapeError(f"non-positive output size: Hout={hout}, Wout={wout}")
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, : (hout - 1) * stride + 1 : stride, : (wout - 1) * stride + 1 : stride]
    # [C, Hout, Wout, kh, kw] -> [C, kh, kw, Hout, Wout]
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * kh * kw, hout * wout)


def col2im(cols, image_shape, kernel, stride=1, pad=0):
    """Adjoint of :func:`im2col`: scatter-add patch columns back onto the image."""
    kh, kw = kernel
    c, h, w = image_shape
    hout = conv_output_size(h, kh, stride, pad)
    wout = conv_output_size(w, kw, stride, pad)
    if cols.shape != (c * kh * kw, hout * wout):
        raise ShapeError(f"columns of shape {cols.shape} do not match image {image_shape}")
    cols = cols.reshape(c, kh, kw, hout, wout)
    out = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + stride * hout : stride, j : j + stride * wout : stride] += cols[:, i, j]
    if pad:
        out = out[:, pad:-pad, pad:-pad]
    return out
