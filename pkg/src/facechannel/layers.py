"""Differentiable layers with explicit forward and reverse-mode backward passes.

Every layer follows the same protocol: ``forward(x)`` caches what the
backward pass needs, ``backward(dout)`` accumulates parameter gradients into
``grads`` and returns the gradient with respect to the input.
"""

import numpy as np

from .tensor import ShapeError, col2im, conv_output_size, im2col, matmul

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
SHUNT_EPS = 1e-4


class UninitializedStatisticsError(RuntimeError):
    pass


class Layer:
    kind = "layer"

    def __init__(self, name=""):
        self.name = name
        self.params = {}
        self.grads = {}
        self.buffers = {}
        self.training = True
        self._cache = None

    def train(self, mode=True):
        self.training = mode

    def eval(self):
        self.training = False

    def zero_grad(self):
        for key, p in self.params.items():
            self.grads[key] = np.zeros_like(p)

    def _init_grads(self):
        self.zero_grad()

    def _cached(self):
        if self._cache is None:
            raise RuntimeError(f"{self.kind} {self.name!r}: backward called before forward")
        return self._cache

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def __repr__(self):
        shapes = ", ".join(f"{k}={v.shape}" for k, v in self.params.items())
        return f"{type(self).__name__}({self.name!r}{', ' + shapes if shapes else ''})"


def he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _conv_forward(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    f, wc, kh, kw = w.shape
    if c != wc:
        raise ShapeError(f"input has {c} channels but weights expect {wc} (weights {w.shape})")
    hout = conv_output_size(h, kh, stride, pad)
    wout = conv_output_size(wd, kw, stride, pad)
    if hout < 1 or wout < 1:
        raise ShapeError(f"non-positive output size: Hout={hout}, Wout={wout}")
    w2 = w.reshape(f, -1)
    out = np.empty((n, f, hout, wout), dtype=np.result_type(x, w))
    for i in range(n):
        out[i] = matmul(w2, im2col(x[i], (kh, kw), stride, pad)).reshape(f, hout, wout)
    if b is not None:
        out += b[None, :, None, None]
    return out


def _conv_backward(x, w, dout, stride, pad):
    """Return (dx, dw, db) for a cross-correlation. Patches are rebuilt, not cached."""
    n = x.shape[0]
    f, c, kh, kw = w.shape
    w2 = w.reshape(f, -1)
    dx = np.empty_like(x)
    dw = np.zeros_like(w2)
    for i in range(n):
        cols = im2col(x[i], (kh, kw), stride, pad)
        d = dout[i].reshape(f, -1)
        dw += matmul(d, cols.T)
        dx[i] = col2im(matmul(w2.T, d), x.shape[1:], (kh, kw), stride, pad)
    return dx, dw.reshape(w.shape), dout.sum(axis=(0, 2, 3))


def conv2d(x, w, b=None, stride=1, pad=0):
    """Functional cross-correlation of [N, C, H, W] input with [F, C, kh, kw] filters."""
    return _conv_forward(x, w, b, stride, pad)


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, in_channels, out_channels, kernel=3, stride=1, pad=1,
                 rng=None, dtype=np.float32, name="conv"):
        super().__init__(name)
        kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kh * kw
        self.stride = stride
        self.pad = pad
        self.params["weight"] = he_normal(rng, (out_channels, in_channels, kh, kw), fan_in, dtype)
        self.params["bias"] = np.zeros(out_channels, dtype=dtype)
        self._init_grads()

    def forward(self, x):
        self._cache = x
        return _conv_forward(x, self.params["weight"], self.params["bias"], self.stride, self.pad)

    def backward(self, dout):
        x = self._cached()
        dx, dw, db = _conv_backward(x, self.params["weight"], dout, self.stride, self.pad)
        self.grads["weight"] += dw
        self.grads["bias"] += db
        return dx


class MaxPool2D(Layer):
    """2x2 max pooling with stride 2. Ties route gradient to the first element."""

    kind = "pool"

    def __init__(self, name="pool"):
        super().__init__(name)

    def forward(self, x):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"max-pool needs even spatial dims, got {h}x{w}")
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(n, c, h // 2, w // 2, 4)
        arg = win.argmax(axis=-1)
        self._cache = (x.shape, arg)
        return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        shape, arg = self._cached()
        n, c, h, w = shape
        dwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=dout.dtype)
        np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=-1)
        dwin = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return dwin.reshape(shape)

    def tied_mask(self, x, tol=0.0):
        """Boolean mask over ``x`` marking elements of windows whose top two values tie."""
        n, c, h, w = x.shape
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        win = np.sort(win.reshape(n, c, h // 2, w // 2, 4), axis=-1)
        tied = (win[..., 3] - win[..., 2]) <= tol
        return np.repeat(np.repeat(tied, 2, axis=2), 2, axis=3)


class BatchNorm2D(Layer):
    """Per-channel batch normalization over (N, H, W).

    When ``frozen`` is set the layer behaves as in eval mode even while the
    model trains, so its running statistics stay untouched.
    """

    kind = "batchnorm"

    def __init__(self, channels, eps=BN_EPS, momentum=BN_MOMENTUM, dtype=np.float32, name="bn"):
        super().__init__(name)
        self.eps = eps
        self.momentum = momentum
        self.frozen = False
        self.initialized = False
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)
        self._init_grads()

    def forward(self, x):
        gamma = self.params["gamma"][None, :, None, None]
        beta = self.params["beta"][None, :, None, None]
        if self.training and not self.frozen:
            n, _, h, w = x.shape
            if n * h * w < 2:
                raise ValueError("batch norm in train mode needs at least 2 values per channel")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = self.momentum
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm[...] = m * rm + (1 - m) * mean
            rv[...] = m * rv + (1 - m) * var
            self.initialized = True
        else:
            if not self.initialized:
                raise UninitializedStatisticsError(
                    f"{self.name}: uninitialized running statistics (run a train-mode pass first)")
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (x_hat, inv_std, self.training and not self.frozen)
        return (gamma * x_hat + beta).astype(x.dtype, copy=False)

    def backward(self, dout):
        x_hat, inv_std, batch_stats = self._cached()
        self.grads["gamma"] += (dout * x_hat).sum(axis=(0, 2, 3))
        self.grads["beta"] += dout.sum(axis=(0, 2, 3))
        scale = (self.params["gamma"] * inv_std)[None, :, None, None]
        if not batch_stats:
            return dout * scale
        m = dout.shape[0] * dout.shape[2] * dout.shape[3]
        dsum = dout.sum(axis=(0, 2, 3), keepdims=True)
        dxh = (dout * x_hat).sum(axis=(0, 2, 3), keepdims=True)
        return scale * (dout - dsum / m - x_hat * dxh / m)


class Dropout(Layer):
    """Inverted dropout. Needs ``rng`` (a numpy Generator) before a train-mode pass."""

    kind = "dropout"

    def __init__(self, rate=0.5, name="dropout"):
        super().__init__(name)
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = None
        self.fix_mask = False
        self._mask = None

    def forward(self, x):
        if not self.training or self.rate == 0:
            self._cache = None
            return x
        if not (self.fix_mask and self._mask is not None and self._mask.shape == x.shape):
            if self.rng is None:
                raise RuntimeError(f"{self.name}: no random generator set for train mode")
            keep = self.rng.random(x.shape) >= self.rate
            self._mask = keep.astype(x.dtype) / x.dtype.type(1 - self.rate)
        self._cache = self._mask
        return x * self._mask

    def backward(self, dout):
        if self._cache is None:
            return dout
        return dout * self._cache


class ReLU(Layer):
    kind = "relu"

    def __init__(self, name="relu"):
        super().__init__(name)

    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, dout):
        return dout * self._cached()


def relu(x):
    return np.maximum(x, 0)


def softmax(x):
    """Row-wise softmax of an [N, K] array, stable under large inputs."""
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class Softmax(Layer):
    kind = "softmax"

    def __init__(self, name="softmax"):
        super().__init__(name)

    def forward(self, x):
        p = softmax(x)
        self._cache = p
        return p

    def backward(self, dout):
        p = self._cached()
        return p * (dout - (dout * p).sum(axis=1, keepdims=True))


def softplus(x):
    return np.logaddexp(0, x)


def sigmoid(x):
    return 0.5 * (1 + np.tanh(0.5 * x))


class Shunting(Layer):
    """Shunting inhibition: ``S = u / (softplus(a) + relu(conv(u, W_inh)) + eps)``.

    The inhibitory field is a bias-free same-padding convolution over ``u``;
    ``a`` holds one unconstrained passive decay per channel.
    """

    kind = "shunting"

    def __init__(self, channels, kernel=3, rng=None, dtype=np.float32, name="shunt"):
        super().__init__(name)
        kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"inhibitory kernel must be odd for same padding, got {kh}x{kw}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kernel = (kh, kw)
        self.params["inhib_weight"] = (rng.standard_normal((channels, channels, kh, kw)) * 0.01).astype(dtype)
        # softplus(0.5413) ~= 1, so the layer starts close to pass-through
        self.params["decay"] = np.full(channels, 0.5413, dtype=dtype)
        self._init_grads()

    def _pad(self):
        return self.kernel[0] // 2

    def forward(self, u):
        c = u.shape[1]
        if c != self.params["decay"].shape[0]:
            raise ShapeError(f"input has {c} channels but decay has {self.params['decay'].shape[0]}")
        if self.kernel[0] != self.kernel[1]:
            raise ShapeError("inhibitory kernel must be square")
        pre = _conv_forward(u, self.params["inhib_weight"], None, 1, self._pad())
        inhib = np.maximum(pre, 0)
        denom = softplus(self.params["decay"])[None, :, None, None] + inhib + SHUNT_EPS
        self._cache = (u, pre, denom)
        return (u / denom).astype(u.dtype, copy=False)

    def backward(self, dout):
        u, pre, denom = self._cached()
        du = dout / denom
        dden = -dout * u / (denom * denom)
        self.grads["decay"] += (dden.sum(axis=(0, 2, 3)) * sigmoid(self.params["decay"])).astype(
            self.grads["decay"].dtype)
        dpre = dden * (pre > 0)
        du_inh, dw, _ = _conv_backward(u, self.params["inhib_weight"], dpre, 1, self._pad())
        self.grads["inhib_weight"] += dw
        return du + du_inh


def shunting_forward(u, inhib_weight, decay):
    """Functional form of :class:`Shunting` for a given weight set."""
    layer = Shunting(decay.shape[0], kernel=inhib_weight.shape[2:], dtype=u.dtype)
    layer.params["inhib_weight"] = inhib_weight
    layer.params["decay"] = decay
    return layer.forward(u)


class Flatten(Layer):
    kind = "flatten"

    def __init__(self, name="flatten"):
        super().__init__(name)

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._cached())


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features, rng=None, dtype=np.float32, name="dense"):
        super().__init__(name)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = he_normal(rng, (in_features, out_features), in_features, dtype)
        self.params["bias"] = np.zeros(out_features, dtype=dtype)
        self._init_grads()

    def forward(self, x):
        d = self.params["weight"].shape[0]
        if x.ndim != 2 or x.shape[1] != d:
            raise ShapeError(f"dense layer expects [N, {d}] input, got {x.shape}")
        self._cache = x
        return matmul(x, self.params["weight"]) + self.params["bias"]

    def backward(self, dout):
        x = self._cached()
        self.grads["weight"] += matmul(x.T, dout)
        self.grads["bias"] += dout.sum(axis=0)
        return matmul(dout, self.params["weight"].T)
