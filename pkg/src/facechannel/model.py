"""FaceChannel topology: ten 3x3 conv layers in four pooled blocks, a shunting
inhibition field on the last conv output, a dense layer and one or two heads.
"""

import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .layers import (
    BatchNorm2D,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    MaxPool2D,
    ReLU,
    Shunting,
    softmax,
)
from .tensor import ShapeError

log = logging.getLogger(__name__)

POOL = "P"
DEFAULT_WIDTHS = (16, 16, POOL, 32, 32, POOL, 64, 64, 64, POOL, 128, 128, 128, POOL)
HEADS = ("categorical", "dimensional", "both")
PARAM_TARGET = 2_000_000
PARAM_TOLERANCE = 0.15


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    input_size: int = 128
    in_channels: int = 3
    conv_block_widths: list = field(default_factory=lambda: list(DEFAULT_WIDTHS))
    kernel: int = 3
    dense_units: int = 200
    head: str = "categorical"
    num_classes: int = 8
    dropout_rate: float = 0.5
    shunting_kernel: tuple = (3, 3)
    seed: int = 0
    enforce_budget: bool = True

    @property
    def conv_widths(self):
        return [w for w in self.conv_block_widths if w != POOL]

    @property
    def n_pools(self):
        return sum(1 for w in self.conv_block_widths if w == POOL)

    @property
    def final_spatial(self):
        return self.input_size // 2 ** self.n_pools

    def violations(self):
        problems = []
        if len(self.conv_widths) != 10:
            problems.append(f"expected exactly 10 convolutional layers, got {len(self.conv_widths)}")
        if self.n_pools != 4:
            problems.append(f"expected exactly 4 pool markers, got {self.n_pools}")
        if self.conv_block_widths and self.conv_block_widths[0] == POOL:
            problems.append("a pool marker cannot precede the first convolution")
        if any(w != POOL and (not isinstance(w, int) or w < 1) for w in self.conv_block_widths):
            problems.append("conv widths must be positive integers")
        if self.input_size != 128:
            problems.append(f"input size must be 128x128, got {self.input_size}")
        elif self.n_pools == 4 and self.final_spatial != 8:
            problems.append(f"final spatial size must be 8x8, got {self.final_spatial}")
        if self.head not in HEADS:
            problems.append(f"head must be one of {HEADS}, got {self.head!r}")
        if self.head != "dimensional" and self.num_classes < 2:
            problems.append("categorical head needs at least 2 classes")
        if self.dense_units < 1:
            problems.append("dense_units must be positive")
        if not 0 <= self.dropout_rate < 1:
            problems.append(f"dropout rate must be in [0, 1), got {self.dropout_rate}")
        if not problems and self.enforce_budget:
            n = count_parameters(self)
            if abs(n - PARAM_TARGET) > PARAM_TOLERANCE * PARAM_TARGET:
                problems.append(f"{n} trainable parameters is outside 2M +/- 15%")
        return problems

    def validate(self):
        problems = self.violations()
        if problems:
            raise ConfigError("invalid ModelConfig: " + "; ".join(problems))

    def to_dict(self):
        d = asdict(self)
        d["shunting_kernel"] = list(self.shunting_kernel)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if "shunting_kernel" in d:
            k = d["shunting_kernel"]
            d["shunting_kernel"] = (k, k) if isinstance(k, int) else tuple(k)
        if "conv_block_widths" in d:
            d["conv_block_widths"] = [POOL if str(w).upper() == POOL else int(w)
                                      for w in d["conv_block_widths"]]
        return cls(**d)


def head_sizes(config):
    sizes = {}
    if config.head in ("categorical", "both"):
        sizes["cat_head"] = config.num_classes
    if config.head in ("dimensional", "both"):
        sizes["dim_head"] = 2
    return sizes


def count_parameters(config):
    """Closed-form trainable parameter count: conv, batch norm, shunting, dense and heads."""
    k = config.kernel
    total = 0
    c = config.in_channels
    for f in config.conv_widths:
        total += f * c * k * k + f  # conv weight + bias
        total += 2 * f  # batch norm gamma, beta
        c = f
    kh, kw = config.shunting_kernel
    total += c * c * kh * kw + c  # inhibitory field + decay
    flat = c * config.final_spatial ** 2
    total += flat * config.dense_units + config.dense_units
    for size in head_sizes(config).values():
        total += config.dense_units * size + size
    return total


class Model:
    """An instantiated FaceChannel network.

    ``forward`` returns a dict keyed by head: ``"categorical"`` holds class
    probabilities, ``"dimensional"`` holds (valence, arousal) predictions.
    """

    def __init__(self, config, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(config.seed)
        self.layers = []
        # freezable units, in order; each is a list of parameterized layers
        self.units = []
        c = config.in_channels
        conv_i = pool_i = 0
        widths = config.conv_block_widths
        n_conv = len(config.conv_widths)
        for pos, w in enumerate(widths):
            if w == POOL:
                pool_i += 1
                self.layers.append(MaxPool2D(name=f"pool{pool_i}"))
                self.layers.append(Dropout(config.dropout_rate, name=f"dropout{pool_i}"))
                continue
            conv_i += 1
            conv = Conv2D(c, w, config.kernel, 1, config.kernel // 2, rng, dtype, name=f"conv{conv_i}")
            bn = BatchNorm2D(w, dtype=dtype, name=f"bn{conv_i}")
            self.layers += [conv, bn, ReLU(name=f"relu{conv_i}")]
            self.units.append([conv, bn])
            c = w
            if conv_i == n_conv:
                shunt = Shunting(c, config.shunting_kernel, rng, dtype, name="shunt")
                self.layers.append(shunt)
                self.units.append([shunt])
        self.layers.append(Flatten())
        flat = c * config.final_spatial ** 2
        dense = Dense(flat, config.dense_units, rng, dtype, name="dense")
        self.layers += [dense, ReLU(name="relu_dense")]
        self.units.append([dense])
        self.heads = OrderedDict(
            (name, Dense(config.dense_units, size, rng, dtype, name=name))
            for name, size in head_sizes(config).items())
        self.training = False
        self.set_mode("eval")

    # -- bookkeeping -------------------------------------------------------

    @property
    def all_layers(self):
        return self.layers + list(self.heads.values())

    def named_parameters(self):
        out = OrderedDict()
        for layer in self.all_layers:
            for key, p in layer.params.items():
                out[f"{layer.name}.{key}"] = p
        return out

    def named_gradients(self):
        out = OrderedDict()
        for layer in self.all_layers:
            for key, g in layer.grads.items():
                out[f"{layer.name}.{key}"] = g
        return out

    def named_buffers(self):
        out = OrderedDict()
        for layer in self.all_layers:
            for key, b in layer.buffers.items():
                out[f"{layer.name}.{key}"] = b
        return out

    def state(self):
        """All tensors that define the model: parameters then running statistics."""
        return OrderedDict(**self.named_parameters(), **self.named_buffers())

    def num_parameters(self):
        return sum(p.size for p in self.named_parameters().values())

    def trunk_parameter_names(self, n_units=None):
        units = self.units if n_units is None else self.units[:n_units]
        return [f"{layer.name}.{key}" for unit in units for layer in unit for key in layer.params]

    def describe(self):
        """Build-time introspection of the topology."""
        convs = [l for l in self.layers if isinstance(l, Conv2D)]
        return {
            "conv_layers": len(convs),
            "pool_layers": sum(isinstance(l, MaxPool2D) for l in self.layers),
            "batchnorm_layers": sum(isinstance(l, BatchNorm2D) for l in self.layers),
            "dropout_layers": sum(isinstance(l, Dropout) for l in self.layers),
            "shunting_layers": sum(isinstance(l, Shunting) for l in self.layers),
            "input_size": (self.config.input_size, self.config.input_size),
            "final_spatial": (self.config.final_spatial, self.config.final_spatial),
            "dense_units": self.layers[-2].params["weight"].shape[1],
            "heads": {k: h.params["weight"].shape[1] for k, h in self.heads.items()},
            "parameters": self.num_parameters(),
        }

    def set_mode(self, mode):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.training = mode == "train"
        for layer in self.all_layers:
            layer.train(self.training)

    def set_rng(self, rng):
        for layer in self.layers:
            if isinstance(layer, Dropout):
                layer.rng = rng

    def freeze(self, n_units):
        """Freeze the first ``n_units`` trunk units; returns the frozen parameter names."""
        if not 0 <= n_units <= len(self.units):
            raise ValueError(f"freeze_prefix must be in [0, {len(self.units)}], got {n_units}")
        for i, unit in enumerate(self.units):
            for layer in unit:
                if isinstance(layer, BatchNorm2D):
                    layer.frozen = i < n_units
        return self.trunk_parameter_names(n_units)

    def zero_grad(self):
        for layer in self.all_layers:
            layer.zero_grad()

    def reset_head(self, num_classes, seed=None):
        """Replace the categorical head with a freshly initialized one for ``num_classes``."""
        if "cat_head" not in self.heads:
            raise ValueError("model has no categorical head")
        rng = np.random.default_rng(self.config.seed + 1 if seed is None else seed)
        self.heads["cat_head"] = Dense(self.config.dense_units, num_classes, rng, self.dtype, name="cat_head")
        self.heads["cat_head"].train(self.training)
        self.config.num_classes = num_classes

    # -- computation -------------------------------------------------------

    def _check_input(self, x):
        s = self.config.input_size
        if x.ndim != 4 or x.shape[1] != self.config.in_channels or x.shape[2:] != (s, s):
            raise ShapeError(
                f"expected input of shape [N, {self.config.in_channels}, {s}, {s}] "
                f"(images must be {s}x{s}), got {tuple(x.shape)}")

    def features(self, x):
        self._check_input(x)
        h = np.asarray(x, dtype=self.dtype)
        for layer in self.layers:
            h = layer.forward(h)
        return h

    def logits(self, x):
        h = self.features(x)
        return OrderedDict((name, head.forward(h)) for name, head in self.heads.items())

    def forward(self, x, mode=None, rng=None):
        if mode is not None:
            self.set_mode(mode)
        if rng is not None:
            self.set_rng(rng)
        out = OrderedDict()
        for name, z in self.logits(x).items():
            if name == "cat_head":
                out["categorical"] = softmax(z)
            else:
                out["dimensional"] = z if self.training else np.clip(z, -1, 1)
        return out

    __call__ = forward

    def backward(self, head_grads):
        """Backpropagate gradients given per head, with respect to head logits.

        Keys are ``"cat_head"`` / ``"dim_head"``; missing heads contribute zero.
        """
        dh = None
        for name, head in self.heads.items():
            g = head_grads.get(name)
            if g is None:
                continue
            d = head.backward(g)
            dh = d if dh is None else dh + d
        if dh is None:
            raise ValueError("no head gradient supplied")
        for layer in reversed(self.layers):
            dh = layer.backward(dh)
        return dh


def build_model(config=None, dtype=np.float32):
    """Instantiate the network described by ``config`` (default FaceChannel if omitted)."""
    config = config or ModelConfig()
    model = Model(config, dtype=dtype)
    n = model.num_parameters()
    if n != count_parameters(config):
        raise AssertionError(f"parameter count {n} disagrees with closed form {count_parameters(config)}")
    log.debug("built FaceChannel with %d parameters", n)
    return model
