"""Losses, SGD with momentum, the training loop and fine-tuning."""

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .layers import softmax
from .metrics import EvalReport, categorical_report, dimensional_report

log = logging.getLogger(__name__)

LOSSES = ("soft_cross_entropy", "mse", "ccc")
PROB_FLOOR = 1e-12


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    freeze_prefix: int = 0
    loss: str = None  # None picks soft_cross_entropy or mse from the label schema
    finetune_lr_factor: float = 0.1
    target_metric: float = None  # stop once the validation metric reaches this value

    def validate(self, n_units=None):
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.loss is not None and self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if n_units is not None and not 0 <= self.freeze_prefix <= n_units:
            raise ValueError(f"freeze_prefix must be in [0, {n_units}], got {self.freeze_prefix}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class LabelSchemaError(ValueError):
    pass


# -- losses ----------------------------------------------------------------

def _check_stochastic(rows, what):
    sums = rows.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-4)
    if bad.size:
        raise ValueError(f"{what} row {bad[0]} sums to {sums[bad[0]]:.6g}, not 1")


def soft_cross_entropy(pred, target):
    """Mean over rows of ``-sum(target * log(pred))`` for probability rows."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    _check_stochastic(pred, "prediction")
    _check_stochastic(target, "target")
    logp = np.log(np.clip(pred, PROB_FLOOR, 1.0))
    return float(-(target * logp).sum(axis=1).mean())


def cross_entropy(pred, labels):
    """Hard-label cross-entropy: mean of ``-log pred[i, labels[i]]``."""
    pred = np.asarray(pred, dtype=np.float64)
    picked = pred[np.arange(len(pred)), np.asarray(labels)]
    return float(-np.log(np.clip(picked, PROB_FLOOR, 1.0)).mean())


def mse_loss(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def ccc_loss(pred, target):
    """``1 - mean column CCC`` and its gradient with respect to ``pred``."""
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    n = x.shape[0]
    dx, dy = x - x.mean(axis=0), y - y.mean(axis=0)
    sxy = (dx * dy).mean(axis=0)
    denom = (dx * dx).mean(axis=0) + (dy * dy).mean(axis=0) + (x.mean(axis=0) - y.mean(axis=0)) ** 2
    denom = np.maximum(denom, 1e-12)
    score = 2 * sxy / denom
    dmean = x.mean(axis=0) - y.mean(axis=0)
    grad = (2 * dy / n * denom - 2 * sxy * (2 * dx / n + 2 * dmean / n)) / denom ** 2
    k = x.shape[1]
    return float(1 - score.mean()), -grad / k


def head_loss(model_logits, targets, loss):
    """Loss value and logit gradients for one head."""
    if loss == "soft_cross_entropy":
        p = softmax(np.asarray(model_logits, dtype=np.float64))
        value = soft_cross_entropy(p, targets)
        return value, (p - targets) / len(p)
    z = np.asarray(model_logits, dtype=np.float64)
    if loss == "mse":
        return mse_loss(z, targets), 2 * (z - targets) / z.size
    if loss == "ccc":
        return ccc_loss(z, targets)
    raise ValueError(f"unknown loss {loss!r}")


# -- optimizer -------------------------------------------------------------

def sgd_step(params, grads, lr, momentum, velocity, frozen=()):
    """In-place momentum SGD: ``v = momentum * v - lr * g``; ``p += v``.

    ``velocity`` is a dict keyed like ``params`` and is filled lazily.
    Names in ``frozen`` are skipped entirely.
    """
    for name, p in params.items():
        if name in frozen:
            continue
        g = grads[name]
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        v *= momentum
        v -= lr * g
        p += v
    return params


# -- training --------------------------------------------------------------

def head_for(data):
    return "dim_head" if data.schema == "dimensional" else "cat_head"


def check_schema(model, data):
    head = head_for(data)
    if head not in model.heads:
        raise LabelSchemaError(
            f"label schema {data.schema!r} needs a {head.split('_')[0]} head, model has "
            f"{list(model.heads)}")
    if head == "cat_head":
        k = model.heads["cat_head"].params["weight"].shape[1]
        if data.num_classes != k:
            raise LabelSchemaError(f"label schema has {data.num_classes} classes, model head has {k}")


def default_loss(data):
    return "mse" if data.schema == "dimensional" else "soft_cross_entropy"


def predict(model, images, batch_size=32):
    model.set_mode("eval")
    outs = [model.forward(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    return {k: np.concatenate([o[k] for o in outs]) for k in outs[0]} if outs else {}


def evaluate(model, data, batch_size=32, per_group=False):
    check_schema(model, data)
    preds = predict(model, data.images, batch_size)
    if data.schema == "dimensional":
        groups = data.groups if per_group else None
        if per_group and groups is None:
            raise ValueError("per-group CCC requested but the manifest has no group column")
        return dimensional_report(preds["dimensional"], data.labels, groups)
    return categorical_report(preds["categorical"], data.class_ids(), data.num_classes)


def primary_metric(report: EvalReport):
    if report.accuracy is not None:
        return report.accuracy
    return 0.5 * (report.ccc_arousal + report.ccc_valence)


def train(model, data, config, val=None, lr=None):
    """Train ``model`` in place; returns the per-epoch history.

    Each history entry holds ``epoch``, mean training ``loss`` and
    ``val_metric`` (accuracy, or mean arousal/valence CCC; NaN without ``val``).
    """
    config.validate(len(model.units))
    check_schema(model, data)
    if val is not None:
        check_schema(model, val)
    lr = config.learning_rate if lr is None else lr
    loss_name = config.loss or default_loss(data)
    head = head_for(data)
    frozen = set(model.freeze(config.freeze_prefix))
    rng = np.random.default_rng(config.seed)
    targets = data.targets()
    params = model.named_parameters()
    velocity = {}
    history = []
    n = len(data)
    for epoch in range(1, config.epochs + 1):
        model.set_mode("train")
        model.set_rng(rng)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            model.zero_grad()
            logits = model.logits(data.images[idx])[head]
            value, grad = head_loss(logits, targets[idx], loss_name)
            model.backward({head: grad.astype(model.dtype)})
            sgd_step(params, model.named_gradients(), lr, config.momentum, velocity, frozen)
            total += value * len(idx)
        metric = primary_metric(evaluate(model, val)) if val is not None else math.nan
        history.append({"epoch": epoch, "loss": total / n, "val_metric": metric})
        log.info("epoch %d loss %.6f val %.4f", epoch, total / n, metric)
        if config.target_metric is not None and metric >= config.target_metric:
            break
    model.set_mode("eval")
    model.freeze(0)
    return history


def finetune(model, data, config, val=None):
    """Continue training a pretrained model on a new dataset.

    The first ``config.freeze_prefix`` trunk units keep their weights and
    running statistics; the learning rate is scaled by ``finetune_lr_factor``.
    A categorical head is re-initialized when the class count changes.
    Returns ``(model, history)``.
    """
    config.validate(len(model.units))
    if data.schema != "dimensional" and "cat_head" in model.heads:
        if model.heads["cat_head"].params["weight"].shape[1] != data.num_classes:
            model.reset_head(data.num_classes)
    history = train(model, data, config, val, lr=config.learning_rate * config.finetune_lr_factor)
    return model, history


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "val_metric"])
        for row in history:
            w.writerow([row["epoch"], repr(float(row["loss"])), repr(float(row["val_metric"]))])


def read_history(path):
    with open(path, newline="") as fh:
        return [{"epoch": int(r["epoch"]), "loss": float(r["loss"]), "val_metric": float(r["val_metric"])}
                for r in csv.DictReader(fh)]
