"""Central finite-difference checks of analytic gradients."""

from dataclasses import dataclass, field

import numpy as np

from .layers import (
    BatchNorm2D,
    Conv2D,
    Dense,
    Dropout,
    MaxPool2D,
    ReLU,
    Shunting,
    Softmax,
    softmax,
)
from .training import soft_cross_entropy


@dataclass
class GradCheckReport:
    name: str
    tolerance: float
    errors: dict = field(default_factory=dict)
    skipped: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self):
        return all(e < self.tolerance for e in self.errors.values())

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        parts = [f"{k}={v:.2e}" for k, v in self.errors.items()]
        parts += [f"{k}: skipped at ties ({v})" for k, v in self.skipped.items() if v]
        return f"{status} {self.name} (tol {self.tolerance:.0e}): " + ", ".join(parts)


def relative_error(analytic, numeric, atol=1e-8):
    """Largest absolute deviation scaled by the larger of the two gradient magnitudes.

    Gradients that are both below ``atol`` everywhere count as agreeing zeros
    (e.g. a conv bias feeding batch norm), where only round-off remains.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale < atol:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def _sample_indices(size, max_checks, rng):
    if max_checks is None or size <= max_checks:
        return np.arange(size)
    return np.sort(rng.choice(size, max_checks, replace=False))


def check_gradients(loss_fn, tensors, analytic, eps=1e-6, tolerance=1e-5, max_checks=None,
                    skip=None, seed=0, name="function"):
    """Compare ``analytic`` gradients with central differences of ``loss_fn``.

    ``tensors`` maps names to arrays that ``loss_fn`` reads; they are perturbed
    in place and restored. ``skip`` optionally maps names to boolean masks of
    coordinates to leave out (non-differentiable points).
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    rng = np.random.default_rng(seed)
    report = GradCheckReport(name, tolerance)
    skip = skip or {}
    for key, arr in tensors.items():
        if arr.dtype != np.float64:
            report.notes.append(f"{key} is {arr.dtype}; finite differences are unreliable below float64")
        flat = arr.reshape(-1)
        idx = _sample_indices(flat.size, max_checks, rng)
        mask = skip.get(key)
        if mask is not None:
            keep = ~mask.reshape(-1)[idx]
            report.skipped[key] = int((~keep).sum())
            idx = idx[keep]
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            plus = loss_fn()
            flat[i] = orig - eps
            minus = loss_fn()
            flat[i] = orig
            numeric[j] = (plus - minus) / (2 * eps)
        report.errors[key] = relative_error(analytic[key].reshape(-1)[idx], numeric)
    return report


def grad_check(layer, x, eps=1e-6, tolerance=1e-5, max_checks=None, seed=0):
    """Finite-difference check of one layer's input and parameter gradients.

    The scalar loss is a fixed random projection of the layer output, which
    avoids the degenerate all-ones weighting (batch norm and softmax outputs
    have a constant sum).
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    if isinstance(layer, Dropout):
        layer.fix_mask = True
        layer._mask = None
        if layer.rng is None:
            layer.rng = np.random.default_rng(seed)
    out = layer.forward(x)
    proj = rng.standard_normal(out.shape)

    def loss():
        return float(np.sum(layer.forward(x) * proj))

    layer.zero_grad()
    layer.forward(x)
    dx = layer.backward(proj)
    analytic = {"input": dx, **{k: g.copy() for k, g in layer.grads.items()}}
    tensors = {"input": x, **layer.params}
    skip = None
    if isinstance(layer, MaxPool2D):
        skip = {"input": layer.tied_mask(x, tol=2 * eps)}
    return check_gradients(loss, tensors, analytic, eps, tolerance, max_checks, skip, seed,
                           name=f"{layer.kind}:{layer.name}")


LAYER_TOLERANCES = {"shunting": 1e-4, "batchnorm": 1e-4}
DEFAULT_TOLERANCE = 1e-5


def _softmax_ce_check(seed, eps):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((4, 6))
    t = rng.dirichlet(np.ones(6), size=4)
    analytic = {"logits": (softmax(z) - t) / len(z)}
    return check_gradients(lambda: soft_cross_entropy(softmax(z), t), {"logits": z}, analytic,
                           eps, DEFAULT_TOLERANCE, seed=seed, name="softmax+cross_entropy")


def run_suite(seeds=range(5), eps=1e-6):
    """Finite-difference check of every layer type over several seeds (float64)."""
    f64 = np.float64
    reports = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        shunt = Shunting(4, rng=rng, dtype=f64)
        # non-trivial inhibition so the ReLU inside the field is exercised
        shunt.params["inhib_weight"][...] = 0.2 * rng.standard_normal(shunt.params["inhib_weight"].shape)
        bn = BatchNorm2D(3, dtype=f64)
        bn.params["gamma"][...] = rng.uniform(0.5, 1.5, 3)
        bn.params["beta"][...] = rng.standard_normal(3)
        drop = Dropout(0.5)
        drop.rng = np.random.default_rng(seed)
        cases = [
            (Conv2D(3, 4, 3, 1, 1, rng=rng, dtype=f64), rng.standard_normal((2, 3, 8, 8))),
            (MaxPool2D(), rng.standard_normal((1, 2, 6, 6))),
            (bn, rng.standard_normal((2, 3, 4, 4))),
            (drop, rng.standard_normal((2, 3, 4, 4))),
            (Dense(10, 5, rng=rng, dtype=f64), rng.standard_normal((3, 10))),
            (shunt, np.abs(rng.standard_normal((1, 4, 8, 8)))),
            (ReLU(), rng.standard_normal((3, 7))),
            (Softmax(), rng.standard_normal((3, 5))),
        ]
        for layer, x in cases:
            tol = LAYER_TOLERANCES.get(layer.kind, DEFAULT_TOLERANCE)
            rep = grad_check(layer, x, eps=eps, tolerance=tol, seed=seed)
            rep.name += f" seed={seed}"
            reports.append(rep)
        rep = _softmax_ce_check(seed, eps)
        rep.name += f" seed={seed}"
        reports.append(rep)
    return reports


def grad_check_model(model, x, targets, names=None, max_checks=2, eps=1e-7, tolerance=8e-5, seed=0):
    """End-to-end check of soft cross-entropy through a float64 categorical model.

    Runs in train mode with dropout masks frozen after the first pass. The
    small default ``eps`` keeps perturbations from crossing ReLU and max-pool
    kinks, which a 128x128 network has in abundance. Only
    ``max_checks`` sampled coordinates of each tensor in ``names`` (default:
    every parameter) plus the input are perturbed.
    """
    if model.dtype != np.float64:
        raise ValueError("model gradient checks need a float64 model")
    x = np.array(x, dtype=np.float64)
    model.set_mode("train")
    model.set_rng(np.random.default_rng(seed))
    for layer in model.layers:
        if isinstance(layer, Dropout):
            layer.fix_mask = True
            layer._mask = None

    def loss():
        return soft_cross_entropy(softmax(model.logits(x)["cat_head"]), targets)

    model.zero_grad()
    z = model.logits(x)["cat_head"]
    dx = model.backward({"cat_head": (softmax(z) - targets) / len(z)})
    params = model.named_parameters()
    grads = model.named_gradients()
    names = list(params) if names is None else names
    tensors = {"input": x, **{n: params[n] for n in names}}
    analytic = {"input": dx, **{n: grads[n].copy() for n in names}}
    report = check_gradients(loss, tensors, analytic, eps, tolerance, max_checks, seed=seed,
                             name="model")
    for layer in model.layers:
        if isinstance(layer, Dropout):
            layer.fix_mask = False
    return report
