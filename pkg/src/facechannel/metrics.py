"""Accuracy, confusion matrices and the concordance correlation coefficient."""

import json
from dataclasses import dataclass, field

import numpy as np


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError(f"need at least 2 samples, got {x.size}")
    return x, y


def ccc(x, y):
    """Concordance correlation coefficient with population (1/n) moments.

    Uses the covariance form ``2 cov / (var_x + var_y + (mean_x - mean_y)^2)``,
    which stays defined when one sequence is constant. Two identical constant
    sequences agree perfectly and score 1.
    """
    x, y = _pair(x, y)
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    vx, vy = np.mean(dx * dx), np.mean(dy * dy)
    cov = np.mean(dx * dy)
    denom = vx + vy + (mx - my) ** 2
    if denom == 0.0:
        return 1.0
    return float(2.0 * cov / denom)


def pearson(x, y):
    x, y = _pair(x, y)
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(np.mean(dx * dx)), np.sqrt(np.mean(dy * dy))
    if sx == 0.0 or sy == 0.0:
        raise ValueError("pearson correlation undefined for zero variance")
    return float(np.mean(dx * dy) / (sx * sy))


def ccc_per_group(x, y, groups):
    """Mean of per-group CCC values; groups with fewer than 2 samples are skipped."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    groups = np.asarray(groups)
    scores = [ccc(x[groups == g], y[groups == g]) for g in np.unique(groups)
              if np.sum(groups == g) >= 2]
    if not scores:
        raise ValueError("no group has at least 2 samples")
    return float(np.mean(scores))


def predicted_classes(probs):
    """Row-wise argmax; ties go to the lowest class index."""
    return np.asarray(probs).argmax(axis=1)


def _classes(pred, true, k=None):
    pred = np.asarray(pred, dtype=np.int64).ravel()
    true = np.asarray(true, dtype=np.int64).ravel()
    if pred.size != true.size:
        raise ValueError(f"length mismatch: {pred.size} vs {true.size}")
    if k is not None:
        for name, arr in (("predicted", pred), ("true", true)):
            bad = np.flatnonzero((arr < 0) | (arr >= k))
            if bad.size:
                raise ValueError(f"{name} class id {arr[bad[0]]} at position {bad[0]} outside [0, {k})")
    return pred, true


def accuracy(pred, true):
    pred, true = _classes(pred, true)
    if pred.size == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean(pred == true))


def confusion(pred, true, k):
    """``k`` x ``k`` counts, rows indexed by the true class, columns by the prediction."""
    pred, true = _classes(pred, true, k)
    mat = np.zeros((k, k), dtype=np.int64)
    np.add.at(mat, (true, pred), 1)
    return mat


@dataclass
class EvalReport:
    n: int
    accuracy: float = None
    ccc_arousal: float = None
    ccc_valence: float = None
    confusion: list = field(default=None)

    def to_dict(self):
        d = {"n": self.n}
        if self.accuracy is not None:
            d["accuracy"] = self.accuracy
            d["confusion"] = self.confusion
        if self.ccc_arousal is not None:
            d["ccc_arousal"] = self.ccc_arousal
            d["ccc_valence"] = self.ccc_valence
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def categorical_report(probs, true, k):
    pred = predicted_classes(probs)
    mat = confusion(pred, true, k)
    return EvalReport(n=int(mat.sum()), accuracy=float(np.trace(mat) / mat.sum()),
                      confusion=mat.tolist())


def dimensional_report(pred, true, groups=None):
    """``pred`` and ``true`` are [N, 2] arrays of (valence, arousal)."""
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if groups is not None:
        val = ccc_per_group(pred[:, 0], true[:, 0], groups)
        aro = ccc_per_group(pred[:, 1], true[:, 1], groups)
    else:
        val = ccc(pred[:, 0], true[:, 0])
        aro = ccc(pred[:, 1], true[:, 1])
    return EvalReport(n=len(true), ccc_arousal=aro, ccc_valence=val)
