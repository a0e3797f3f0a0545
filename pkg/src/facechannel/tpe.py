"""Tree-structured Parzen Estimator search over flat hyperparameter spaces.

Objectives are minimized. After ``n_startup`` completed trials, history is
split at the ``gamma`` quantile into good and bad sets; per-dimension Parzen
densities ``l`` (good) and ``g`` (bad) are fit and the candidate drawn from
``l`` with the largest ``l / g`` is proposed.
"""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import ndtr

log = logging.getLogger(__name__)

N_STARTUP = 10
GAMMA = 0.25
N_CANDIDATES = 24
KINDS = ("uniform", "log_uniform", "choice")


@dataclass(frozen=True)
class Dimension:
    kind: str
    low: float = None
    high: float = None
    options: tuple = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dimension kind {self.kind!r}")
        if self.kind == "choice":
            if not self.options:
                raise ValueError("choice dimension needs at least one option")
        else:
            if not self.low < self.high:
                raise ValueError(f"need low < high, got [{self.low}, {self.high}]")
            if self.kind == "log_uniform" and self.low <= 0:
                raise ValueError("log_uniform needs a positive lower bound")

    @property
    def bounds(self):
        """Bounds in the sampling space (log space for log_uniform)."""
        if self.kind == "log_uniform":
            return math.log(self.low), math.log(self.high)
        return self.low, self.high

    def to_internal(self, value):
        if self.kind == "log_uniform":
            return math.log(value)
        if self.kind == "choice":
            return self.options.index(value)
        return value

    def from_internal(self, t):
        if self.kind == "log_uniform":
            return float(min(max(math.exp(t), self.low), self.high))
        if self.kind == "choice":
            return self.options[int(t)]
        return float(t)

    def contains(self, value):
        if self.kind == "choice":
            return value in self.options
        return self.low <= value <= self.high


class SearchSpace(dict):
    """Mapping of hyperparameter name to :class:`Dimension`."""

    @classmethod
    def from_dict(cls, spec):
        """Parse ``{"name": {"uniform": [lo, hi]} | {"log_uniform": [lo, hi]} | {"choice": [...]}}``."""
        space = cls()
        for name, d in spec.items():
            if len(d) != 1:
                raise ValueError(f"dimension {name!r} must have exactly one kind")
            (kind, args), = d.items()
            if kind == "choice":
                space[name] = Dimension("choice", options=tuple(args))
            else:
                lo, hi = args
                space[name] = Dimension(kind, float(lo), float(hi))
        return space

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return {k: {d.kind: list(d.options) if d.kind == "choice" else [d.low, d.high]}
                for k, d in self.items()}

    def contains(self, config):
        return set(config) == set(self) and all(self[k].contains(v) for k, v in config.items())


@dataclass
class TrialRecord:
    number: int
    config: dict
    objective: float = None
    status: str = "ok"

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line):
        return cls(**json.loads(line))


def sample_prior(space, rng):
    config = {}
    for name, dim in space.items():
        if dim.kind == "choice":
            config[name] = dim.options[rng.integers(len(dim.options))]
        else:
            config[name] = dim.from_internal(rng.uniform(*dim.bounds))
    return config


class _Parzen1D:
    """Mixture of truncated Gaussians on [lo, hi] plus one broad prior component."""

    def __init__(self, points, lo, hi):
        points = np.asarray(points, dtype=np.float64)
        width = hi - lo
        mus = np.append(points, 0.5 * (lo + hi))
        order = np.argsort(mus, kind="stable")
        srt = mus[order]
        padded = np.concatenate([[lo], srt, [hi]])
        spacing = np.maximum(srt - padded[:-2], padded[2:] - srt)
        floor = width / min(100.0, len(mus))
        sig = np.empty_like(mus)
        sig[order] = np.clip(spacing, floor, width)
        sig[-1] = width  # prior component
        self.mus, self.sigmas = mus, sig
        self.weights = np.full(len(mus), 1.0 / len(mus))
        self.lo, self.hi = lo, hi
        self.mass = ndtr((hi - mus) / sig) - ndtr((lo - mus) / sig)

    def sample(self, rng, n):
        comp = rng.choice(len(self.mus), size=n, p=self.weights)
        return np.clip(rng.normal(self.mus[comp], self.sigmas[comp]), self.lo, self.hi)

    def logpdf(self, t):
        t = np.asarray(t, dtype=np.float64)[:, None]
        z = (t - self.mus) / self.sigmas
        dens = np.exp(-0.5 * z * z) / (math.sqrt(2 * math.pi) * self.sigmas * self.mass)
        return np.log(np.maximum((dens * self.weights).sum(axis=1), 1e-300))


class _Categorical1D:
    """Smoothed frequency counts: (count + 1) / (n + K)."""

    def __init__(self, indices, k):
        counts = np.bincount(np.asarray(indices, dtype=np.int64), minlength=k).astype(np.float64)
        self.p = (counts + 1.0) / (counts.sum() + k)

    def sample(self, rng, n):
        return rng.choice(len(self.p), size=n, p=self.p)

    def logpdf(self, idx):
        return np.log(self.p[np.asarray(idx, dtype=np.int64)])


def split_history(history, gamma=GAMMA):
    """Completed trials sorted by objective, split into (good, bad) at ``ceil(gamma * n)``."""
    done = sorted((t for t in history if t.status == "ok" and t.objective is not None),
                  key=lambda t: t.objective)
    n_good = math.ceil(gamma * len(done))
    return done[:n_good], done[n_good:]


def _density(dim, trials, name):
    values = [dim.to_internal(t.config[name]) for t in trials]
    if dim.kind == "choice":
        return _Categorical1D(values, len(dim.options))
    return _Parzen1D(values, *dim.bounds)


def suggest(history, space, rng, n_startup=N_STARTUP, gamma=GAMMA, n_candidates=N_CANDIDATES):
    """Propose the next configuration given the trial ``history``."""
    good, bad = split_history(history, gamma)
    if len(good) + len(bad) < n_startup:
        return sample_prior(space, rng)
    score = np.zeros(n_candidates)
    draws = {}
    for name, dim in space.items():
        l_dens = _density(dim, good, name)
        g_dens = _density(dim, bad, name)
        cand = l_dens.sample(rng, n_candidates)
        draws[name] = cand
        score += l_dens.logpdf(cand) - g_dens.logpdf(cand)
    best = int(np.argmax(score))
    return {name: space[name].from_internal(draws[name][best]) for name in space}


def read_trials(path):
    if not path or not os.path.exists(path):
        return []
    with open(path, encoding="utf-8") as fh:
        return [TrialRecord.from_json(line) for line in fh if line.strip()]


def best_trial(history):
    done = [t for t in history if t.status == "ok" and t.objective is not None]
    return min(done, key=lambda t: t.objective) if done else None


def best_so_far(history):
    """Running minimum of the objective over trial order (inf before the first success)."""
    out, cur = [], math.inf
    for t in history:
        if t.status == "ok" and t.objective is not None:
            cur = min(cur, t.objective)
        out.append(cur)
    return out


def optimize(objective, space, budget, seed=0, history=None, log_path=None,
             n_startup=N_STARTUP, gamma=GAMMA, n_candidates=N_CANDIDATES):
    """Run ``budget`` new trials of ``objective`` (config -> float, lower is better).

    Trial ``i`` draws from a generator seeded with ``(seed, i)``, so a search
    resumed from its JSON-lines log continues exactly where it stopped.
    Exceptions from ``objective`` mark the trial failed. Returns
    ``(best_trial, history)``.
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    history = list(history) if history is not None else read_trials(log_path)
    start = len(history)
    for number in range(start, start + budget):
        rng = np.random.default_rng([seed, number])
        config = suggest(history, space, rng, n_startup, gamma, n_candidates)
        try:
            value = float(objective(config))
            if not math.isfinite(value):
                raise ValueError(f"non-finite objective {value}")
            rec = TrialRecord(number, config, value, "ok")
        except Exception as exc:  # a failing trial must not stop the search
            log.warning("trial %d failed: %s", number, exc)
            rec = TrialRecord(number, config, None, "failed")
        history.append(rec)
        if log_path:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(rec.to_json() + "\n")
    return best_trial(history), history


def random_search(objective, space, budget, seed=0):
    """Baseline: prior sampling only."""
    return optimize(objective, space, budget, seed, history=[], n_startup=math.inf)


DEFAULT_SPACE = {
    "learning_rate": {"log_uniform": [1e-4, 1e-1]},
    "momentum": {"uniform": [0.5, 0.99]},
    "dropout_rate": {"uniform": [0.0, 0.7]},
    "batch_size": {"choice": [4, 8, 16, 32]},
    "dense_units": {"choice": [160, 180, 200]},
}
