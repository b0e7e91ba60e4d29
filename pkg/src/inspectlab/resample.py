"""Feature-space oversampling: random replication, SMOTE, ADASYN.

All strategies balance every minority class up to the pre-existing majority
count, touch only the rows they are given (training fold), and append
synthetic rows after the originals. Each synthetic row records its parents
and interpolation coefficient so geometry can be re-checked after the fact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeds import rng_for


class ResampleError(Exception):
    pass


@dataclass(frozen=True)
class SyntheticRow:
    values: np.ndarray
    label: object
    parents: tuple  # (row index,) for random, (row index, neighbor index) otherwise
    lam: float | None  # interpolation coefficient, None for random copies


@dataclass
class ResamplePlan:
    strategy: str
    k_neighbors: int | None
    beta: float | None
    seed: int
    per_class_targets: dict = field(default_factory=dict)
    fallbacks: list = field(default_factory=list)  # e.g. size-1 class, all-interior class

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "k_neighbors": self.k_neighbors,
            "beta": self.beta,
            "seed": self.seed,
            "per_class_targets": {str(c): int(n) for c, n in self.per_class_targets.items()},
            "fallbacks": list(self.fallbacks),
        }


def save_provenance(plan: ResamplePlan, rows: list[SyntheticRow], path: Path) -> None:
    doc = {
        "plan": plan.to_dict(),
        "rows": [
            {
                "label": str(r.label),
                "parents": [int(p) for p in r.parents],
                "lambda": r.lam,
            }
            for r in rows
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _class_targets(y: np.ndarray) -> dict:
    classes, counts = np.unique(y, return_counts=True)
    majority = int(counts.max())
    return {c: majority - int(n) for c, n in zip(classes, counts)}


def _check_input(X: np.ndarray, y: np.ndarray) -> None:
    if X.shape[0] == 0:
        raise ResampleError("empty input")
    if X.shape[0] != y.shape[0]:
        raise ResampleError("X and y length mismatch")


def _finish(X, y, rows):
    if rows:
        X_out = np.vstack([X] + [r.values[None, :] for r in rows])
        y_out = np.concatenate([y, np.array([r.label for r in rows], dtype=y.dtype)])
    else:
        X_out, y_out = X.copy(), y.copy()
    return X_out, y_out, rows


def random_oversample(X: np.ndarray, y: np.ndarray, seed: int):
    """Duplicate minority rows uniformly with replacement up to the majority count."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    _check_input(X, y)
    targets = _class_targets(y)
    plan = ResamplePlan(strategy="random", k_neighbors=None, beta=None, seed=seed,
                        per_class_targets=targets)
    rows = []
    for c in sorted(targets, key=str):
        need = targets[c]
        if need == 0:
            continue
        idx = np.flatnonzero(y == c)
        rng = rng_for(seed, "random", str(c))
        picks = rng.integers(0, len(idx), size=need)
        for p in picks:
            parent = int(idx[p])
            rows.append(SyntheticRow(values=X[parent].copy(), label=c, parents=(parent,), lam=None))
    return _finish(X, y, rows) + (plan,)


def _nearest_same_class(X: np.ndarray, idx: np.ndarray, k: int) -> np.ndarray:
    """For each row in idx, indices (into X) of its k nearest same-class rows."""
    sub = X[idx]
    d2 = ((sub[:, None, :] - sub[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return idx[order]


def _interpolate(X, y, c, idx, neighbors, count, rng, rows):
    for _ in range(count):
        pick = int(rng.integers(0, len(idx)))
        _emit_point(X, c, int(idx[pick]), neighbors[pick], rng, rows)


def _emit_point(X, c, parent, neighbor_choices, rng, rows):
    nn = int(neighbor_choices[int(rng.integers(0, len(neighbor_choices)))])
    lam = float(rng.random())
    values = X[parent] + lam * (X[nn] - X[parent])
    rows.append(SyntheticRow(values=values, label=c, parents=(parent, nn), lam=lam))


def smote(X: np.ndarray, y: np.ndarray, k_neighbors: int = 5, seed: int = 0):
    """Interpolate between minority rows and their k nearest same-class neighbors."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    _check_input(X, y)
    if k_neighbors < 1:
        raise ResampleError("k_neighbors must be >= 1")
    targets = _class_targets(y)
    plan = ResamplePlan(strategy="smote", k_neighbors=k_neighbors, beta=None, seed=seed,
                        per_class_targets=targets)
    rows = []
    for c in sorted(targets, key=str):
        need = targets[c]
        if need == 0:
            continue
        idx = np.flatnonzero(y == c)
        rng = rng_for(seed, "smote", str(c))
        if len(idx) < 2:
            plan.fallbacks.append({"class": str(c), "reason": "size-1 class, random fallback"})
            picks = rng.integers(0, len(idx), size=need)
            for p in picks:
                parent = int(idx[p])
                rows.append(SyntheticRow(values=X[parent].copy(), label=c, parents=(parent,), lam=None))
            continue
        k = min(k_neighbors, len(idx) - 1)
        neighbors = _nearest_same_class(X, idx, k)
        _interpolate(X, y, c, idx, neighbors, need, rng, rows)
    return _finish(X, y, rows) + (plan,)


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation summing exactly to total, proportional to weights."""
    raw = weights * total
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        remainders = raw - base
        # largest remainders first, ties to lower index
        order = np.lexsort((np.arange(len(weights)), -remainders))
        base[order[:short]] += 1
    return base


def adasyn(X: np.ndarray, y: np.ndarray, k_neighbors: int = 5, beta: float = 1.0, seed: int = 0):
    """Adaptive synthetic sampling: more synthetic points near class boundaries.

    Per minority class c: G = beta * (majority - n_c); each row's share is
    proportional to the fraction of non-c samples among its k nearest
    neighbors in the full training set, with largest-remainder rounding so
    shares sum exactly to G.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    _check_input(X, y)
    if k_neighbors < 1:
        raise ResampleError("k_neighbors must be >= 1")
    if not (0.0 <= beta <= 1.0):
        raise ResampleError("beta must be in [0, 1]")
    targets = _class_targets(y)
    plan = ResamplePlan(strategy="adasyn", k_neighbors=k_neighbors, beta=beta, seed=seed,
                        per_class_targets={c: int(round(beta * n)) for c, n in targets.items()})
    rows = []
    for c in sorted(targets, key=str):
        G = int(round(beta * targets[c]))
        if G == 0:
            continue
        idx = np.flatnonzero(y == c)
        rng = rng_for(seed, "adasyn", str(c))
        if len(idx) < 2:
            plan.fallbacks.append({"class": str(c), "reason": "size-1 class, random fallback"})
            picks = rng.integers(0, len(idx), size=G)
            for p in picks:
                parent = int(idx[p])
                rows.append(SyntheticRow(values=X[parent].copy(), label=c, parents=(parent,), lam=None))
            continue
        # impurity r_i over neighborhoods in the FULL training set
        k_full = min(k_neighbors, X.shape[0] - 1)
        d2 = ((X[idx][:, None, :] - X[None, :, :]) ** 2).sum(axis=2)
        d2[np.arange(len(idx)), idx] = np.inf
        nn_full = np.argsort(d2, axis=1, kind="stable")[:, :k_full]
        r = (y[nn_full] != c).sum(axis=1) / k_full
        if r.sum() == 0.0:
            plan.fallbacks.append({"class": str(c), "reason": "all rows interior, uniform allocation"})
            weights = np.full(len(idx), 1.0 / len(idx))
        else:
            weights = r / r.sum()
        alloc = _largest_remainder(weights, G)
        k_same = min(k_neighbors, len(idx) - 1)
        neighbors = _nearest_same_class(X, idx, k_same)
        for pos, g in enumerate(alloc):
            for _ in range(int(g)):
                _emit_point(X, c, int(idx[pos]), neighbors[pos], rng, rows)
    return _finish(X, y, rows) + (plan,)


STRATEGIES = {
    "random": random_oversample,
    "smote": smote,
    "adasyn": adasyn,
}
