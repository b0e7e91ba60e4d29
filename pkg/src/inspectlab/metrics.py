"""Fold planning and AUC ROC metrics.

AUC uses the rank-statistic (Mann-Whitney) formulation with midranks for
ties, which equals exhaustive pairwise counting exactly. The multiclass
value is the one-vs-rest decomposition weighted by class prevalence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .seeds import rng_for


class MetricError(Exception):
    pass


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignments: dict[str, int]  # sample id -> fold index
    seed: int

    def test_ids(self, fold: int) -> list[str]:
        return [sid for sid, f in self.assignments.items() if f == fold]

    def train_ids(self, fold: int) -> list[str]:
        return [sid for sid, f in self.assignments.items() if f != fold]


def stratified_kfold(ids: list[str], labels: np.ndarray, k: int = 10, seed: int = 0) -> FoldPlan:
    """Shuffle within each class, then deal samples round-robin into k folds."""
    labels = np.asarray(labels)
    if len(ids) != len(labels):
        raise MetricError("ids and labels length mismatch")
    classes, counts = np.unique(labels, return_counts=True)
    too_small = [str(c) for c, n in zip(classes, counts) if n < k]
    if too_small:
        raise MetricError(f"classes smaller than k={k}: {', '.join(too_small)}")
    assignments: dict[str, int] = {}
    for c in classes:
        idx = np.flatnonzero(labels == c)
        rng = rng_for(seed, "fold", str(c))
        perm = rng.permutation(len(idx))
        for j, p in enumerate(perm):
            assignments[ids[idx[p]]] = j % k
    return FoldPlan(k=k, assignments=assignments, seed=seed)


def auc_binary(scores: np.ndarray, labels: np.ndarray) -> float:
    """P(random positive outranks random negative), ties counting 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise MetricError("both classes must be present")
    ranks = rankdata(scores, method="average")
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_multiclass_ovr_weighted(probs: np.ndarray, labels: np.ndarray, classes) -> tuple[float, dict]:
    """One-vs-rest AUC per class, weighted by class prevalence.

    `classes` gives the label for each probability column. Classes absent
    from `labels` are excluded from both the per-class map and the weight
    normalization.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape[1] != len(classes):
        raise MetricError("probability columns do not match class list")
    per_class: dict = {}
    weights: dict = {}
    n = labels.size
    for j, c in enumerate(classes):
        pos = labels == c
        n_c = int(pos.sum())
        if n_c == 0 or n_c == n:
            continue
        per_class[c] = auc_binary(probs[:, j], pos)
        weights[c] = n_c
    if len(per_class) < 2:
        raise MetricError("need at least 2 classes present")
    total = sum(weights.values())
    weighted = sum(weights[c] / total * per_class[c] for c in per_class)
    return float(weighted), per_class
