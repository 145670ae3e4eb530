"""Data-quality grouping via Ward agglomerative clustering.

Ward distances are carried with the Lance-Williams recurrence starting
from squared Euclidean distances, so a merge height equals twice the
increase in the within-group sum of squares.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

TIE_RTOL = 1e-12


class Merge(NamedTuple):
    left: frozenset
    right: frozenset
    height: float


@dataclass(frozen=True)
class Dendrogram:
    n_leaves: int
    merges: tuple

    @property
    def heights(self) -> np.ndarray:
        return np.array([m.height for m in self.merges])

    def cut(self, k: int) -> list[frozenset]:
        """Groups after undoing the last ``k - 1`` merges."""
        if not 1 <= k <= self.n_leaves:
            raise ValueError(f"k must lie in 1..{self.n_leaves}, got {k}")
        groups = {i: frozenset([i]) for i in range(self.n_leaves)}
        for m in self.merges[: self.n_leaves - k]:
            a, b = min(m.left), min(m.right)
            groups[min(a, b)] = m.left | m.right
            del groups[max(a, b)]
        return [groups[key] for key in sorted(groups)]


@dataclass(frozen=True)
class QualityClustering:
    k: int
    labels: np.ndarray  # 1 = best quality
    centroids: np.ndarray
    scores: np.ndarray
    h: np.ndarray

    @property
    def sizes(self) -> np.ndarray:
        return self.h.sum(axis=0)


def standardize(indicators) -> np.ndarray:
    x = np.asarray(indicators, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("indicators must be a 2-d array with at least two rows")
    sd = x.std(axis=0, ddof=1)
    bad = np.flatnonzero(~(sd > 0))
    if bad.size:
        raise ValueError(f"indicator column {int(bad[0])} has zero variance")
    return (x - x.mean(axis=0)) / sd


def ward_cluster(points) -> Dendrogram:
    """Agglomerate ``points`` (A x q) with Ward linkage.

    Equal-cost candidates (within a relative 1e-12) are resolved by the
    smallest (min-leaf, max-leaf) pair, each group being keyed by its
    smallest leaf index.
    """
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least two points to cluster")
    diff = x[:, None, :] - x[None, :, :]
    d = np.einsum("ijk,ijk->ij", diff, diff)
    # slot index == smallest leaf in the group
    size = np.ones(n)
    members = {i: frozenset([i]) for i in range(n)}
    active = np.ones(n, dtype=bool)
    big = np.inf
    work = d.copy()
    work[np.tril_indices(n)] = big
    merges = []
    for _ in range(n - 1):
        best = work.min()
        cand = np.flatnonzero(work.ravel() <= best + TIE_RTOL * max(abs(best), 1e-300))
        a, b = divmod(int(cand[0]), n)  # row-major first == lexicographic smallest
        merges.append(Merge(members[a], members[b], float(best)))
        na, nb = size[a], size[b]
        ks = np.flatnonzero(active)
        ks = ks[(ks != a) & (ks != b)]
        nk = size[ks]
        dab = d[a, b]
        new = ((na + nk) * d[ks, a] + (nb + nk) * d[ks, b] - nk * dab) / (na + nb + nk)
        d[ks, a] = d[a, ks] = new
        size[a] = na + nb
        members[a] = members[a] | members.pop(b)
        active[b] = False
        work[b, :] = big
        work[:, b] = big
        lo, hi = np.minimum(ks, a), np.maximum(ks, a)
        work[lo, hi] = new
    return Dendrogram(n, tuple(merges))


def mean_score(centroid: np.ndarray) -> float:
    return float(np.mean(centroid))


def cut_and_order(dendrogram: Dendrogram, standardized, k: int,
                  score: Callable[[np.ndarray], float] = mean_score) -> QualityClustering:
    """Cut into ``k`` groups and relabel by descending centroid score.

    Label 1 is the group with the highest score (best data quality).
    Equal scores keep the order of the groups' smallest leaf.
    """
    x = np.asarray(standardized, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != dendrogram.n_leaves:
        raise ValueError("standardized matrix rows do not match the dendrogram leaves")
    groups = dendrogram.cut(k)
    cents = np.array([x[sorted(g)].mean(axis=0) for g in groups])
    scores = np.array([score(c) for c in cents])
    order = sorted(range(k), key=lambda j: (-scores[j], min(groups[j])))
    labels = np.zeros(x.shape[0], dtype=np.int64)
    for new, j in enumerate(order, start=1):
        labels[sorted(groups[j])] = new
    h = np.zeros((x.shape[0], k), dtype=np.int64)
    h[np.arange(x.shape[0]), labels - 1] = 1
    return QualityClustering(k=k, labels=labels, centroids=cents[order], scores=scores[order], h=h)


def quality_clustering(indicators, k: int, standardize_first: bool = True) -> tuple[QualityClustering, Dendrogram]:
    x = standardize(indicators) if standardize_first else np.asarray(indicators, dtype=float)
    dend = ward_cluster(x)
    return cut_and_order(dend, x, k), dend


def merge_height_report(dendrogram: Dendrogram, max_groups: int = 30) -> list[tuple[int, float]]:
    """(groups before merge, merge height) for the last merges; the
    elbow in these heights is the usual guide for choosing K."""
    n = dendrogram.n_leaves
    out = []
    for step in range(n - 2, max(-1, n - 2 - max_groups), -1):
        out.append((n - step, dendrogram.merges[step].height))
    return out


def labels_to_membership(labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    k = int(labels.max())
    if labels.min() < 1 or set(np.unique(labels)) != set(range(1, k + 1)):
        raise ValueError("cluster labels must cover 1..K with no empty group")
    h = np.zeros((len(labels), k), dtype=np.int64)
    h[np.arange(len(labels)), labels - 1] = 1
    return h
