"""Class centroids and selection of the most dissimilar target classes."""

from dataclasses import dataclass

import numpy as np

from . import embedder
from .errors import InputError


@dataclass
class CentroidTable:
    labels: tuple
    centroids: np.ndarray  # (N, d), row i belongs to labels[i]

    def __post_init__(self):
        if len(self.labels) < 1:
            raise InputError("centroid table needs at least one class")
        if len(self.labels) != len(self.centroids):
            raise InputError("labels and centroids differ in length")

    @property
    def n_classes(self):
        return len(self.labels)

    def __getitem__(self, label):
        return self.centroids[self.labels.index(label)]

    def as_dict(self):
        return dict(zip(self.labels, self.centroids))


@dataclass(frozen=True)
class TargetSet:
    labels: tuple
    features: np.ndarray  # (m, d)
    scores: tuple

    def __post_init__(self):
        if len(self.labels) < 1:
            raise InputError("empty target set")
        if len(set(self.labels)) != len(self.labels):
            raise InputError("target labels must be distinct")
        if any(a < b for a, b in zip(self.scores, self.scores[1:])):
            raise InputError("target scores must be non-increasing")

    def __len__(self):
        return len(self.labels)

    def to_csv_rows(self):
        return [(lab, score) for lab, score in zip(self.labels, self.scores)]


def compute_centroids(pool, model):
    """Mean feature vector of each class in `pool` (labels sorted ascending)."""
    if len(pool) == 0:
        raise InputError("empty pool")
    feats = embedder.forward(model, pool.images)
    labels = sorted(set(np.asarray(pool.labels).tolist()))
    cents = np.stack([feats[pool.labels == lab].mean(axis=0) for lab in labels])
    return CentroidTable(tuple(labels), cents)


def distance_set(leaked, table, model=None, features=None):
    """For each class k, min over the leaked images of ||phi(x) - C_k||_2.

    Pass precomputed `features` to skip the forward pass.
    """
    if features is None:
        leaked = np.asarray(leaked, dtype=np.float64)
        if leaked.ndim == 2:
            leaked = leaked[None]
        if len(leaked) == 0:
            raise InputError("empty leaked set")
        features = embedder.forward(model, leaked)
    features = np.atleast_2d(features)
    if len(features) == 0:
        raise InputError("empty leaked set")
    diff = features[:, None, :] - table.centroids[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=-1)).min(axis=0)
    return {lab: float(v) for lab, v in zip(table.labels, d)}


def select_targets(distances, m, exclude=None, table=None):
    """The `m` classes with the largest distance, ties to the lower label.

    With `table` given, the returned TargetSet carries each target's centroid.
    """
    cands = [(lab, d) for lab, d in distances.items() if lab != exclude]
    if not 1 <= m <= len(cands):
        raise InputError(f"m={m} outside [1, {len(cands)}]")
    cands.sort(key=lambda item: (-item[1], item[0]))
    chosen = cands[:m]
    labels = tuple(lab for lab, _ in chosen)
    scores = tuple(d for _, d in chosen)
    if table is not None:
        feats = np.stack([table[lab] for lab in labels])
    else:
        feats = np.zeros((m, 0))
    return TargetSet(labels, feats, scores)
