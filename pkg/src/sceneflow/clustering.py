"""Density clustering of dynamic points into moving-object candidates.

The contract is behavioral: two dynamic points belong to one cluster iff they
are connected by a chain of dynamic points with consecutive gaps at most
epsilon, and components smaller than the minimum cluster size are noise. This
is what dense, uniformly sampled objects produce under any density clusterer
with the two published parameters; clustering is applied to dynamic points
only. Static points never appear in any cluster.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .geometry import PointCloud


@dataclass(frozen=True)
class ClusterConfig:
    min_cluster_size: int = 20
    epsilon: float = 0.7  # density radius, meters

    def __post_init__(self):
        if self.min_cluster_size < 2:
            raise ValueError("min_cluster_size must be at least 2")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass(frozen=True)
class ClusterSet:
    """Partition of a frame's dynamic point indices into clusters plus noise.

    Indices are cloud-level point indices (each ascending within its list).
    Cluster ids follow the order of the lowest contained point index.
    """

    clusters: tuple  # tuple of int64 index arrays
    noise: np.ndarray  # int64 index array
    n_points: int  # size of the cloud the indices refer to

    def __post_init__(self):
        object.__setattr__(self, "clusters", tuple(np.asarray(c, dtype=np.int64) for c in self.clusters))
        object.__setattr__(self, "noise", np.asarray(self.noise, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.clusters)

    @property
    def n_dynamic(self) -> int:
        return sum(len(c) for c in self.clusters) + len(self.noise)

    def labels(self) -> np.ndarray:
        """Per-cloud-point labels: cluster id, -1 for dynamic noise, -2 for static."""
        lab = np.full(self.n_points, -2, dtype=np.int32)
        lab[self.noise] = -1
        for cid, members in enumerate(self.clusters):
            lab[members] = cid
        return lab

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "ClusterSet":
        labels = np.asarray(labels)
        n_clusters = int(labels.max()) + 1 if (labels >= 0).any() else 0
        clusters = [np.flatnonzero(labels == cid) for cid in range(n_clusters)]
        return cls(tuple(clusters), np.flatnonzero(labels == -1), len(labels))


def cluster_dynamic(cloud: PointCloud, dynamic_mask, config: ClusterConfig | None = None) -> ClusterSet:
    """Group the dynamic points of a frame into object candidates.

    Zero dynamic points yield a valid empty ClusterSet. Output is deterministic
    and permutation-equivariant up to cluster numbering.
    """
    config = config or ClusterConfig()
    mask = np.asarray(dynamic_mask, dtype=bool)
    if mask.shape != (len(cloud),):
        raise ValueError("dynamic mask must align with the cloud")
    dyn_idx = np.flatnonzero(mask)
    n_dyn = len(dyn_idx)
    if n_dyn == 0:
        return ClusterSet((), np.empty(0, dtype=np.int64), len(cloud))

    pts = cloud.points[dyn_idx]
    tree = cKDTree(pts)
    pairs = tree.query_pairs(config.epsilon, output_type="ndarray")
    if len(pairs):
        ones = np.ones(len(pairs), dtype=np.int8)
        graph = coo_matrix((ones, (pairs[:, 0], pairs[:, 1])), shape=(n_dyn, n_dyn))
        _, comp = connected_components(graph, directed=False)
    else:
        comp = np.arange(n_dyn)

    order = np.argsort(comp, kind="stable")
    counts = np.bincount(comp)
    groups = np.split(dyn_idx[order], np.cumsum(counts)[:-1])
    clusters = [g for g in groups if len(g) >= config.min_cluster_size]
    noise = [g for g in groups if len(g) < config.min_cluster_size]
    clusters.sort(key=lambda m: int(m[0]))
    noise_idx = np.sort(np.concatenate(noise)) if noise else np.empty(0, dtype=np.int64)
    return ClusterSet(tuple(clusters), noise_idx, len(cloud))
