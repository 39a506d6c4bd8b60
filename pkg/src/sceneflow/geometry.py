"""Point cloud primitives: rigid transforms, ego-motion flow, exact nearest neighbors.

Points are stored as float64 internally (file I/O uses float32, see sceneflow.io).
All containers are immutable after construction; derived per-point attributes
(dynamic flags, cluster ids) live in parallel arrays keyed by point index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

ORTHONORMAL_TOL = 1e-9


def as_points(arr) -> np.ndarray:
    """Coerce to a read-only (N, 3) float64 array."""
    pts = np.ascontiguousarray(arr, dtype=np.float64)
    if pts.ndim == 1 and pts.size == 3:
        pts = pts.reshape(1, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {np.shape(arr)}")
    return pts


@dataclass(frozen=True)
class PointCloud:
    """Ordered, index-addressable set of finite 3D points in a named frame."""

    points: np.ndarray  # (N, 3) float64
    frame_id: str = "sensor"
    timestamp: float = 0.0

    def __post_init__(self):
        pts = as_points(self.points).copy()
        if pts.size and not np.isfinite(pts).all():
            raise ValueError("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) motion p -> R @ p + t with R orthonormal, det +1."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,) meters

    def __post_init__(self):
        r = np.ascontiguousarray(self.rotation, dtype=np.float64)
        t = np.ascontiguousarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.isfinite(r).all() or not np.isfinite(t).all():
            raise ValueError("transform contains non-finite entries")
        err = np.abs(r.T @ r - np.eye(3)).max()
        if err > ORTHONORMAL_TOL or abs(np.linalg.det(r) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError(f"rotation is not orthonormal with det +1 (error {err:.3e})")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rt(cls, rotation, translation) -> "RigidTransform":
        return cls(np.asarray(rotation, float), np.asarray(translation, float))

    @classmethod
    def rotation_z(cls, angle_rad: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        c, s = np.cos(angle_rad), np.sin(angle_rad)
        r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(r, np.asarray(translation, float))

    def apply(self, points) -> np.ndarray:
        """Map points (N, 3) or (3,) through R @ p + t."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform equal to applying `other` first, then `self`."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def matrix34(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation.reshape(3, 1)])


def relative_motion(pose_from: RigidTransform, pose_to: RigidTransform) -> RigidTransform:
    """Motion mapping coordinates of the `pose_from` frame into the `pose_to` frame.

    Poses are frame-to-world; the result is pose_to^-1 composed with pose_from,
    i.e. the transform a static world point appears to undergo between frames.
    """
    return pose_to.inverse().compose(pose_from)


def apply_transform(cloud: PointCloud, transform: RigidTransform) -> PointCloud:
    """Return a new cloud with every point mapped by R @ p + t, order preserved."""
    return PointCloud(transform.apply(cloud.points), cloud.frame_id, cloud.timestamp)


def ego_flow(cloud: PointCloud, ego_motion: RigidTransform) -> np.ndarray:
    """Per-point flow induced by the sensor's own motion: (R @ p + t) - p.

    The total estimated flow decomposes as ego flow plus a residual; adding this
    field to the cloud reproduces the rigidly moved points.
    """
    if len(cloud) == 0:
        raise ValueError("ego flow undefined for an empty cloud")
    return ego_motion.apply(cloud.points) - cloud.points


class NearestNeighborIndex:
    """Exact Euclidean nearest-neighbor index over one point cloud.

    Queries return a point actually contained in the indexed cloud achieving the
    minimum distance; exact distance ties are broken by the lowest point index.
    Immutable and safe for concurrent read-only queries.
    """

    def __init__(self, cloud):
        pts = cloud.points if isinstance(cloud, PointCloud) else as_points(cloud)
        if pts.shape[0] == 0:
            raise ValueError("empty index target")
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def query(self, points, workers: int | None = None):
        """Nearest neighbor for each query point.

        Returns (distances, indices); scalars for a single (3,) query. Queries
        are parallelized for large batches (identical results either way).
        """
        q = np.asarray(points, dtype=np.float64)
        single = q.ndim == 1
        q2 = q.reshape(1, 3) if single else q
        if workers is None:
            workers = -1 if len(q2) >= 20_000 else 1
        n = self.points.shape[0]
        if n == 1:
            dist = np.linalg.norm(q2 - self.points[0], axis=1)
            idx = np.zeros(len(q2), dtype=np.intp)
        else:
            # k=2 exposes exact distance ties so the lowest-index rule can be applied.
            dist2, idx2 = self._tree.query(q2, k=2, workers=workers)
            dist = dist2[:, 0].copy()
            idx = idx2[:, 0].copy()
            with np.errstate(over="ignore"):
                for row in np.flatnonzero(dist2[:, 1] == dist2[:, 0]):
                    sq = ((self.points - q2[row]) ** 2).sum(axis=1)
                    best = sq.min()
                    idx[row] = int(np.flatnonzero(sq == best)[0])
                    dist[row] = np.sqrt(best)
        if single:
            return float(dist[0]), int(idx[0])
        return dist, idx


def build_index(cloud) -> NearestNeighborIndex:
    """Build an exact nearest-neighbor index; errors on an empty cloud."""
    return NearestNeighborIndex(cloud)


def nn_distance(point, index: NearestNeighborIndex):
    """Exact minimum Euclidean distance from `point` into the indexed cloud.

    Returns (distance, neighbor_index). Squared forms are computed by callers.
    """
    return index.query(np.asarray(point, dtype=np.float64))
