"""File formats, run configuration, and caching.

Binary formats are little-endian with a four-byte magic and a u16 version.
Points are stored as 32-bit floats on disk (LiDAR precision) while all
in-memory math runs in 64-bit; the asymmetry is intentional. Writes go through
a temporary file plus rename so caches are never observed half-written.

    frame  "SFPC": u16 version, u32 count, f64 timestamp,
            then per point x, y, z (f32) and a flags byte
            (bit0 ground, bit1 dynamic, bit2 foreground)
    flow   "SFFL": u16 version, u32 count, then per point x, y, z (f32)
    mask   "SFMK": u16 version, u32 count, then one u8 per point
    labels "SFCL": u16 version, u32 count, then one i32 per point
            (cluster id, -1 dynamic noise, -2 static)
    grid   "SFOG": u16 version, classifier params, frame count, voxel count,
            then key-sorted arrays of packed keys and per-voxel evidence
    poses  text, one line per frame: timestamp then 12 reals (row-major 3x4)
"""

from __future__ import annotations

import os
import struct
import tempfile
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, fields

import numpy as np

from .clustering import ClusterConfig, ClusterSet
from .geometry import ORTHONORMAL_TOL, PointCloud, RigidTransform
from .losses import LossWeights
from .metrics import EvalConfig
from .occupancy import ClassifierConfig, OccupancyGrid
from .solver import SolverConfig

FRAME_MAGIC = b"SFPC"
FLOW_MAGIC = b"SFFL"
MASK_MAGIC = b"SFMK"
LABELS_MAGIC = b"SFCL"
GRID_MAGIC = b"SFOG"
FORMAT_VERSION = 1

FLAG_GROUND = 0x01
FLAG_DYNAMIC = 0x02
FLAG_FOREGROUND = 0x04

_POINT_DTYPE = np.dtype([("xyz", "<f4", (3,)), ("flags", "u1")])


class DataFormatError(ValueError):
    pass


@contextmanager
def _atomic_write(path):
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise DataFormatError(f"truncated file while reading {what}")
    return buf


def _check_header(fh, magic, path):
    got = fh.read(4)
    if got != magic:
        raise DataFormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")


def write_frame(path, cloud: PointCloud, ground=None, dynamic=None, foreground=None):
    """Write a frame file; optional label masks become flag bits."""
    n = len(cloud)
    rec = np.zeros(n, dtype=_POINT_DTYPE)
    rec["xyz"] = cloud.points.astype("<f4")
    flags = np.zeros(n, dtype=np.uint8)
    for mask, bit in ((ground, FLAG_GROUND), (dynamic, FLAG_DYNAMIC), (foreground, FLAG_FOREGROUND)):
        if mask is not None:
            flags |= np.asarray(mask, dtype=bool).astype(np.uint8) * bit
    rec["flags"] = flags
    with _atomic_write(path) as fh:
        fh.write(FRAME_MAGIC)
        fh.write(struct.pack("<HId", FORMAT_VERSION, n, float(cloud.timestamp)))
        fh.write(rec.tobytes())


def read_frame(path):
    """Read a frame file; returns (cloud, flag masks dict)."""
    with open(path, "rb") as fh:
        _check_header(fh, FRAME_MAGIC, path)
        count, timestamp = struct.unpack("<Id", _read_exact(fh, 12, "frame header"))
        rec = np.frombuffer(_read_exact(fh, count * _POINT_DTYPE.itemsize, "points"), dtype=_POINT_DTYPE)
        if fh.read(1):
            raise DataFormatError(f"{path}: trailing bytes after {count} points")
    cloud = PointCloud(rec["xyz"].astype(np.float64), timestamp=timestamp)
    flags = rec["flags"]
    masks = {
        "ground": (flags & FLAG_GROUND) != 0,
        "dynamic": (flags & FLAG_DYNAMIC) != 0,
        "foreground": (flags & FLAG_FOREGROUND) != 0,
    }
    return cloud, masks


def write_flow(path, flow):
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 2 or flow.shape[1] != 3:
        raise ValueError("flow must have shape (N, 3)")
    with _atomic_write(path) as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(flow)))
        fh.write(flow.astype("<f4").tobytes())


def read_flow(path):
    with open(path, "rb") as fh:
        _check_header(fh, FLOW_MAGIC, path)
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "flow header"))
        data = np.frombuffer(_read_exact(fh, count * 12, "flow vectors"), dtype="<f4")
        if fh.read(1):
            raise DataFormatError(f"{path}: trailing bytes")
    return data.reshape(count, 3).astype(np.float64)


def write_mask(path, mask):
    mask = np.asarray(mask, dtype=bool)
    with _atomic_write(path) as fh:
        fh.write(MASK_MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(mask)))
        fh.write(mask.astype(np.uint8).tobytes())


def read_mask(path):
    with open(path, "rb") as fh:
        _check_header(fh, MASK_MAGIC, path)
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "mask header"))
        data = np.frombuffer(_read_exact(fh, count, "mask bytes"), dtype=np.uint8)
        if fh.read(1):
            raise DataFormatError(f"{path}: trailing bytes")
    return data != 0


def write_labels(path, cluster_set: ClusterSet):
    labels = cluster_set.labels().astype("<i4")
    with _atomic_write(path) as fh:
        fh.write(LABELS_MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(labels)))
        fh.write(labels.tobytes())


def read_labels(path) -> ClusterSet:
    with open(path, "rb") as fh:
        _check_header(fh, LABELS_MAGIC, path)
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "labels header"))
        data = np.frombuffer(_read_exact(fh, count * 4, "labels"), dtype="<i4")
        if fh.read(1):
            raise DataFormatError(f"{path}: trailing bytes")
    return ClusterSet.from_labels(data.astype(np.int64))


def write_grid(path, grid: OccupancyGrid):
    arrays = grid.to_arrays()
    cfg = grid.config
    n = len(arrays["keys"])
    with _atomic_write(path) as fh:
        fh.write(GRID_MAGIC)
        fh.write(
            struct.pack(
                "<HdiddIQ",
                FORMAT_VERSION,
                cfg.voxel_size,
                cfg.hit_padding,
                cfg.free_margin,
                cfg.max_range,
                arrays["frames_integrated"],
                n,
            )
        )
        fh.write(arrays["keys"].astype("<i8").tobytes())
        fh.write(arrays["hit_count"].astype("<u4").tobytes())
        fh.write(arrays["free_count"].astype("<u4").tobytes())
        fh.write(arrays["first_hit"].astype("<f8").tobytes())
        fh.write(arrays["first_free"].astype("<f8").tobytes())


def read_grid(path) -> OccupancyGrid:
    with open(path, "rb") as fh:
        _check_header(fh, GRID_MAGIC, path)
        header = struct.unpack("<diddIQ", _read_exact(fh, 40, "grid header"))
        voxel_size, hit_padding, free_margin, max_range, n_frames, n = header
        arrays = {
            "keys": np.frombuffer(_read_exact(fh, n * 8, "keys"), dtype="<i8"),
            "hit_count": np.frombuffer(_read_exact(fh, n * 4, "hit counts"), dtype="<u4"),
            "free_count": np.frombuffer(_read_exact(fh, n * 4, "free counts"), dtype="<u4"),
            "first_hit": np.frombuffer(_read_exact(fh, n * 8, "first hit times"), dtype="<f8"),
            "first_free": np.frombuffer(_read_exact(fh, n * 8, "first free times"), dtype="<f8"),
            "frames_integrated": n_frames,
        }
        if fh.read(1):
            raise DataFormatError(f"{path}: trailing bytes")
    cfg = ClassifierConfig(voxel_size, hit_padding, free_margin, max_range)
    return OccupancyGrid.from_arrays(arrays, cfg)


def write_poses(path, poses, timestamps=None):
    poses = list(poses)
    if timestamps is None:
        timestamps = [float(i) for i in range(len(poses))]
    lines = []
    for ts, pose in zip(timestamps, poses):
        vals = " ".join(f"{v:.17g}" for v in pose.matrix34().ravel())
        lines.append(f"{ts:.17g} {vals}")
    text = "\n".join(lines) + "\n"
    with _atomic_write(path) as fh:
        fh.write(text.encode())


def read_poses(path):
    """Read a pose file; returns (poses, timestamps).

    Rotations must be orthonormal within 1e-6 and are re-orthonormalized (with
    a warning) when they miss strict tolerance.
    """
    poses, timestamps = [], []
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = line.split()
            if len(vals) != 13:
                raise DataFormatError(f"{path}:{ln}: expected timestamp + 12 reals")
            nums = [float(v) for v in vals]
            timestamps.append(nums[0])
            m = np.array(nums[1:], dtype=np.float64).reshape(3, 4)
            r, t = m[:, :3], m[:, 3]
            err = np.abs(r.T @ r - np.eye(3)).max()
            if err > 1e-6:
                raise DataFormatError(f"{path}:{ln}: rotation not orthonormal (error {err:.3e})")
            if err > ORTHONORMAL_TOL or abs(np.linalg.det(r) - 1.0) > ORTHONORMAL_TOL:
                u, _, vt = np.linalg.svd(r)
                r = u @ vt
                if np.linalg.det(r) < 0:
                    u[:, -1] = -u[:, -1]
                    r = u @ vt
                warnings.warn(f"{path}:{ln}: re-orthonormalized rotation (error {err:.3e})")
            poses.append(RigidTransform(r, t))
    return poses, timestamps


# -- run configuration ---------------------------------------------------------------


@dataclass
class RunConfig:
    """Flat key-value configuration covering every pipeline stage.

    File syntax is `section.key = value` per line with `#` comments. Unknown
    keys are rejected. Defaults match the published pipeline settings.
    """

    voxel_size: float = 0.2
    hit_padding: int = 1
    free_margin: float = 0.2
    max_range: float = 70.0
    min_cluster_size: int = 20
    epsilon: float = 0.7
    max_iterations: int = 500
    learning_rate: float = 0.05
    convergence_tol: float = 1e-7
    seed: int = 0
    use_chamfer: bool = True
    use_dynamic_chamfer: bool = True
    use_static: bool = True
    use_cluster: bool = True
    weight_chamfer: float = 1.0
    weight_dynamic_chamfer: float = 1.0
    weight_static: float = 1.0
    weight_cluster: float = 1.0
    target_selector: str = "upper_bound"
    dynamic_threshold: float = 0.05
    roi_half_extent: float = 50.0
    ground_z: float | None = None  # z-threshold ground fallback, off by default

    _KEYS = {
        "classifier.voxel_size": "voxel_size",
        "classifier.hit_padding": "hit_padding",
        "classifier.free_margin": "free_margin",
        "classifier.max_range": "max_range",
        "cluster.min_size": "min_cluster_size",
        "cluster.epsilon": "epsilon",
        "solver.max_iterations": "max_iterations",
        "solver.learning_rate": "learning_rate",
        "solver.convergence_tol": "convergence_tol",
        "solver.seed": "seed",
        "loss.use_chamfer": "use_chamfer",
        "loss.use_dynamic_chamfer": "use_dynamic_chamfer",
        "loss.use_static": "use_static",
        "loss.use_cluster": "use_cluster",
        "loss.weight_chamfer": "weight_chamfer",
        "loss.weight_dynamic_chamfer": "weight_dynamic_chamfer",
        "loss.weight_static": "weight_static",
        "loss.weight_cluster": "weight_cluster",
        "loss.target_selector": "target_selector",
        "eval.dynamic_threshold": "dynamic_threshold",
        "eval.roi_half_extent": "roi_half_extent",
        "eval.ground_z": "ground_z",
    }

    @classmethod
    def load(cls, path) -> "RunConfig":
        cfg = cls()
        types = {f.name: type(getattr(cfg, f.name)) for f in fields(cls)}
        with open(path) as fh:
            for ln, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise DataFormatError(f"{path}:{ln}: expected `key = value`")
                key, value = (part.strip() for part in line.split("=", 1))
                attr = cls._KEYS.get(key)
                if attr is None:
                    raise DataFormatError(f"{path}:{ln}: unknown key {key!r}")
                kind = types[attr]
                try:
                    if attr == "ground_z":
                        parsed = None if value.lower() in ("none", "off") else float(value)
                    elif kind is bool:
                        if value.lower() not in ("true", "false", "0", "1"):
                            raise ValueError(value)
                        parsed = value.lower() in ("true", "1")
                    elif kind is str:
                        parsed = value
                    else:
                        parsed = kind(value)
                except ValueError as exc:
                    raise DataFormatError(f"{path}:{ln}: bad value for {key}: {value!r}") from exc
                setattr(cfg, attr, parsed)
        return cfg

    def dump(self) -> str:
        lines = []
        for key, attr in self._KEYS.items():
            value = getattr(self, attr)
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif value is None:
                value = "none"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def classifier_config(self) -> ClassifierConfig:
        return ClassifierConfig(self.voxel_size, self.hit_padding, self.free_margin, self.max_range)

    def cluster_config(self) -> ClusterConfig:
        return ClusterConfig(self.min_cluster_size, self.epsilon)

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            self.weight_chamfer * self.use_chamfer,
            self.weight_dynamic_chamfer * self.use_dynamic_chamfer,
            self.weight_static * self.use_static,
            self.weight_cluster * self.use_cluster,
        )

    def solver_config(self) -> SolverConfig:
        return SolverConfig(
            max_iterations=self.max_iterations,
            learning_rate=self.learning_rate,
            convergence_tol=self.convergence_tol,
            seed=self.seed,
            weights=self.loss_weights(),
            target_selector=self.target_selector,
        )

    def eval_config(self) -> EvalConfig:
        return EvalConfig(self.dynamic_threshold, self.roi_half_extent)
