"""Synthetic LiDAR-like scenes with exact ground-truth flow and labels.

Scenes are built from sampled static surfaces (walls, poles, ground patches)
and rigid box movers with per-frame SE(3) trajectories, observed from a moving
ego sensor at a fixed frequency. Surfaces are sampled on jittered lattices
(seeded, blue-noise-like); with `resample` on, every frame draws fresh jitter
so frame-to-frame point correspondence is broken like real scans, while the
no-resample mode keeps exact correspondences for oracle tests. An optional
visibility filter keeps the nearest return per angular bin.

Clouds are expressed in each frame's ego coordinates. Ground-truth flow maps a
frame-t point to the ego-t+1 coordinates of the same material point, so static
points carry exactly the ego-induced flow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import PointCloud, RigidTransform, relative_motion


@dataclass(frozen=True)
class Wall:
    """Vertical rectangular surface from start to end (xy), sampled on a lattice."""

    start: tuple
    end: tuple
    height: float
    spacing: float = 0.15
    base_z: float = 0.0


@dataclass(frozen=True)
class Pole:
    """Vertical line of samples (a slim post)."""

    x: float
    y: float
    height: float
    spacing: float = 0.08
    base_z: float = 0.0


@dataclass(frozen=True)
class GroundPatch:
    """Horizontal rectangle at fixed z, labeled as ground."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    spacing: float = 0.3
    z: float = 0.0


@dataclass(frozen=True)
class BoxMover:
    """Rigid box shell (5 faces, no underside) with a per-frame trajectory.

    Either give explicit object-to-world poses (one per frame) or an initial
    center plus a constant velocity and yaw. A zero velocity makes a parked,
    foreground-static object. Zero-thickness sizes collapse to a single plate.
    """

    size: tuple  # (lx, ly, lz) meters
    center: tuple = (0.0, 0.0, 0.0)
    velocity: tuple = (0.0, 0.0, 0.0)  # m/s, world frame
    yaw: float = 0.0
    spacing: float = 0.15
    poses: tuple | None = None  # explicit per-frame RigidTransforms, overrides the above
    foreground: bool = True

    def pose_at(self, frame: int, dt: float) -> RigidTransform:
        if self.poses is not None:
            return self.poses[frame]
        offset = np.asarray(self.center, float) + np.asarray(self.velocity, float) * (dt * frame)
        return RigidTransform.rotation_z(self.yaw, offset)


@dataclass(frozen=True)
class SensorModel:
    max_range: float = 70.0
    azimuth_resolution_deg: float = 0.4
    elevation_resolution_deg: float = 0.9
    occlusion: bool = False


@dataclass(frozen=True)
class SceneSpec:
    walls: tuple = ()
    poles: tuple = ()
    ground: tuple = ()
    movers: tuple = ()
    n_frames: int = 2
    hz: float = 10.0
    seed: int = 0
    ego_velocity: tuple = (0.0, 0.0, 0.0)  # m/s; simple translating ego
    ego_yaw_rate: float = 0.0  # rad/s, heading change of the simple ego
    ego_poses: tuple | None = None  # explicit ego-to-world poses, overrides velocity
    ego_height: float = 0.0
    resample: bool = True
    jitter: float = 0.35  # lattice jitter as a fraction of spacing
    dynamic_threshold: float = 0.05  # meters/frame, for ground-truth dynamic labels
    sensor: SensorModel = field(default_factory=SensorModel)

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError("a scene needs at least one frame")
        if self.hz <= 0:
            raise ValueError("frequency must be positive")
        for elem in (*self.walls, *self.poles, *self.ground, *self.movers):
            if elem.spacing <= 0:
                raise ValueError("sampling spacing must be positive")
        for mover in self.movers:
            if mover.poses is not None and len(mover.poses) < self.n_frames:
                raise ValueError("mover trajectory shorter than the scene")
        if self.ego_poses is not None and len(self.ego_poses) < self.n_frames:
            raise ValueError("ego trajectory shorter than the scene")

    def ego_pose_at(self, frame: int) -> RigidTransform:
        if self.ego_poses is not None:
            return self.ego_poses[frame]
        dt = 1.0 / self.hz
        offset = np.asarray(self.ego_velocity, float) * (dt * frame)
        offset = offset + np.array([0.0, 0.0, self.ego_height])
        return RigidTransform.rotation_z(self.ego_yaw_rate * dt * frame, offset)


@dataclass
class LabeledFrame:
    """One generated frame with exact labels, in ego coordinates."""

    cloud: PointCloud
    flow_to_next: np.ndarray | None  # (N, 3); None for the last frame
    dynamic: np.ndarray  # ground-truth metric-sense dynamic mask
    foreground: np.ndarray
    ground: np.ndarray
    mover: np.ndarray  # belongs to a mover object (mapping-sense ground truth)
    ego_pose: RigidTransform  # ego-to-world


def ego_motion_between(frames, t: int) -> RigidTransform:
    """Ego motion mapping frame-t coordinates into frame-(t+1) coordinates."""
    return relative_motion(frames[t].ego_pose, frames[t + 1].ego_pose)


def _lattice(n_u: int, n_v: int, len_u: float, len_v: float, rng, jitter: float):
    """Jittered lattice over [0, len_u] x [0, len_v]; exact lattice at jitter 0."""
    su, sv = len_u / n_u, len_v / n_v
    u = (np.arange(n_u) + 0.5) * su
    v = (np.arange(n_v) + 0.5) * sv
    uu, vv = np.meshgrid(u, v, indexing="ij")
    uu = uu.ravel()
    vv = vv.ravel()
    if jitter > 0.0:
        uu = uu + rng.uniform(-jitter, jitter, uu.size) * su
        vv = vv + rng.uniform(-jitter, jitter, vv.size) * sv
    return uu, vv


def _sample_wall(w: Wall, rng, jitter):
    start = np.asarray(w.start, float)
    end = np.asarray(w.end, float)
    length = float(np.linalg.norm(end - start))
    n_u = max(1, round(length / w.spacing))
    n_v = max(1, round(w.height / w.spacing))
    uu, vv = _lattice(n_u, n_v, length, w.height, rng, jitter)
    direction = (end - start) / length
    pts = np.empty((uu.size, 3))
    pts[:, 0] = start[0] + uu * direction[0]
    pts[:, 1] = start[1] + uu * direction[1]
    pts[:, 2] = w.base_z + vv
    return pts


def _sample_pole(p: Pole, rng, jitter):
    n = max(2, round(p.height / p.spacing))
    z = (np.arange(n) + 0.5) * (p.height / n)
    if jitter > 0.0:
        z = z + rng.uniform(-jitter, jitter, n) * (p.height / n)
    pts = np.empty((n, 3))
    pts[:, 0] = p.x
    pts[:, 1] = p.y
    pts[:, 2] = p.base_z + z
    return pts


def _sample_ground(g: GroundPatch, rng, jitter):
    lx, ly = g.x_max - g.x_min, g.y_max - g.y_min
    n_u = max(1, round(lx / g.spacing))
    n_v = max(1, round(ly / g.spacing))
    uu, vv = _lattice(n_u, n_v, lx, ly, rng, jitter)
    pts = np.empty((uu.size, 3))
    pts[:, 0] = g.x_min + uu
    pts[:, 1] = g.y_min + vv
    pts[:, 2] = g.z
    return pts


def _sample_box_shell(size, spacing, rng, jitter):
    """Object-frame samples of a box shell centered at the origin (no underside)."""
    lx, ly, lz = (float(s) for s in size)
    faces = []

    def face(len_u, len_v, build):
        if len_u <= 0 or len_v <= 0:
            return
        n_u = max(1, round(len_u / spacing))
        n_v = max(1, round(len_v / spacing))
        uu, vv = _lattice(n_u, n_v, len_u, len_v, rng, jitter)
        faces.append(build(uu - len_u / 2.0, vv))

    def plane_x(sign):
        return lambda uu, vv: np.column_stack([np.full(uu.size, sign * lx / 2.0), uu, vv - lz / 2.0])

    def plane_y(sign):
        return lambda uu, vv: np.column_stack([uu, np.full(uu.size, sign * ly / 2.0), vv - lz / 2.0])

    def plane_top(uu, vv):
        return np.column_stack([uu, vv - ly / 2.0, np.full(uu.size, lz / 2.0)])

    face(ly, lz, plane_x(+1))
    if lx > 0:
        face(ly, lz, plane_x(-1))
    face(lx, lz, plane_y(+1))
    if ly > 0:
        face(lx, lz, plane_y(-1))
    if lz > 0:
        face(lx, ly, plane_top)
    if not faces:
        raise ValueError("box mover has no sampleable surface")
    return np.vstack(faces)


def _visible(points_ego: np.ndarray, sensor: SensorModel) -> np.ndarray:
    """Keep the nearest return per angular bin (simple ray-casting visibility)."""
    n = len(points_ego)
    r = np.linalg.norm(points_ego, axis=1)
    az = np.arctan2(points_ego[:, 1], points_ego[:, 0])
    el = np.arctan2(points_ego[:, 2], np.hypot(points_ego[:, 0], points_ego[:, 1]))
    az_bin = np.floor(az / math.radians(sensor.azimuth_resolution_deg)).astype(np.int64)
    el_bin = np.floor(el / math.radians(sensor.elevation_resolution_deg)).astype(np.int64)
    bin_key = az_bin * 1_000_003 + el_bin
    order = np.lexsort((np.arange(n), r, bin_key))
    sorted_keys = bin_key[order]
    first = np.ones(n, dtype=bool)
    first[1:] = sorted_keys[1:] != sorted_keys[:-1]
    keep = np.zeros(n, dtype=bool)
    keep[order[first]] = True
    return keep


def generate(spec: SceneSpec):
    """Generate the labeled frame sequence for a scene; deterministic given the seed."""
    dt = 1.0 / spec.hz
    statics = [("wall", w) for w in spec.walls]
    statics += [("pole", p) for p in spec.poles]
    statics += [("ground", g) for g in spec.ground]
    samplers = {"wall": _sample_wall, "pole": _sample_pole, "ground": _sample_ground}

    frames = []
    for t in range(spec.n_frames):
        sample_frame = t if spec.resample else 0
        parts = []  # (world_now, world_next, world_prev, ground, foreground, mover)
        for ei, (kind, elem) in enumerate(statics):
            rng = np.random.default_rng((spec.seed, sample_frame, ei))
            pts = samplers[kind](elem, rng, spec.jitter)
            parts.append((pts, pts, pts, kind == "ground", False, False))
        for mi, mover in enumerate(spec.movers):
            rng = np.random.default_rng((spec.seed, sample_frame, len(statics) + mi))
            local = _sample_box_shell(mover.size, mover.spacing, rng, spec.jitter)
            now = mover.pose_at(t, dt).apply(local)
            nxt = mover.pose_at(t + 1, dt).apply(local) if t + 1 < spec.n_frames else now
            prv = mover.pose_at(t - 1, dt).apply(local) if t > 0 else now
            parts.append((now, nxt, prv, False, mover.foreground, True))

        world = np.vstack([p[0] for p in parts])
        world_next = np.vstack([p[1] for p in parts])
        world_prev = np.vstack([p[2] for p in parts])
        ground = np.concatenate([np.full(len(p[0]), p[3]) for p in parts])
        foreground = np.concatenate([np.full(len(p[0]), p[4]) for p in parts])
        mover_mask = np.concatenate([np.full(len(p[0]), p[5]) for p in parts])

        ego = spec.ego_pose_at(t)
        pts_ego = ego.inverse().apply(world)
        keep = np.linalg.norm(pts_ego, axis=1) <= spec.sensor.max_range
        if spec.sensor.occlusion:
            keep &= _visible(pts_ego, spec.sensor)

        pts_ego = pts_ego[keep]
        world_next = world_next[keep]
        world_prev = world_prev[keep]
        world = world[keep]

        if t + 1 < spec.n_frames:
            next_inv = spec.ego_pose_at(t + 1).inverse()
            flow = next_inv.apply(world_next) - pts_ego
            displacement = np.linalg.norm(world_next - world, axis=1)
        else:
            flow = None
            displacement = np.linalg.norm(world - world_prev, axis=1)

        frames.append(
            LabeledFrame(
                cloud=PointCloud(pts_ego, frame_id=f"frame{t:03d}", timestamp=t * dt),
                flow_to_next=flow,
                dynamic=displacement > spec.dynamic_threshold,
                foreground=foreground[keep],
                ground=ground[keep],
                mover=mover_mask[keep],
                ego_pose=ego,
            )
        )
    return frames


def fig3_scenario(length=5.0, height=1.2, spacing=0.04, speed=6.0, n_frames=2, seed=7):
    """Long plate translating along its own axis by less than its length per frame.

    The plate is lattice-sampled without jitter and the per-frame translation
    is a whole number of lattice steps, so interior source points coincide
    exactly with next-frame points (zero NN distance) while the trailing slice
    sits one full translation behind its own copies. A static wall roughly
    three times the plate's point count provides background. No resampling,
    identity ego.
    """
    translation = speed / 10.0
    steps = translation / spacing
    if abs(steps - round(steps)) > 1e-9:
        raise ValueError("per-frame translation must be a whole number of lattice steps")
    plate = BoxMover(
        size=(length, 0.0, height),
        center=(0.0, 2.0, height / 2.0),
        velocity=(speed, 0.0, 0.0),
        spacing=spacing,
    )
    wall = Wall(start=(-4.0, 6.0), end=(10.0, 6.0), height=2.4, spacing=0.055)
    return generate(
        SceneSpec(
            walls=(wall,),
            movers=(plate,),
            n_frames=n_frames,
            seed=seed,
            resample=False,
            jitter=0.0,
            sensor=SensorModel(occlusion=False),
        )
    )


def scene_spec_from_dict(raw: dict) -> SceneSpec:
    """Build a SceneSpec from a plain dict (the CLI's JSON scene format)."""

    def build(cls, data, what):
        try:
            return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})
        except TypeError as exc:
            raise ValueError(f"bad {what} entry: {exc}") from exc

    raw = dict(raw)
    ego = raw.pop("ego", {})
    sensor = raw.pop("sensor", None)
    kwargs = {
        "walls": tuple(build(Wall, w, "wall") for w in raw.pop("walls", [])),
        "poles": tuple(build(Pole, p, "pole") for p in raw.pop("poles", [])),
        "ground": tuple(build(GroundPatch, g, "ground") for g in raw.pop("ground", [])),
        "movers": tuple(build(BoxMover, m, "mover") for m in raw.pop("movers", [])),
    }
    if sensor is not None:
        kwargs["sensor"] = build(SensorModel, sensor, "sensor")
    if "velocity" in ego:
        kwargs["ego_velocity"] = tuple(ego.pop("velocity"))
    if "height" in ego:
        kwargs["ego_height"] = float(ego.pop("height"))
    if ego:
        raise ValueError(f"unknown ego keys: {sorted(ego)}")
    for key in ("n_frames", "hz", "seed", "resample", "jitter", "dynamic_threshold"):
        if key in raw:
            kwargs[key] = raw.pop(key)
    if raw:
        raise ValueError(f"unknown scene keys: {sorted(raw)}")
    return SceneSpec(**kwargs)


def ablation_suite(n_scenes=10, base_seed=400):
    """Fixed street-scene suite used for loss-ablation comparisons.

    Each scene holds a long mover and a car-sized mover squeezing past poles
    and walls (so full-cloud nearest neighbors cross object boundaries), a
    parked car, and a translating ego. Frames are independently resampled;
    dynamic points outnumber static ones so the per-class means keep every
    bucket's behavior visible. Two frames per scene; evaluation runs on the
    (0, 1) pair.
    """
    specs = []
    for i in range(n_scenes):
        rng = np.random.default_rng((base_seed, i))
        wall_y = rng.uniform(6.5, 8.5)
        side = rng.choice((-1.0, 1.0))
        # the bus hugs its wall so full-cloud nearest neighbors of its edge
        # points land on static structure; the dynamic-only loss corrects that
        bus_y = side * (wall_y - 1.15 - rng.uniform(0.25, 0.45))
        bus_x = rng.uniform(-11.0, -5.0)
        bus_speed = rng.uniform(3.2, 4.0)
        car_y = -side * rng.uniform(2.0, 3.4)
        car_speed = rng.uniform(2.5, 3.5) * rng.choice((-1.0, 1.0))
        walls = (
            Wall(start=(-15.0, wall_y), end=(15.0, wall_y), height=2.0, spacing=0.3),
            Wall(start=(-15.0, -wall_y), end=(15.0, -wall_y), height=2.0, spacing=0.3),
        )
        poles = (
            Pole(x=bus_x + rng.uniform(3.0, 6.0), y=bus_y - side * (1.15 + rng.uniform(0.2, 0.35)), height=2.6),
            Pole(x=rng.uniform(-4.0, 4.0), y=car_y + side * (0.9 + rng.uniform(0.2, 0.35)), height=2.6),
        )
        movers = (
            BoxMover(size=(8.0, 2.3, 2.6), center=(bus_x, bus_y, 1.3),
                     velocity=(bus_speed, 0.0, 0.0), spacing=0.16),
            BoxMover(size=(4.2, 1.8, 1.5), center=(rng.uniform(-4.0, 4.0), car_y, 0.75),
                     velocity=(car_speed, 0.0, 0.0), spacing=0.16),
            BoxMover(size=(4.2, 1.8, 1.5), center=(rng.uniform(-12.0, 12.0), side * (wall_y - 1.4), 0.75),
                     velocity=(0.0, 0.0, 0.0), spacing=0.2),  # parked
        )
        specs.append(
            SceneSpec(
                walls=walls,
                poles=poles,
                movers=movers,
                n_frames=2,
                seed=int(rng.integers(1 << 31)),
                ego_velocity=(rng.uniform(0.6, 1.0), 0.0, 0.0),
                ego_yaw_rate=rng.uniform(-0.06, 0.06),
                ego_height=1.7,
                resample=True,
                jitter=0.35,
                sensor=SensorModel(occlusion=False),
            )
        )
    return specs


def classifier_suite(n_scenes=2, base_seed=900):
    """Sequences sized for occupancy-evidence classification quality checks.

    Compact movers cross in front of two facing walls for long enough that
    every occupied voxel is observed free at some other time. Surfaces sit
    mid-voxel (never on voxel boundaries) and a near-range ground disc gives
    rays low-altitude coverage, so shallow-incidence carving cannot reach into
    surface voxels: recall on moving points and the false-dynamic rate on
    static structure are both measurable at their intended levels.
    """
    specs = []
    for i in range(n_scenes):
        rng = np.random.default_rng((base_seed, i))
        # surfaces sit 1-3 cm past a voxel boundary on the ray-approach side, so
        # a shortened ray's stop point always lands in the voxel in front
        walls = (
            Wall(start=(-14.0, 11.81), end=(14.0, 11.81), height=3.0, spacing=0.18),
            Wall(start=(-14.0, -11.81), end=(14.0, -11.81), height=3.0, spacing=0.18),
        )
        ground = (GroundPatch(-6.5, 6.5, -6.5, 6.5, spacing=0.25, z=-0.03),)
        poles = tuple(
            Pole(x=rng.uniform(-10.0, 10.0), y=rng.uniform(7.5, 9.5) * rng.choice((-1.0, 1.0)), height=2.8)
            for _ in range(2)
        )
        movers = tuple(
            BoxMover(
                size=(1.1, 0.8, 1.4),
                center=(rng.uniform(-9.0, -3.0), rng.uniform(-4.5, 4.5), 1.0),
                velocity=(rng.uniform(1.2, 1.9), rng.uniform(-0.25, 0.25), 0.0),
                spacing=0.09,
            )
            for _ in range(3)
        )
        specs.append(
            SceneSpec(
                walls=walls,
                poles=poles,
                ground=ground,
                movers=movers,
                n_frames=24,
                seed=int(rng.integers(1 << 31)),
                ego_height=1.7,
                resample=True,
                jitter=0.3,
                sensor=SensorModel(occlusion=True, azimuth_resolution_deg=0.4,
                                   elevation_resolution_deg=0.9),
            )
        )
    return specs
