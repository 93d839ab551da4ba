"""Deterministic synthetic scenes, a 16-ring LiDAR model and edge-motion events.

World frame: x forward along the road, y left, z up, ground plane z = 0.
Sensor frames (LiDAR and camera) use camera-style axes: x right, y down,
z forward, so the ground-truth extrinsic between them is a small rotation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from numba import njit

from .event_repr import AccumulationWindow, EventStream
from .geometry import (DecalibRange, EulerPose, RigidTransform, compose, correction_label,
                       euler_to_transform, inverse, rotation_from_euler, sample_decalibration)
from .lidar_cam import Intrinsics, PointCloud

LIDAR_HEIGHT_M = 1.7
GROUND_INTENSITY = 0.3
BOX_INTENSITY = 1.0
MAX_SPEED = 20.0
MAX_ANGULAR_DEG = 30.0
DEFAULT_SUBSTEPS_PER_10MS = 4

# columns are the world directions of the sensor x (right), y (down), z (forward) axes
SENSOR_TO_WORLD_R = np.array([[0.0, 0.0, 1.0],
                              [-1.0, 0.0, 0.0],
                              [0.0, -1.0, 0.0]])

DEFAULT_GT_EXTRINSIC = EulerPose(0.10, 0.0, 0.0, 5.0, 2.0, 3.0)


class Category(str, Enum):
    URBAN = "Urban"
    SUBURBAN = "Suburban"
    RURAL = "Rural"


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    size: tuple[float, float, float]

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.center) - np.asarray(self.size) / 2

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.center) + np.asarray(self.size) / 2

    def corners(self) -> np.ndarray:
        lo, hi = self.lo, self.hi
        return np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1])
                         for z in (lo[2], hi[2])])


@dataclass(frozen=True)
class Scene:
    category: Category
    boxes: tuple[Box, ...]
    rng_seed: int = 0
    ground: bool = True


@dataclass(frozen=True)
class LidarModel:
    rings: int = 16
    elevation_min_deg: float = -15.0
    elevation_step_deg: float = 2.0
    horizontal_step_deg: float = 0.2
    range_max_m: float = 100.0

    @property
    def elevations_deg(self) -> np.ndarray:
        return self.elevation_min_deg + self.elevation_step_deg * np.arange(self.rings)

    @property
    def azimuths_deg(self) -> np.ndarray:
        n = int(round(360.0 / self.horizontal_step_deg))
        return -180.0 + self.horizontal_step_deg * np.arange(n)


@dataclass(frozen=True)
class Trajectory:
    """Constant body-frame twist ending at ``end_pose`` (camera to world)."""

    linear_velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    angular_velocity_deg: tuple[float, float, float] = (0.0, 0.0, 0.0)
    duration_us: int = 50_000
    end_pose: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if np.linalg.norm(self.linear_velocity) > MAX_SPEED:
            raise ValueError(f"linear speed above {MAX_SPEED} m/s")
        if np.linalg.norm(self.angular_velocity_deg) > MAX_ANGULAR_DEG:
            raise ValueError(f"angular speed above {MAX_ANGULAR_DEG} deg/s")

    def pose_at(self, dt_s: float) -> RigidTransform:
        """Pose ``dt_s`` seconds relative to the end (dt_s <= 0 looks back)."""
        w = np.asarray(self.angular_velocity_deg) * dt_s
        delta = RigidTransform(rotation_from_euler(*w), np.asarray(self.linear_velocity) * dt_s)
        return compose(self.end_pose, delta)


def lidar_pose_world(height: float = LIDAR_HEIGHT_M) -> RigidTransform:
    """LiDAR-to-world pose of the rig at the scan instant."""
    return RigidTransform(SENSOR_TO_WORLD_R, np.array([0.0, 0.0, height]))


# -- scene generation ----------------------------------------------------------

_CATEGORY_PARAMS = {
    # side rows: count, height, lateral offset of the near face, x extent;
    # far: cross-street blocks near the end of the road; cars: low boxes at kerb;
    # poles: thin posts on the pavement, the main source of near parallax;
    # walls: low kerb-side blocks whose tops cross the upper rings at short range
    Category.URBAN: dict(rows=(8, 11), height=(6.0, 11.0), lateral=(3.5, 8.0),
                         x=(6.0, 55.0), length=(5.0, 14.0), depth=(4.0, 10.0),
                         far=(1, 2), far_height=(6.0, 16.0), cars=(3, 6), poles=(6, 9), walls=(4, 7)),
    Category.SUBURBAN: dict(rows=(3, 5), height=(3.0, 8.0), lateral=(4.5, 11.0),
                            x=(8.0, 55.0), length=(5.0, 11.0), depth=(4.0, 9.0),
                            far=(0, 1), far_height=(4.0, 8.0), cars=(2, 3), poles=(3, 5), walls=(2, 4)),
    Category.RURAL: dict(rows=(2, 2), height=(4.0, 8.0), lateral=(3.5, 9.0),
                         x=(8.0, 35.0), length=(4.0, 10.0), depth=(4.0, 8.0),
                         far=(1, 1), far_height=(4.0, 8.0), cars=(0, 0), poles=(0, 0), walls=(0, 0)),
}
MAX_RURAL_BOXES = 3


def _overlaps(a: Box, b: Box, margin: float = 0.5) -> bool:
    return bool(np.all(a.lo[:2] - margin < b.hi[:2]) and np.all(b.lo[:2] - margin < a.hi[:2]))


def _in_range(box: Box) -> bool:
    return box.lo[0] >= 5.0 and math.hypot(box.center[0], box.center[1]) <= 60.0


def make_scene(rng_seed: int, category: Category | str) -> Scene:
    """Cuboids lining a road that heads along +x.

    Urban scenes hold at least eight buildings of 6 m or more, Rural scenes at
    most three cuboids in total.
    """
    category = Category(category)
    prm = _CATEGORY_PARAMS[category]
    rng = np.random.default_rng(rng_seed)
    boxes: list[Box] = []

    def place(make, count):
        placed, attempts = 0, 0
        while placed < count and attempts < 200:
            attempts += 1
            box = make()
            if _in_range(box) and not any(_overlaps(box, b) for b in boxes):
                boxes.append(box)
                placed += 1

    def row_box():
        side = rng.choice([-1.0, 1.0])
        length = rng.uniform(*prm["length"])
        depth = rng.uniform(*prm["depth"])
        height = rng.uniform(*prm["height"])
        x0 = rng.uniform(prm["x"][0], prm["x"][1] - length)
        cy = side * (rng.uniform(*prm["lateral"]) + depth / 2)
        return Box((x0 + length / 2, cy, height / 2), (length, depth, height))

    def far_box():
        width = rng.uniform(6.0, 14.0)
        depth = rng.uniform(5.0, 10.0)
        height = rng.uniform(*prm["far_height"])
        x0 = rng.uniform(35.0, 50.0)
        cy = rng.uniform(-10.0, 10.0)
        return Box((x0 + depth / 2, cy, height / 2), (depth, width, height))

    def car_box():
        side = rng.choice([-1.0, 1.0])
        length, width, height = rng.uniform(3.8, 5.0), rng.uniform(1.7, 2.0), rng.uniform(1.3, 1.9)
        x0 = rng.uniform(5.0, 25.0)
        cy = side * (rng.uniform(2.2, 3.2) + width / 2)
        return Box((x0 + length / 2, cy, height / 2), (length, width, height))

    def pole_box():
        side = rng.choice([-1.0, 1.0])
        w, height = rng.uniform(0.2, 0.4), rng.uniform(4.0, 8.0)
        x0 = rng.uniform(6.0, 30.0)
        cy = side * rng.uniform(2.5, 3.5)
        return Box((x0 + w / 2, cy, height / 2), (w, w, height))

    def wall_box():
        side = rng.choice([-1.0, 1.0])
        length, depth, height = rng.uniform(3.0, 10.0), rng.uniform(0.5, 3.0), rng.uniform(2.5, 4.5)
        x0 = rng.uniform(6.0, 30.0)
        cy = side * (rng.uniform(2.5, 4.0) + depth / 2)
        return Box((x0 + length / 2, cy, height / 2), (length, depth, height))

    place(row_box, int(rng.integers(prm["rows"][0], prm["rows"][1] + 1)))
    place(far_box, int(rng.integers(prm["far"][0], prm["far"][1] + 1)))
    place(car_box, int(rng.integers(prm["cars"][0], prm["cars"][1] + 1)))
    place(pole_box, int(rng.integers(prm["poles"][0], prm["poles"][1] + 1)))
    place(wall_box, int(rng.integers(prm["walls"][0], prm["walls"][1] + 1)))
    if category is Category.RURAL:
        boxes = boxes[:MAX_RURAL_BOXES]
    return Scene(category, tuple(boxes), rng_seed)


# -- ray casting ---------------------------------------------------------------

def _ray_box(o: np.ndarray, d: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Slab test; returns entry distance (inf on miss) and entry axis."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    tmin = np.fmin(t1, t2)
    tmax = np.fmax(t1, t2)
    axis = np.argmax(tmin, axis=1)
    t_near = np.take_along_axis(tmin, axis[:, None], axis=1)[:, 0]
    t_far = np.min(tmax, axis=1)
    hit = (t_near <= t_far) & (t_near > 1e-9)
    return np.where(hit, t_near, np.inf), axis


def cast_rays(scene: Scene, origins: np.ndarray, dirs: np.ndarray, max_range: float):
    """Nearest hit along world rays.

    Returns (distance, surface id): id 0 is a miss, -1 the ground, and box k
    yields 1 + 6k + face, face = 2 * axis + (entered through the high side).
    """
    n = len(dirs)
    origins = np.broadcast_to(origins, (n, 3))
    best = np.full(n, np.inf)
    sid = np.zeros(n, dtype=np.int64)
    if scene.ground:
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = -origins[:, 2] / dirs[:, 2]
        ok = (dirs[:, 2] < 0) & (tg > 0)
        best = np.where(ok, tg, np.inf)
        sid[ok] = -1
    for k, box in enumerate(scene.boxes):
        t, axis = _ray_box(origins, dirs, box.lo, box.hi)
        closer = t < best
        if not np.any(closer):
            continue
        high = np.take_along_axis(dirs, axis[:, None], axis=1)[:, 0] < 0
        best = np.where(closer, t, best)
        sid = np.where(closer, 1 + 6 * k + 2 * axis + high, sid)
    miss = best > max_range
    best[miss] = np.inf
    sid[miss] = 0
    return best, sid


def raycast_lidar(scene: Scene, model: LidarModel, sensor_pose: RigidTransform,
                  scan_t_us: int) -> PointCloud:
    """One ray per (ring, azimuth), ring-major; points in the LiDAR frame."""
    el = np.radians(model.elevations_deg)[:, None]
    az = np.radians(model.azimuths_deg)[None, :]
    dirs = np.stack([np.cos(el) * np.sin(az),
                     np.broadcast_to(-np.sin(el), (len(el), az.shape[1])),
                     np.cos(el) * np.cos(az)], axis=-1).reshape(-1, 3)
    dirs_w = dirs @ sensor_pose.R.T
    dist, sid = cast_rays(scene, sensor_pose.t, dirs_w, model.range_max_m)
    hit = sid != 0
    xyz = dirs[hit] * dist[hit, None]
    intensity = np.where(sid[hit] == -1, GROUND_INTENSITY, BOX_INTENSITY)
    t = np.full(len(xyz), scan_t_us, dtype=np.int64)
    return PointCloud(xyz, intensity, t, scan_t_us)


def ring_elevations_deg(cloud: PointCloud) -> np.ndarray:
    x, y, z = cloud.xyz.T
    return np.degrees(np.arctan2(-y, np.hypot(x, z)))


# -- camera rendering and events -----------------------------------------------

class _PixelRays:
    def __init__(self, K: Intrinsics):
        W, H = K.geom.width, K.geom.height
        u = (np.arange(W) + 0.5 - K.cx) / K.fx
        v = (np.arange(H) + 0.5 - K.cy) / K.fy
        uu, vv = np.meshgrid(u, v)
        self.dirs = np.stack([uu, vv, np.ones_like(uu)], axis=-1)  # H x W x 3
        self.K = K


@njit(cache=True)
def _render_rect(ids, best, dirs, R, o, lo, hi, base_id, u0, u1, v0, v1, max_range):
    """Per-pixel slab test of one box inside its screen rectangle (in place)."""
    for v in range(v0, v1):
        for u in range(u0, u1):
            cx, cy, cz = dirs[v, u, 0], dirs[v, u, 1], dirs[v, u, 2]
            t_near = -np.inf
            t_far = np.inf
            axis = 0
            d_axis = 0.0
            miss = False
            for k in range(3):
                dk = R[k, 0] * cx + R[k, 1] * cy + R[k, 2] * cz
                if dk == 0.0:
                    if o[k] < lo[k] or o[k] > hi[k]:
                        miss = True
                        break
                    continue
                t1 = (lo[k] - o[k]) / dk
                t2 = (hi[k] - o[k]) / dk
                tmin = min(t1, t2)
                if tmin > t_near:
                    t_near = tmin
                    axis = k
                    d_axis = dk
                t_far = min(t_far, max(t1, t2))
            if miss or t_near > t_far or t_near <= 1e-9:
                continue
            if t_near < best[v, u] and t_near < max_range:
                best[v, u] = t_near
                ids[v, u] = base_id + 2 * axis + (1 if d_axis < 0 else 0)


def render_surface_ids(scene: Scene, K: Intrinsics, cam_to_world: RigidTransform,
                       rays: _PixelRays | None = None, max_range: float = 200.0) -> np.ndarray:
    """Surface id per pixel (0 for ground and sky, box faces otherwise)."""
    rays = rays or _PixelRays(K)
    H, W = K.geom.height, K.geom.width
    ids = np.zeros((H, W), dtype=np.int32)
    world_to_cam = inverse(cam_to_world)
    o = np.ascontiguousarray(cam_to_world.t, dtype=np.float64)
    R = np.ascontiguousarray(cam_to_world.R, dtype=np.float64)
    best = np.full((H, W), np.inf)
    if scene.ground:
        dz = rays.dirs @ R[2]
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = -o[2] / dz
        best = np.where((dz < 0) & (tg > 0), tg, np.inf)
    for k, box in enumerate(scene.boxes):
        pc = world_to_cam.apply(box.corners())
        if np.all(pc[:, 2] > 0.1):
            u = K.cx + K.fx * pc[:, 0] / pc[:, 2]
            v = K.cy + K.fy * pc[:, 1] / pc[:, 2]
            u0, u1 = int(max(0, np.floor(u.min()) - 1)), int(min(W, np.ceil(u.max()) + 2))
            v0, v1 = int(max(0, np.floor(v.min()) - 1)), int(min(H, np.ceil(v.max()) + 2))
            if u0 >= u1 or v0 >= v1:
                continue
        elif np.all(pc[:, 2] <= 0.1):
            continue
        else:
            u0, u1, v0, v1 = 0, W, 0, H
        _render_rect(ids, best, rays.dirs, R, o, box.lo, box.hi, 1 + 6 * k,
                     u0, u1, v0, v1, float(max_range))
    return ids


def edge_occupancy(ids: np.ndarray) -> np.ndarray:
    """Pixels on either side of a surface-id change (2 px wide, centred)."""
    e = np.zeros(ids.shape, dtype=bool)
    dx = ids[:, 1:] != ids[:, :-1]
    dy = ids[1:, :] != ids[:-1, :]
    e[:, :-1] |= dx
    e[:, 1:] |= dx
    e[:-1, :] |= dy
    e[1:, :] |= dy
    return e


def substep_times_us(window: AccumulationWindow, substeps: int) -> np.ndarray:
    return window.t_start_us + window.duration_us * np.arange(substeps) / (substeps - 1)


def generate_events(scene: Scene, K: Intrinsics, camera_traj: Trajectory,
                    window: AccumulationWindow, substeps: int) -> EventStream:
    """One event per pixel whose edge occupancy flips between consecutive substeps."""
    if substeps < 2:
        raise ValueError("substeps must be >= 2")
    W = K.geom.width
    rays = _PixelRays(K)
    times = substep_times_us(window, substeps)
    ts, xs, ys, ps = [], [], [], []
    prev = None
    for k, t in enumerate(times):
        pose = camera_traj.pose_at((t - window.t_end_us) * 1e-6)
        occ = edge_occupancy(render_surface_ids(scene, K, pose, rays))
        if prev is not None:
            flat = np.flatnonzero(occ != prev)
            if flat.size:
                mid = window.t_start_us + (2 * k - 1) * window.duration_us // (2 * (substeps - 1))
                ts.append(np.full(flat.size, mid, dtype=np.int64))
                ys.append(flat // W)
                xs.append(flat % W)
                ps.append(np.where(occ.reshape(-1)[flat], 1, -1).astype(np.int8))
        prev = occ
    if not ts:
        return EventStream.empty(K.geom)
    return EventStream(np.concatenate(ts), np.concatenate(xs), np.concatenate(ys),
                       np.concatenate(ps), K.geom)


def default_substeps(duration_us: int) -> int:
    return max(2, int(math.ceil(duration_us / 10_000 * DEFAULT_SUBSTEPS_PER_10MS)) + 1)


# -- full samples --------------------------------------------------------------

@dataclass(eq=False)
class Sample:
    cloud: PointCloud
    events: EventStream
    gt: RigidTransform
    decalibrated: RigidTransform
    label: EulerPose
    category: Category
    scene_seed: int
    decal_seed: int
    window: AccumulationWindow
    trajectory: Trajectory


def sample_trajectory(rng: np.random.Generator, cam_end_pose: RigidTransform,
                      duration_us: int) -> Trajectory:
    """Slow driving plus body rotation rates of a few deg/s (camera frame).

    Every rate component gets a random sign and a magnitude bounded away from
    zero so edges of any orientation sweep a pixel or more per window.
    """
    def signed(lo, hi):
        return float(rng.choice([-1.0, 1.0]) * rng.uniform(lo, hi))

    v = (rng.uniform(-0.1, 0.1), rng.uniform(-0.05, 0.05), rng.uniform(0.1, 0.5))
    w = (signed(1.5, 4.0), signed(1.5, 4.0), signed(0.5, 2.0))
    return Trajectory(v, w, duration_us, cam_end_pose)


def child_seeds(scene_seed: int) -> tuple[int, int, int]:
    """(scene, trajectory, decalibration) seeds derived from one sample seed."""
    ss = np.random.SeedSequence(scene_seed)
    a, b, c = (int(s.generate_state(1, dtype=np.uint64)[0]) for s in ss.spawn(3))
    return a, b, c


def generate_sample(scene_seed: int, category: Category | str,
                    gt_extrinsic: RigidTransform | None = None,
                    decal_range: DecalibRange = DecalibRange(1.0, 0.10),
                    window: AccumulationWindow | None = None,
                    K: Intrinsics | None = None,
                    model: LidarModel | None = None,
                    substeps: int | None = None,
                    decal_seed: int | None = None) -> Sample:
    """Simulate both sensors on a shared rig and inject a decalibration.

    The injected offset ``D`` is sampled uniformly in ``decal_range`` and the
    decalibrated extrinsic is ``inverse(D) o gt`` so that the correction label
    equals ``D``.
    """
    gt = gt_extrinsic if gt_extrinsic is not None else euler_to_transform(DEFAULT_GT_EXTRINSIC)
    window = window or AccumulationWindow(1_000_000, 50_000)
    K = K or Intrinsics.default()
    model = model or LidarModel()
    s_scene, s_traj, s_decal = child_seeds(scene_seed)
    if decal_seed is None:
        decal_seed = s_decal
    scene = make_scene(s_scene, category)
    lidar_pose = lidar_pose_world()
    cloud = raycast_lidar(scene, model, lidar_pose, window.t_end_us)
    cam_pose = compose(lidar_pose, inverse(gt))
    traj = sample_trajectory(np.random.default_rng(s_traj), cam_pose, window.duration_us)
    events = generate_events(scene, K, traj, window, substeps or default_substeps(window.duration_us))
    offset = sample_decalibration(decal_range, decal_seed)
    decal = compose(inverse(euler_to_transform(offset)), gt)
    label = correction_label(gt, decal)
    return Sample(cloud, events, gt, decal, label, Category(category), scene_seed, decal_seed,
                  window, traj)
