"""LiDAR-to-event-camera projection and depth pseudo-images.

Pixel (i, j) covers the continuous square [i, i+1) x [j, j+1); a projected
point at (u, v) therefore lands in pixel (floor(u), floor(v)), the pixel whose
centre is nearest.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .event_repr import (AccumulationWindow, EventStream, ReprKind, SensorGeometry,
                         build_representation, synchronize)
from .geometry import RigidTransform

Z_MIN_M = 0.1
MAX_DEPTH_M = 100.0
MODEL_INPUT_SIZE = 64
_PC_HEADER = re.compile(r"#\s*EVL-PC v1 scan_t_us=(\d+)")


@dataclass(eq=False)
class PointCloud:
    xyz: np.ndarray
    intensity: np.ndarray
    t_us: np.ndarray
    scan_t_us: int = 0

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        n = len(self.xyz)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(n)
        self.t_us = np.asarray(self.t_us, dtype=np.int64).reshape(n)
        if not np.all(np.isfinite(self.xyz)):
            raise ValueError("point coordinates must be finite")

    @classmethod
    def empty(cls, scan_t_us: int = 0) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64), scan_t_us)

    def __len__(self):
        return len(self.xyz)

    def equals(self, other: "PointCloud") -> bool:
        return (self.scan_t_us == other.scan_t_us and np.array_equal(self.xyz, other.xyz)
                and np.array_equal(self.intensity, other.intensity)
                and np.array_equal(self.t_us, other.t_us))


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    geom: SensorGeometry = SensorGeometry()

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.geom.width and 0 <= self.cy < self.geom.height):
            raise ValueError("principal point must lie inside the sensor")

    @classmethod
    def default(cls) -> "Intrinsics":
        return cls(560.0, 560.0, 320.0, 240.0, SensorGeometry(640, 480))

    def to_json_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.geom.width, "height": self.geom.height}

    @classmethod
    def from_json_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   SensorGeometry(int(d["width"]), int(d["height"])))


@dataclass(eq=False)
class Projection:
    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    index: np.ndarray  # source point index of every surviving projection
    culled: int

    def __len__(self):
        return len(self.u)


@dataclass(eq=False)
class DepthImage:
    """H x W float32; 0 means no return, otherwise z_min / depth in (0, 1]."""

    data: np.ndarray


@dataclass(eq=False)
class CalibInput:
    event_channel: np.ndarray
    depth_channel: np.ndarray

    def __post_init__(self):
        self.event_channel = np.asarray(self.event_channel, dtype=np.float32)
        self.depth_channel = np.asarray(self.depth_channel, dtype=np.float32)
        if self.event_channel.shape != self.depth_channel.shape:
            raise ValueError("channels must share one shape")

    def stacked(self) -> np.ndarray:
        """(2, H, W) array, event channel first."""
        return np.stack([self.event_channel, self.depth_channel])


def project_points(cloud: PointCloud, extrinsic: RigidTransform, K: Intrinsics,
                   z_min: float = Z_MIN_M) -> Projection:
    """Pinhole projection of LiDAR points; input order is preserved."""
    return project_xyz(cloud.xyz, extrinsic, K, z_min)


def project_xyz(xyz: np.ndarray, extrinsic: RigidTransform, K: Intrinsics,
                z_min: float = Z_MIN_M) -> Projection:
    n = len(xyz)
    if n == 0:
        e = np.zeros(0)
        return Projection(e, e, e, np.zeros(0, dtype=np.int64), 0)
    p = extrinsic.apply(xyz)
    front = p[:, 2] > z_min
    idx = np.flatnonzero(front)
    p = p[front]
    u = K.cx + K.fx * p[:, 0] / p[:, 2]
    v = K.cy + K.fy * p[:, 1] / p[:, 2]
    inside = (u >= 0) & (u < K.geom.width) & (v >= 0) & (v < K.geom.height)
    return Projection(u[inside], v[inside], p[inside, 2], idx[inside], n - int(inside.sum()))


def rasterize_nearest(u, v, depth, geom: SensorGeometry) -> np.ndarray:
    """Per-pixel minimum depth (0 where empty); ties keep the first point."""
    W, H = geom.width, geom.height
    out = np.zeros(H * W)
    if len(u) == 0:
        return out.reshape(H, W)
    px = np.floor(u).astype(np.int64)
    py = np.floor(v).astype(np.int64)
    flat = py * W + px
    order = np.lexsort((np.arange(len(flat)), depth, flat))
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat[order][1:] != flat[order][:-1]
    keep = order[first]
    out[flat[keep]] = depth[keep]
    return out.reshape(H, W)


def render_depth_image(projected: Projection, K: Intrinsics,
                       max_depth_m: float = MAX_DEPTH_M, z_min: float = Z_MIN_M) -> DepthImage:
    """Z-buffered normalized inverse depth, near = bright.

    Returns beyond ``max_depth_m`` are still stored; their value is already
    small at z_min / depth.
    """
    depth = rasterize_nearest(projected.u, projected.v, projected.depth, K.geom)
    img = np.zeros_like(depth)
    hit = depth > 0
    img[hit] = np.clip(z_min / depth[hit], 0.0, 1.0)
    return DepthImage(img.astype(np.float32))


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) overlap fractions for area averaging along one axis."""
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo, hi = edges[:-1, None], edges[1:, None]
    cells = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, cells + 1) - np.maximum(lo, cells), 0.0, None)
    return overlap / (n_in / n_out)


_WEIGHT_CACHE: dict[tuple[int, int], np.ndarray] = {}


def area_downsample(img: np.ndarray, size: int = MODEL_INPUT_SIZE) -> np.ndarray:
    """Area-average an (H, W) image onto a size x size grid."""
    H, W = img.shape
    key_h, key_w = (H, size), (W, size)
    for key in (key_h, key_w):
        if key not in _WEIGHT_CACHE:
            _WEIGHT_CACHE[key] = _area_weights(*key)
    out = _WEIGHT_CACHE[key_h] @ np.asarray(img, dtype=np.float64) @ _WEIGHT_CACHE[key_w].T
    return out.astype(np.float32)


def make_calib_input(cloud: PointCloud, events: EventStream, hypothesis: RigidTransform,
                     K: Intrinsics, window: AccumulationWindow,
                     repr_kind: ReprKind | str = ReprKind.EVENT_FRAME,
                     size: int = MODEL_INPUT_SIZE, bins: int = 5) -> CalibInput:
    """Event and depth channels for one hypothesis, both size x size in [0, 1]."""
    if window.t_end_us != cloud.scan_t_us:
        raise ValueError("accumulation window must end at the LiDAR scan timestamp")
    sl = synchronize(events, window.t_end_us, window.duration_us)
    ev = build_representation(sl, window, repr_kind, bins).as_image()
    depth = render_depth_image(project_points(cloud, hypothesis, K), K).data
    ev_small = np.clip(area_downsample(ev, size), 0.0, 1.0)
    depth_small = np.clip(area_downsample(depth, size), 0.0, 1.0)
    # rescale sparse depth so occupied cells keep a usable dynamic range
    peak = depth_small.max()
    if peak > 0:
        depth_small = depth_small / peak
    return CalibInput(ev_small, depth_small)


def _scan_edge_sides(cloud: PointCloud, ring_gap_deg: float, jump_m: float, jump_rel: float):
    """Per-point flags (next side, previous side) in azimuth order, plus the step."""
    n = len(cloud)
    x, y, z = cloud.xyz.T
    horiz = np.hypot(x, z)
    rng = np.linalg.norm(cloud.xyz, axis=1)
    elev = np.degrees(np.arctan2(-y, horiz))
    az = np.degrees(np.arctan2(x, z))

    order_e = np.argsort(elev, kind="stable")
    breaks = np.flatnonzero(np.diff(elev[order_e]) > ring_gap_deg) + 1
    ring = np.zeros(n, dtype=np.int64)
    ring[order_e] = np.searchsorted(breaks, np.arange(n), side="right")

    order = np.lexsort((az, ring))
    r_s, az_s, ring_s = rng[order], az[order], ring[order]
    same = ring_s[1:] == ring_s[:-1]
    gaps = np.diff(az_s)
    valid = same & (gaps > 1e-9)
    step = float(np.median(gaps[valid])) if np.any(valid) else 0.0

    # azimuth gap to the previous / next return within the same ring, wrapping
    starts = np.flatnonzero(np.r_[True, ~same])
    ends = np.r_[starts[1:] - 1, n - 1]
    prev_gap = np.r_[np.inf, gaps]
    next_gap = np.r_[gaps, np.inf]
    prev_gap[starts] = az_s[starts] + 360.0 - az_s[ends]
    next_gap[ends] = prev_gap[starts]
    single = starts == ends
    prev_gap[starts[single]] = np.inf
    next_gap[ends[single]] = np.inf
    nxt = next_gap > 1.5 * step
    prv = prev_gap > 1.5 * step

    near = np.minimum(r_s[1:], r_s[:-1])
    jump = same & (gaps <= 1.5 * step) & (np.abs(np.diff(r_s)) > np.maximum(jump_m, jump_rel * near))
    first_nearer = r_s[:-1] < r_s[1:]
    nxt[:-1] |= jump & first_nearer
    prv[1:] |= jump & ~first_nearer
    return order, nxt, prv, step


def scan_edge_mask(cloud: PointCloud, ring_gap_deg: float = 0.5,
                   jump_m: float = 0.3, jump_rel: float = 0.05) -> np.ndarray:
    """Boolean mask of depth-discontinuity points along each scan ring.

    Rings are recovered by clustering point elevations; within a ring points
    are ordered by azimuth. A point is an edge when it neighbours a missing
    return (azimuth gap larger than 1.5 steps) or when it is the nearer side of
    a range jump exceeding ``max(jump_m, jump_rel * range)``.
    """
    mask = np.zeros(len(cloud), dtype=bool)
    if len(cloud) < 2:
        return mask
    order, nxt, prv, _ = _scan_edge_sides(cloud, ring_gap_deg, jump_m, jump_rel)
    mask[order] = nxt | prv
    return mask


def scan_silhouette_points(cloud: PointCloud, ring_gap_deg: float = 0.5,
                           jump_m: float = 0.3, jump_rel: float = 0.05) -> np.ndarray:
    """Edge points moved half an azimuth step toward their discontinuity.

    The nearer-side return sits up to one step inside the object; the midpoint
    to the neighbouring ray is an unbiased estimate of the silhouette. Points
    with a discontinuity on both sides stay put.
    """
    if len(cloud) < 2:
        return cloud.xyz[:0].copy()
    order, nxt, prv, step = _scan_edge_sides(cloud, ring_gap_deg, jump_m, jump_rel)
    edge = nxt | prv
    side = np.where(nxt & ~prv, 1.0, np.where(prv & ~nxt, -1.0, 0.0))[edge]
    p = cloud.xyz[order][edge]
    a = np.radians(0.5 * step * side)
    c, s = np.cos(a), np.sin(a)
    # azimuth is atan2(x, z): rotate about the vertical axis
    out = np.c_[c * p[:, 0] + s * p[:, 2], p[:, 1], -s * p[:, 0] + c * p[:, 2]]
    # restore the input order of scan_edge_mask
    return out[np.argsort(order[edge], kind="stable")]


# -- file formats --------------------------------------------------------------

def write_point_cloud(path, cloud: PointCloud) -> None:
    lines = [f"# EVL-PC v1 scan_t_us={int(cloud.scan_t_us)}", "x,y,z,intensity,t_us"]
    for (px, py, pz), inten, t in zip(cloud.xyz.tolist(), cloud.intensity.tolist(),
                                      cloud.t_us.tolist()):
        lines.append(f"{px!r},{py!r},{pz!r},{inten!r},{t}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_point_cloud(path) -> PointCloud:
    with open(path) as fh:
        header = fh.readline()
        m = _PC_HEADER.match(header.strip())
        if not m:
            raise FormatError(f"{path}: missing '# EVL-PC v1 scan_t_us=' header")
        rows = [line for line in fh if line.strip() and not line.startswith("x,")]
    if not rows:
        return PointCloud.empty(int(m.group(1)))
    data = np.array([[float(v) for v in r.split(",")] for r in rows])
    return PointCloud(data[:, :3], data[:, 3], data[:, 4].astype(np.int64), int(m.group(1)))


def save_intrinsics(path, K: Intrinsics) -> None:
    Path(path).write_text(json.dumps(K.to_json_dict(), indent=2) + "\n")


def load_intrinsics(path) -> Intrinsics:
    return Intrinsics.from_json_dict(json.loads(Path(path).read_text()))
