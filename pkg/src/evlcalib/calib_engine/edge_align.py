"""Derivative-free edge-alignment predictor.

LiDAR depth-discontinuity points are projected through a candidate extrinsic
and scored against a blurred event image; Nelder-Mead searches the 6-DoF
correction that maximizes the score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from ..errors import NoLidarEdgesError
from ..event_repr import AccumulationWindow, EventStream, ReprKind, build_representation, synchronize
from ..geometry import DecalibRange, EulerPose, RigidTransform, rotation_from_euler
from ..lidar_cam import Intrinsics, PointCloud, project_xyz, scan_silhouette_points
from . import nelder_mead

MIN_EDGE_POINTS = 20
RESTARTS = 8
NM_TOL = 1e-6
NM_MAX_EVALS = 400


def blur_schedule(search_range: DecalibRange, K: Intrinsics) -> list[float]:
    """Gaussian sigmas (px), coarse to fine, spanning the range's pixel reach."""
    reach = K.fx * np.tan(np.radians(search_range.max_rot_deg)) + K.fx * search_range.max_trans_m / 10.0
    sigmas = [1.5]
    while sigmas[-1] * 2.0 < reach / 2.0:
        sigmas.append(sigmas[-1] * 2.0)
    return sigmas[::-1]


def bilinear(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample ``img`` at continuous (u, v); pixel centres sit at i + 0.5."""
    H, W = img.shape
    x = u - 0.5
    y = v - 0.5
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    out = np.zeros(len(u))
    for dx, dy, w in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                      (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi, yi = x0 + dx, y0 + dy
        ok = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        out[ok] += w[ok] * img[yi[ok], xi[ok]]
    return out


@dataclass
class AlignmentScore:
    """Mean blurred event value under the projected LiDAR edge points."""

    edges_cam: np.ndarray  # edge points already mapped through the hypothesis
    image: np.ndarray
    K: Intrinsics

    def __call__(self, offset: np.ndarray) -> float:
        R = rotation_from_euler(offset[3], offset[4], offset[5])
        p = self.edges_cam @ R.T + offset[:3]
        front = p[:, 2] > 0.1
        if not np.any(front):
            return 0.0
        p = p[front]
        u = self.K.cx + self.K.fx * p[:, 0] / p[:, 2]
        v = self.K.cy + self.K.fy * p[:, 1] / p[:, 2]
        return float(bilinear(self.image, u, v).sum() / len(self.edges_cam))


def event_image(events: EventStream, window: AccumulationWindow,
                repr_kind: ReprKind | str = ReprKind.EVENT_FRAME) -> np.ndarray:
    sl = synchronize(events, window.t_end_us, window.duration_us)
    return build_representation(sl, window, repr_kind).as_image().astype(np.float64)


def edge_points_camera(cloud: PointCloud, hypothesis: RigidTransform, K: Intrinsics) -> np.ndarray:
    """Silhouette points in the hypothesis camera frame; raises if too few."""
    edges = scan_silhouette_points(cloud)
    visible = project_xyz(edges, hypothesis, K)
    if len(visible) < MIN_EDGE_POINTS:
        raise NoLidarEdgesError(f"only {len(visible)} LiDAR edge points project into the image")
    return hypothesis.apply(edges)


def alignment_score(cloud: PointCloud, events: EventStream, extrinsic: RigidTransform,
                    K: Intrinsics, window: AccumulationWindow, sigma: float = 1.5,
                    repr_kind: ReprKind | str = ReprKind.EVENT_FRAME) -> float:
    img = gaussian_filter(event_image(events, window, repr_kind), sigma)
    return AlignmentScore(edge_points_camera(cloud, extrinsic, K), img, K)(np.zeros(6))


def edge_align_predict(cloud: PointCloud, events: EventStream, hypothesis: RigidTransform,
                       K: Intrinsics, window: AccumulationWindow, search_range: DecalibRange,
                       repr_kind: ReprKind | str = ReprKind.EVENT_FRAME, seed: int = 0,
                       restarts: int = RESTARTS) -> EulerPose:
    """Correction (left-composed onto ``hypothesis``) that best aligns edges."""
    edges_cam = edge_points_camera(cloud, hypothesis, K)
    base = event_image(events, window, repr_kind)
    scale = np.array([search_range.max_trans_m] * 3 + [search_range.max_rot_deg] * 3)
    scale = np.where(scale > 0, scale, 1e-9)
    rng = np.random.default_rng(seed)

    best_x = np.zeros(6)
    for level, sigma in enumerate(blur_schedule(search_range, K)):
        score = AlignmentScore(edges_cam, gaussian_filter(base, sigma), K)
        if level == 0:
            # heaviest blur barely constrains translation: settle rotation first
            def objective(r):
                return -score(np.r_[np.zeros(3), np.clip(r, -1.0, 1.0) * scale[3:]])

            starts = [np.zeros(3)] + [rng.uniform(-1.0, 1.0, 3) for _ in range(restarts - 1)]
            step = 0.5
        else:
            def objective(x):
                return -score(np.clip(x, -1.0, 1.0) * scale)

            spread = 0.5 ** level
            starts = [best_x] + [np.clip(best_x + rng.uniform(-spread, spread, 6), -1.0, 1.0)
                                 for _ in range(restarts - 1)]
            step = 0.5 ** (level + 1)
        results = [nelder_mead.minimize(objective, x0, step, NM_TOL, NM_MAX_EVALS)
                   for x0 in starts]
        best = min(results, key=lambda r: r.fun)
        best_x = np.clip(best.x, -1.0, 1.0)
        if level == 0:
            best_x = np.r_[np.zeros(3), best_x]

    return EulerPose.from_array(best_x * scale)
