"""Rigid-transform algebra, Euler conventions, decalibration sampling and metrics.

Euler angles follow the intrinsic yaw-pitch-roll convention
``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)`` in a right-handed camera-style frame
(x right, y down, z forward). Angles are degrees at every public boundary and
radians internally.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyInputError, LengthMismatchError

GIMBAL_TOL_DEG = 1e-7
_ORTHO_DRIFT = 1e-12


class GimbalLockWarning(RuntimeWarning):
    """Emitted when pitch sits at +/-90 degrees and roll is folded into yaw."""


@dataclass(frozen=True)
class EulerPose:
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        for name in ("tx", "ty", "tz", "roll", "pitch", "yaw"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"EulerPose.{name} must be finite, got {value}")
            object.__setattr__(self, name, value)

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz])

    @property
    def rotation_deg(self) -> np.ndarray:
        return np.array([self.roll, self.pitch, self.yaw])

    def as_array(self) -> np.ndarray:
        """(tx, ty, tz, roll, pitch, yaw) in meters and degrees."""
        return np.array([self.tx, self.ty, self.tz, self.roll, self.pitch, self.yaw])

    @classmethod
    def from_array(cls, values) -> "EulerPose":
        v = [float(x) for x in values]
        if len(v) != 6:
            raise ValueError(f"expected 6 values, got {len(v)}")
        return cls(*v)

    def to_json_dict(self) -> dict:
        return {"translation_m": [self.tx, self.ty, self.tz],
                "rotation_deg": [self.roll, self.pitch, self.yaw]}

    @classmethod
    def from_json_dict(cls, d: dict) -> "EulerPose":
        tx, ty, tz = d["translation_m"]
        roll, pitch, yaw = d["rotation_deg"]
        return cls(tx, ty, tz, roll, pitch, yaw)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """p_out = R @ p_in + t."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "RigidTransform":
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def apply(self, points) -> np.ndarray:
        """Transform an (N, 3) array of points."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.R.T + self.t

    def is_valid(self, tol: float = 1e-9) -> bool:
        return bool(np.all(np.abs(self.R.T @ self.R - np.eye(3)) <= tol)
                    and abs(np.linalg.det(self.R) - 1.0) <= tol
                    and np.all(np.isfinite(self.t)))

    def __repr__(self):
        p = transform_to_euler(self)
        return (f"RigidTransform(t=[{p.tx:.6g}, {p.ty:.6g}, {p.tz:.6g}] m, "
                f"rpy=[{p.roll:.6g}, {p.pitch:.6g}, {p.yaw:.6g}] deg)")


@dataclass(frozen=True)
class DecalibRange:
    max_rot_deg: float
    max_trans_m: float

    def __post_init__(self):
        for name in ("max_rot_deg", "max_trans_m"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"DecalibRange.{name} must be finite and >= 0, got {v}")
            object.__setattr__(self, name, v)

    def contains(self, pose: EulerPose, slack: float = 0.0) -> bool:
        """True when every component of ``pose`` lies inside the range."""
        return bool(np.all(np.abs(pose.translation) <= self.max_trans_m + slack)
                    and np.all(np.abs(pose.rotation_deg) <= self.max_rot_deg + slack))


FINE_RANGE = DecalibRange(1.0, 0.10)
COARSE_RANGE = DecalibRange(10.0, 1.00)


@dataclass(frozen=True)
class CalibError:
    trans_norm_cm: float
    rot_norm_deg: float
    per_axis_trans: tuple[float, float, float]
    per_axis_rot: tuple[float, float, float]

    def to_json_dict(self) -> dict:
        return {"translation_error_cm": self.trans_norm_cm,
                "rotation_error_deg": self.rot_norm_deg,
                "per_axis_translation_cm": list(self.per_axis_trans),
                "per_axis_rotation_deg": list(self.per_axis_rot)}


def _rx(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_from_euler(roll_deg: float, pitch_deg: float, yaw_deg: float) -> np.ndarray:
    r, p, y = np.radians([roll_deg, pitch_deg, yaw_deg])
    return _rz(y) @ _ry(p) @ _rx(r)


def _canonical_angle(a_deg: float) -> float:
    # atan2 yields [-180, 180]; the canonical interval is (-180, 180]
    return 180.0 if a_deg <= -180.0 else a_deg


def euler_from_rotation(R: np.ndarray) -> tuple[float, float, float]:
    """(roll, pitch, yaw) in degrees for a rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    pitch = math.atan2(-R[2, 0], math.hypot(R[0, 0], R[1, 0]))
    pitch_deg = math.degrees(pitch)
    if 90.0 - abs(pitch_deg) < GIMBAL_TOL_DEG:
        warnings.warn("pitch at +/-90 deg: roll set to 0 and folded into yaw",
                      GimbalLockWarning, stacklevel=3)
        roll_deg = 0.0
        yaw_deg = math.degrees(math.atan2(-R[0, 1], R[1, 1]))
    else:
        roll_deg = math.degrees(math.atan2(R[2, 1], R[2, 2]))
        yaw_deg = math.degrees(math.atan2(R[1, 0], R[0, 0]))
    return _canonical_angle(roll_deg), pitch_deg, _canonical_angle(yaw_deg)


def euler_to_transform(p: EulerPose) -> RigidTransform:
    return RigidTransform(rotation_from_euler(p.roll, p.pitch, p.yaw), p.translation)


def transform_to_euler(T: RigidTransform) -> EulerPose:
    roll, pitch, yaw = euler_from_rotation(T.R)
    return EulerPose(T.t[0], T.t[1], T.t[2], roll, pitch, yaw)


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Apply ``b`` first, then ``a``."""
    R = a.R @ b.R
    if np.max(np.abs(R.T @ R - np.eye(3))) > _ORTHO_DRIFT:
        R = orthonormalize(R)
    return RigidTransform(R, a.R @ b.t + a.t)


def inverse(T: RigidTransform) -> RigidTransform:
    Rt = T.R.T
    return RigidTransform(Rt, -Rt @ T.t)


def sample_decalibration(rng_range: DecalibRange, rng_seed: int) -> EulerPose:
    """Uniform per-axis offset within +/- the range; deterministic per seed."""
    rng = np.random.default_rng(np.uint64(rng_seed & 0xFFFFFFFFFFFFFFFF))
    t = rng.uniform(-rng_range.max_trans_m, rng_range.max_trans_m, size=3)
    r = rng.uniform(-rng_range.max_rot_deg, rng_range.max_rot_deg, size=3)
    return EulerPose(t[0], t[1], t[2], r[0], r[1], r[2])


def correction_label(gt: RigidTransform, decalibrated: RigidTransform) -> EulerPose:
    """Correction ``D`` with ``gt == compose(D, decalibrated)``."""
    return transform_to_euler(compose(gt, inverse(decalibrated)))


def apply_correction(correction: EulerPose, hypothesis: RigidTransform) -> RigidTransform:
    return compose(euler_to_transform(correction), hypothesis)


def _check_pairs(pred: Sequence[RigidTransform], gt: Sequence[RigidTransform]):
    if len(pred) != len(gt):
        raise LengthMismatchError(f"{len(pred)} predictions vs {len(gt)} ground truths")
    if len(pred) == 0:
        raise EmptyInputError("metric needs at least one pair")


def translation_errors_cm(pred, gt) -> np.ndarray:
    """(N, 3) per-sample translation differences in centimeters."""
    _check_pairs(pred, gt)
    return np.array([(p.t - g.t) * 100.0 for p, g in zip(pred, gt)])


def rotation_errors_deg(pred, gt) -> np.ndarray:
    """(N, 3) per-sample Euler angles of R_pred @ R_gt^-1, in degrees."""
    _check_pairs(pred, gt)
    return np.array([euler_from_rotation(p.R @ g.R.T) for p, g in zip(pred, gt)])


def mae_translation(pred: Sequence[RigidTransform], gt: Sequence[RigidTransform]) -> float:
    """Mean Euclidean norm of the translation difference, in centimeters.

    Despite the name this is the mean of per-sample l2 norms, not a
    componentwise absolute mean.
    """
    return float(np.mean(np.linalg.norm(translation_errors_cm(pred, gt), axis=1)))


def mae_rotation(pred: Sequence[RigidTransform], gt: Sequence[RigidTransform]):
    """Mean norm of the relative-rotation Euler vector and mean per-axis |angle|.

    Returns ``(rot_norm_deg, (roll, pitch, yaw))``.
    """
    e = rotation_errors_deg(pred, gt)
    per_axis = np.mean(np.abs(e), axis=0)
    return float(np.mean(np.linalg.norm(e, axis=1))), tuple(float(v) for v in per_axis)


def calib_error(pred: Sequence[RigidTransform], gt: Sequence[RigidTransform]) -> CalibError:
    dt = translation_errors_cm(pred, gt)
    rot_norm, rot_axes = mae_rotation(pred, gt)
    return CalibError(
        trans_norm_cm=float(np.mean(np.linalg.norm(dt, axis=1))),
        rot_norm_deg=rot_norm,
        per_axis_trans=tuple(float(v) for v in np.mean(np.abs(dt), axis=0)),
        per_axis_rot=rot_axes,
    )


def pose_error(pred: RigidTransform, gt: RigidTransform) -> tuple[float, float]:
    """(translation norm in cm, rotation norm in deg) for a single pair."""
    dt = np.linalg.norm(pred.t - gt.t) * 100.0
    rot = np.linalg.norm(euler_from_rotation(pred.R @ gt.R.T))
    return float(dt), float(rot)


def save_calibration(path, T: RigidTransform) -> None:
    Path(path).write_text(json.dumps(transform_to_euler(T).to_json_dict(), indent=2) + "\n")


def load_calibration(path) -> RigidTransform:
    return euler_to_transform(EulerPose.from_json_dict(json.loads(Path(path).read_text())))
