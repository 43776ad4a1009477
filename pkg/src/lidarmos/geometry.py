"""Rigid-body transforms and scans.

Poses are plain ``(4, 4)`` float64 numpy arrays in homogeneous form. Relative
pose chains follow the convention ``rel[i] = T^i_{i+1}``: the transform taking
points of frame ``i + 1`` into the coordinate frame of frame ``i``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from lidarmos.errors import PreconditionError, ValidationError

POSE_TOL = 1e-6

# (x [m], y [m], yaw [deg]) per noise unit
NOISE_UNIT = (0.1, 0.1, 1.0)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Scan:
    """One LiDAR revolution.

    ``points`` is ``(M, 3)`` float64, ``remission`` is ``(M,)`` float64 and
    ``labels`` (optional) is ``(M,)`` uint8 holding ``MovingLabel`` values.
    """

    points: np.ndarray
    remission: np.ndarray
    labels: Optional[np.ndarray] = None
    frame: int = 0
    # raw semantic ids as read from disk, kept for provenance only
    raw_labels: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        rem = np.ascontiguousarray(self.remission, dtype=np.float64).reshape(-1)
        if rem.shape[0] != pts.shape[0]:
            raise ValidationError(
                f"remission length {rem.shape[0]} != point count {pts.shape[0]}")
        bad = ~np.isfinite(pts).all(axis=1)
        if bad.any():
            raise ValidationError(
                f"non-finite coordinate at point index {int(np.flatnonzero(bad)[0])}")
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "remission", _frozen(rem))
        if self.labels is not None:
            lab = np.ascontiguousarray(self.labels, dtype=np.uint8).reshape(-1)
            if lab.shape[0] != pts.shape[0]:
                raise ValidationError(
                    f"label count {lab.shape[0]} != point count {pts.shape[0]}")
            object.__setattr__(self, "labels", _frozen(lab))

    def __len__(self) -> int:
        return self.points.shape[0]

    @classmethod
    def from_array(cls, data: np.ndarray, labels=None, frame: int = 0) -> "Scan":
        """Build a scan from an ``(M, 4)`` array of x, y, z, remission."""
        data = np.asarray(data).reshape(-1, 4)
        return cls(data[:, :3], data[:, 3], labels=labels, frame=frame)

    def with_labels(self, labels) -> "Scan":
        return Scan(self.points, self.remission, labels=labels, frame=self.frame)


def check_pose(T: np.ndarray, name: str = "pose") -> np.ndarray:
    """Validate a homogeneous rigid transform and return it as float64."""
    T = np.asarray(T, dtype=np.float64)
    if T.shape != (4, 4):
        raise ValidationError(f"{name}: expected shape (4, 4), got {T.shape}")
    if not np.isfinite(T).all():
        raise ValidationError(f"{name}: non-finite entries")
    if not np.array_equal(T[3], [0.0, 0.0, 0.0, 1.0]):
        raise ValidationError(f"{name}: bottom row must be (0, 0, 0, 1)")
    R = T[:3, :3]
    if np.abs(R.T @ R - np.eye(3)).max() >= POSE_TOL:
        raise ValidationError(f"{name}: rotation block is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) >= POSE_TOL:
        raise ValidationError(f"{name}: rotation determinant is not +1")
    return T


def make_pose(R=None, t=None) -> np.ndarray:
    T = np.eye(4)
    if R is not None:
        T[:3, :3] = R
    if t is not None:
        T[:3, 3] = t
    return T


def rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def translation(x: float, y: float, z: float) -> np.ndarray:
    return make_pose(t=(x, y, z))


def invert_pose(T: np.ndarray) -> np.ndarray:
    """Closed-form inverse of a rigid transform."""
    R = T[:3, :3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ T[:3, 3]
    return out


def random_pose(rng: np.random.Generator, scale: float = 10.0) -> np.ndarray:
    """Uniformly random rotation (via QR) with a Gaussian translation."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return make_pose(q, rng.normal(scale=scale, size=3))


def compose_relative(poses: Sequence[np.ndarray], k: int, l: int) -> np.ndarray:
    """Return ``T^l_k``, mapping frame ``k`` into frame ``l`` (``k >= l``).

    ``poses[i]`` is ``T^i_{i+1}``, so ``T^l_k = poses[l] @ ... @ poses[k-1]``.
    """
    n = len(poses)
    if not (0 <= l <= k <= n):
        raise IndexError(f"need 0 <= l <= k <= {n}, got k={k}, l={l}")
    T = np.eye(4)
    for j in range(l, k):
        T = T @ np.asarray(poses[j], dtype=np.float64)
    return T


def relative_from_absolute(abs_poses: Sequence[np.ndarray]) -> list:
    """``rel[i] = inv(P_i) @ P_{i+1}`` for absolute poses ``P``."""
    return [invert_pose(abs_poses[i]) @ abs_poses[i + 1]
            for i in range(len(abs_poses) - 1)]


def transform_points(points: np.ndarray, T: np.ndarray) -> np.ndarray:
    return points @ T[:3, :3].T + T[:3, 3]


def transform_scan(scan: Scan, T: np.ndarray) -> Scan:
    T = check_pose(T)
    if np.array_equal(T, np.eye(4)):
        pts = scan.points
    else:
        pts = transform_points(scan.points, T)
    return Scan(pts, scan.remission, labels=scan.labels, frame=scan.frame)


def camera_to_lidar_frame(pose_cam: np.ndarray, Tr: np.ndarray) -> np.ndarray:
    """Conjugate a camera-frame pose into the LiDAR frame: ``Tr^-1 P Tr``."""
    Tr = check_pose(Tr, "calibration Tr")
    return invert_pose(Tr) @ np.asarray(pose_cam, dtype=np.float64) @ Tr


def lidar_to_camera_frame(pose_lidar: np.ndarray, Tr: np.ndarray) -> np.ndarray:
    Tr = check_pose(Tr, "calibration Tr")
    return Tr @ np.asarray(pose_lidar, dtype=np.float64) @ invert_pose(Tr)


def perturb_pose(pose: np.ndarray, units: int, rng_seed: int) -> np.ndarray:
    """Add uniform noise of ``units`` steps of (0.1 m, 0.1 m, 1 deg) in x, y, yaw.

    Each component is drawn from ``[-units * step, +units * step]``.
    """
    if units < 0:
        raise PreconditionError(f"noise units must be >= 0, got {units}")
    pose = np.asarray(pose, dtype=np.float64)
    if units == 0:
        return pose.copy()
    rng = np.random.default_rng(rng_seed)
    dx, dy, dyaw = rng.uniform(-1.0, 1.0, size=3) * units * np.array(NOISE_UNIT)
    out = pose.copy()
    out[:3, :3] = rot_z(np.deg2rad(dyaw)) @ pose[:3, :3]
    out[0, 3] += dx
    out[1, 3] += dy
    return out
