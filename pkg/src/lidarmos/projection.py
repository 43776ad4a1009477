"""Spherical range projection, label back-projection and kNN cleanup."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lidarmos import _kernels
from lidarmos.errors import FormatError, PreconditionError, ValidationError
from lidarmos.geometry import Scan
from lidarmos.labels import MovingLabel


@dataclass(frozen=True)
class ProjectionConfig:
    h: int = 64
    w: int = 2048
    fov_up: float = np.deg2rad(3.0)  # radians, positive magnitude
    fov_down: float = np.deg2rad(25.0)

    def __post_init__(self):
        if self.h < 2 or self.w < 2:
            raise ValidationError(f"image must be at least 2x2, got {self.h}x{self.w}")
        if not self.fov_up + self.fov_down > 0:
            raise ValidationError("vertical field of view must be positive")

    @property
    def fov(self) -> float:
        return self.fov_up + self.fov_down

    @classmethod
    def from_degrees(cls, h=64, w=2048, fov_up=3.0, fov_down=25.0) -> "ProjectionConfig":
        return cls(h, w, float(np.deg2rad(fov_up)), float(np.deg2rad(fov_down)))


@dataclass(frozen=True)
class RangeImage:
    """Per-pixel range, coordinates, remission and source point index.

    Invalid pixels have ``range == -1`` and ``index == -1``. ``point_u`` and
    ``point_v`` hold each input point's pixel, or -1 if the point was dropped.
    """

    cfg: ProjectionConfig
    range: np.ndarray      # (h, w) float32
    xyz: np.ndarray        # (h, w, 3) float64
    remission: np.ndarray  # (h, w) float32
    index: np.ndarray      # (h, w) int64
    point_u: np.ndarray    # (M,) int64
    point_v: np.ndarray    # (M,) int64
    n_zero_range: int = 0
    n_out_of_fov: int = 0
    frame: int = 0
    diagnostics: dict = field(default_factory=dict, compare=False)

    @property
    def valid(self) -> np.ndarray:
        return self.index >= 0

    @property
    def retained(self) -> np.ndarray:
        return self.point_u >= 0

    @property
    def point_pixels(self) -> np.ndarray:
        """``(K, 2)`` (u, v) pixels of retained points, in point order."""
        keep = self.retained
        return np.stack([self.point_u[keep], self.point_v[keep]], axis=1)

    @property
    def shape(self):
        return (self.cfg.h, self.cfg.w)

    def channels(self) -> np.ndarray:
        """``(5, h, w)`` float32 planes x, y, z, range, remission."""
        return np.stack([self.xyz[..., 0], self.xyz[..., 1], self.xyz[..., 2],
                         self.range, self.remission]).astype(np.float32)


def spherical_coords(points: np.ndarray, cfg: ProjectionConfig):
    """Continuous (u, v), range and pitch for each point, in float64."""
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    r = np.sqrt(np.einsum("ij,ij->i", points, points))
    with np.errstate(divide="ignore", invalid="ignore"):
        pitch = np.divide(z, r)
    np.clip(pitch, -1.0, 1.0, out=pitch)
    np.arcsin(pitch, out=pitch)
    u = np.arctan2(y, x)
    u *= -1.0 / np.pi
    u += 1.0
    u *= 0.5 * cfg.w
    v = pitch + cfg.fov_down
    v *= -1.0 / cfg.fov
    v += 1.0
    v *= cfg.h
    return u, v, r, pitch


def pixel_coords(points: np.ndarray, cfg: ProjectionConfig):
    """Integer pixels (floor then clamp), ranges, and the retained mask."""
    u, v, r, pitch = spherical_coords(points, cfg)
    nonzero = r > 0
    with np.errstate(invalid="ignore"):
        keep = nonzero & (pitch >= -cfg.fov_down) & (pitch <= cfg.fov_up)
    np.floor(u, out=u)
    np.clip(u, 0, cfg.w - 1, out=u)
    np.floor(v, out=v)
    np.nan_to_num(v, copy=False)
    np.clip(v, 0, cfg.h - 1, out=v)
    return u.astype(np.int64), v.astype(np.int64), r, keep, nonzero


def project_scan(scan: Scan, cfg: ProjectionConfig = ProjectionConfig()) -> RangeImage:
    pts = scan.points
    ui, vi, r, keep, nonzero = pixel_coords(pts, cfg)
    h, w = cfg.h, cfg.w
    winner = _kernels.scatter_nearest(ui, vi, keep, r, h, w)
    rng, xyz, rem = _kernels.gather_image(winner, pts, scan.remission, r)
    n_nonzero = int(np.count_nonzero(nonzero))
    return RangeImage(
        cfg=cfg,
        range=rng.reshape(h, w),
        xyz=xyz.reshape(h, w, 3),
        remission=rem.reshape(h, w),
        index=winner.reshape(h, w),
        point_u=np.where(keep, ui, -1),
        point_v=np.where(keep, vi, -1),
        n_zero_range=len(r) - n_nonzero,
        n_out_of_fov=n_nonzero - int(np.count_nonzero(keep)),
        frame=scan.frame,
    )


def project_ranges(points: np.ndarray, cfg: ProjectionConfig) -> np.ndarray:
    """Range-only projection with the same collision rule (nearest wins)."""
    ui, vi, r, keep, _ = pixel_coords(points, cfg)
    best = _kernels.scatter_min_range(ui, vi, keep, r, cfg.h, cfg.w)
    return best.reshape(cfg.h, cfg.w)


def unproject_labels(image_labels: np.ndarray, point_pixels: np.ndarray) -> np.ndarray:
    """Give every point the label of the pixel it projects to."""
    image_labels = np.asarray(image_labels)
    pp = np.asarray(point_pixels, dtype=np.int64).reshape(-1, 2)
    h, w = image_labels.shape
    u, v = pp[:, 0], pp[:, 1]
    if len(pp) and (u.min() < 0 or u.max() >= w or v.min() < 0 or v.max() >= h):
        raise PreconditionError("point pixel out of image bounds")
    return image_labels[v, u].astype(np.uint8)


def labels_for_scan(image_labels: np.ndarray, image: RangeImage) -> np.ndarray:
    """Per-point labels for every scan point; dropped points get IGNORE."""
    out = np.full(len(image.point_u), MovingLabel.IGNORE, dtype=np.uint8)
    keep = image.retained
    out[keep] = image_labels[image.point_v[keep], image.point_u[keep]]
    return out


def image_labels_from_points(labels: np.ndarray, image: RangeImage) -> np.ndarray:
    """Label grid holding the label of each pixel's source point."""
    grid = np.full(image.shape, MovingLabel.IGNORE, dtype=np.uint8)
    valid = image.valid
    grid[valid] = np.asarray(labels)[image.index[valid]]
    return grid


def knn_clean(scan: Scan, point_pixels: np.ndarray, image_ranges: np.ndarray,
              image_index: np.ndarray, raw_labels: np.ndarray, k: int = 5,
              window: int = 5, cutoff: float = 1.0) -> np.ndarray:
    """Majority vote over range-nearest neighbors in a pixel window.

    ``point_pixels`` is ``(M, 2)`` with rows of -1 for points not in the image;
    those keep their raw label. Each point votes for itself (range difference
    0) and competes with window pixels whose stored range lies within
    ``cutoff``; the ``k`` nearest by absolute range difference vote, ties in
    distance resolved by self first then row-major window order. A tied vote
    keeps the raw label.
    """
    if k < 1 or window < 1 or window % 2 == 0 or cutoff <= 0:
        raise PreconditionError("need k >= 1, odd window >= 1 and cutoff > 0")
    raw_labels = np.asarray(raw_labels, dtype=np.uint8)
    out = raw_labels.copy()
    pp = np.asarray(point_pixels, dtype=np.int64).reshape(-1, 2)
    inside = np.flatnonzero(pp[:, 0] >= 0)
    if len(inside) == 0 or (window == 1 and k == 1):
        return out
    pts = scan.points[inside]
    r_self = np.sqrt((pts * pts).sum(axis=1))
    return _kernels.knn_vote(pp[inside, 0], pp[inside, 1], r_self, inside, raw_labels,
                             np.asarray(image_ranges, dtype=np.float64),
                             np.asarray(image_index, dtype=np.int64), k, window, float(cutoff))


def dump_grid(path, planes: np.ndarray) -> None:
    """Write ``(C, h, w)`` planes as a text header line plus float32 data."""
    planes = np.asarray(planes, dtype="<f4")
    if planes.ndim == 2:
        planes = planes[None]
    c, h, w = planes.shape
    with open(path, "wb") as f:
        f.write(f"{h} {w} {c}\n".encode())
        f.write(planes.tobytes())


def load_grid(path) -> np.ndarray:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing grid header")
    try:
        h, w, c = (int(v) for v in data[:nl].split())
    except ValueError:
        raise FormatError(f"{path}: malformed grid header") from None
    body = data[nl + 1:]
    if len(body) != 4 * h * w * c:
        raise FormatError(f"{path}: expected {4 * h * w * c} data bytes, got {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(c, h, w)
