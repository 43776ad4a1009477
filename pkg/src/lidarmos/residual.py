"""Ego-motion compensated residual images and the fused network input."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from lidarmos.errors import PreconditionError
from lidarmos.geometry import Scan, check_pose, compose_relative, transform_points
from lidarmos.projection import ProjectionConfig, RangeImage, project_ranges

BASE_CHANNELS = ("x", "y", "z", "range", "remission")


@dataclass(frozen=True)
class ResidualStack:
    """``(N, h, w)`` float32 residuals aligned with the current range image.

    ``past_ranges`` keeps each transformed past scan's range image; it is what
    the free-space check compares against; ``valid`` is the current image's
    validity mask.
    """

    residuals: np.ndarray
    past_ranges: np.ndarray
    valid: np.ndarray
    frame: int = 0
    sources: Tuple[int, ...] = ()

    @property
    def n(self) -> int:
        return self.residuals.shape[0]

    @classmethod
    def empty(cls, current: RangeImage) -> "ResidualStack":
        h, w = current.shape
        return cls(np.zeros((0, h, w), np.float32), np.zeros((0, h, w), np.float32),
                   current.valid)


def residual_from_ranges(current_range: np.ndarray, past_range: np.ndarray) -> np.ndarray:
    """``|r - r_past| / r`` on pixels valid in both images, 0 elsewhere."""
    cur = current_range.astype(np.float64)
    # both images carry float32 ranges, so identical scans cancel exactly
    past_range = np.asarray(past_range, dtype=np.float32).astype(np.float64)
    both = (cur > 0) & (past_range > 0)
    d = np.zeros(cur.shape)
    np.divide(np.abs(cur - past_range), cur, out=d, where=both)
    return d.astype(np.float32)


def gen_residual(current: RangeImage, past_scan: Scan, T_past_to_current: np.ndarray,
                 cfg: Optional[ProjectionConfig] = None, return_ranges: bool = False):
    cfg = cfg or current.cfg
    if cfg != current.cfg:
        raise PreconditionError("projection config differs from the current image's")
    T = check_pose(T_past_to_current)
    past = project_ranges(transform_points(past_scan.points, T), cfg)
    d = residual_from_ranges(current.range, past)
    if return_ranges:
        return d, past.astype(np.float32)
    return d


def build_stack(scans: Sequence[Scan], relative_poses: Sequence[np.ndarray],
                current: RangeImage, cfg: Optional[ProjectionConfig] = None,
                n_channels: Optional[int] = None) -> ResidualStack:
    """Residuals of the ``j``-th previous scan for ``j = 1..len(scans)``.

    ``scans[j-1]`` is the ``j``-th previous scan. ``relative_poses[j]`` maps the
    ``(j+1)``-th previous frame into the ``j``-th previous frame (index 0 being
    the current frame), so ``T^0_j = compose_relative(relative_poses, j, 0)``.
    With ``n_channels`` larger than ``len(scans)`` the stack is zero padded.
    """
    cfg = cfg or current.cfg
    n = len(scans)
    if len(relative_poses) < n:
        raise PreconditionError(
            f"missing pose for previous frame {len(relative_poses) + 1} "
            f"(have {len(relative_poses)} relative poses for {n} scans)")
    total = n if n_channels is None else n_channels
    if total < n:
        raise PreconditionError(f"{n} scans do not fit into {total} channels")
    h, w = cfg.h, cfg.w
    res = np.zeros((total, h, w), np.float32)
    past = np.full((total, h, w), -1.0, np.float32)
    for j in range(1, n + 1):
        T = compose_relative(relative_poses, j, 0)
        res[j - 1], past[j - 1] = gen_residual(current, scans[j - 1], T, cfg,
                                               return_ranges=True)
    return ResidualStack(res, past, current.valid, frame=current.frame,
                         sources=tuple(s.frame for s in scans))


@dataclass(frozen=True)
class NormalizationSpec:
    """Per-channel ``(value - mean) / scale`` for channels x, y, z, r, e, d1..dN."""

    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        scale = np.asarray(self.scale, dtype=np.float64).reshape(-1)
        if mean.shape != scale.shape:
            raise PreconditionError("mean and scale lengths differ")
        if (scale <= 0).any() or not np.isfinite(scale).all():
            raise PreconditionError("normalization scales must be finite and positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", scale)

    @property
    def channels(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def identity(cls, channels: int) -> "NormalizationSpec":
        return cls(np.zeros(channels), np.ones(channels))

    def __eq__(self, other):
        if not isinstance(other, NormalizationSpec):
            return NotImplemented
        return (np.array_equal(self.mean, other.mean)
                and np.array_equal(self.scale, other.scale))


@dataclass(frozen=True)
class FusedInput:
    """``(5 + N, h, w)`` normalized channels plus the validity mask."""

    data: np.ndarray
    valid: np.ndarray
    norm: NormalizationSpec

    @property
    def n_residual(self) -> int:
        return self.data.shape[0] - len(BASE_CHANNELS)

    def denormalize(self) -> np.ndarray:
        return self.data * self.norm.scale[:, None, None] + self.norm.mean[:, None, None]


def raw_channels(current: RangeImage, stack: ResidualStack) -> np.ndarray:
    if stack.residuals.shape[1:] != current.shape:
        raise PreconditionError(
            f"residual shape {stack.residuals.shape[1:]} != image shape {current.shape}")
    return np.concatenate([current.channels().astype(np.float64),
                           stack.residuals.astype(np.float64)])


def fuse(current: RangeImage, stack: ResidualStack, norm: NormalizationSpec) -> FusedInput:
    raw = raw_channels(current, stack)
    if norm.channels != raw.shape[0]:
        raise PreconditionError(
            f"normalization has {norm.channels} channels, input has {raw.shape[0]}")
    data = (raw - norm.mean[:, None, None]) / norm.scale[:, None, None]
    valid = current.valid
    data[:, ~valid] = 0.0
    return FusedInput(data, valid, norm)


def estimate_normalization(samples) -> NormalizationSpec:
    """Mean / std per channel over the valid pixels of ``(raw, valid)`` pairs."""
    total, sq, count = None, None, 0
    for raw, valid in samples:
        vals = raw[:, valid].astype(np.float64)
        total = vals.sum(axis=1) if total is None else total + vals.sum(axis=1)
        sq = (vals ** 2).sum(axis=1) if sq is None else sq + (vals ** 2).sum(axis=1)
        count += vals.shape[1]
    if count == 0:
        raise PreconditionError("no valid pixels to estimate normalization from")
    mean = total / count
    std = np.sqrt(np.maximum(sq / count - mean ** 2, 0.0))
    return NormalizationSpec(mean, np.where(std > 1e-6, std, 1.0))
