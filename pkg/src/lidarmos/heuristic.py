"""Non-learned baselines: residual thresholding, free-space check, region growing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from lidarmos.errors import PreconditionError, ValidationError
from lidarmos.labels import MovingLabel
from lidarmos.projection import RangeImage
from lidarmos.residual import ResidualStack


@dataclass(frozen=True)
class HeuristicParams:
    threshold: float = 0.1
    min_votes: int = 1
    free_space_margin: float = 0.3
    grow_tolerance: float = 0.5
    min_region_size: int = 10

    def __post_init__(self):
        if self.threshold <= 0 or self.free_space_margin <= 0:
            raise ValidationError("threshold and free-space margin must be positive")
        if self.min_region_size < 1 or self.min_votes < 1:
            raise ValidationError("min region size and min votes must be >= 1")


def _grid(mask: np.ndarray, valid: np.ndarray) -> np.ndarray:
    out = np.full(mask.shape, MovingLabel.STATIC, dtype=np.uint8)
    out[mask] = MovingLabel.MOVING
    out[~valid] = MovingLabel.IGNORE
    return out


def candidate_mask(stack: ResidualStack, valid: np.ndarray, params: HeuristicParams) -> np.ndarray:
    if stack.n == 0:
        raise PreconditionError("residual thresholding needs at least one residual channel")
    votes = (stack.residuals > params.threshold).sum(axis=0)
    return (votes >= params.min_votes) & valid


def segment_residual(stack: ResidualStack, params: HeuristicParams) -> np.ndarray:
    """Moving where the residual exceeds the threshold in enough channels."""
    return _grid(candidate_mask(stack, stack.valid, params), stack.valid)


def free_space_check(current: RangeImage, past_range: np.ndarray, candidates: np.ndarray,
                     margin: float) -> np.ndarray:
    """Keep candidates whose past ray reached strictly beyond the current return."""
    if past_range.shape != current.shape or candidates.shape != current.shape:
        raise PreconditionError("free-space check inputs must share the image shape")
    r = current.range.astype(np.float64)
    rp = past_range.astype(np.float64)
    return candidates & (rp > 0) & (rp > r + margin)


def grow_regions(seeds: np.ndarray, ranges: np.ndarray, valid: np.ndarray,
                 tolerance: float, min_size: int) -> np.ndarray:
    """Union of range-connected regions (4-neighborhood, azimuth wrap) touching a seed."""
    if tolerance <= 0:
        raise PreconditionError("region growing tolerance must be positive")
    h, w = ranges.shape
    seeds = seeds & valid
    if not seeds.any():
        return np.zeros((h, w), dtype=bool)
    r = ranges.astype(np.float64)
    idx = np.arange(h * w).reshape(h, w)
    rows, cols = [], []
    # right neighbor with wrap at the azimuth seam
    right = np.roll(idx, -1, axis=1)
    ok = valid & valid[:, np.r_[1:w, 0]] & (np.abs(r - r[:, np.r_[1:w, 0]]) <= tolerance)
    rows.append(idx[ok]), cols.append(right[ok])
    ok = valid[:-1] & valid[1:] & (np.abs(r[:-1] - r[1:]) <= tolerance)
    rows.append(idx[:-1][ok]), cols.append(idx[1:][ok])
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    graph = coo_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(h * w, h * w))
    _, comp = connected_components(graph, directed=False)
    comp = comp.reshape(h, w)
    sizes = np.bincount(comp[valid], minlength=comp.max() + 1)
    grown = np.zeros(comp.max() + 1, dtype=bool)
    grown[np.unique(comp[seeds])] = True
    grown &= sizes >= min_size
    return grown[comp] & valid


def region_grow(seeds: np.ndarray, current: RangeImage, tolerance: float,
                min_size: int) -> np.ndarray:
    mask = grow_regions(seeds, current.range, current.valid, tolerance, min_size)
    return _grid(mask, current.valid)


def residual_rg(current: RangeImage, stack: ResidualStack, params: HeuristicParams) -> np.ndarray:
    """Threshold, free-space check against the latest past scan, then region growing."""
    cand = candidate_mask(stack, current.valid, params)
    seeds = free_space_check(current, stack.past_ranges[0], cand, params.free_space_margin)
    return region_grow(seeds, current, params.grow_tolerance, params.min_region_size)
