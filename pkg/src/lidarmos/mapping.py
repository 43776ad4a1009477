"""Aggregate scans into a global map with predicted-moving points removed."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from lidarmos.errors import PreconditionError
from lidarmos.geometry import check_pose, transform_points
from lidarmos.labels import MovingLabel


@dataclass
class AggregateMap:
    points: np.ndarray     # (K, 3) global frame
    remission: np.ndarray  # (K,)
    source_frame: np.ndarray
    source_index: np.ndarray
    voxel: Optional[float] = None
    removed: int = 0

    def __len__(self) -> int:
        return len(self.points)


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """Indices of one point per occupied voxel: the one nearest the voxel center.

    Ties on distance go to the lower index, so the result does not depend on
    the order in which points were appended.
    """
    if voxel <= 0:
        raise PreconditionError("voxel size must be positive")
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    cell = np.floor(points / voxel).astype(np.int64)
    d = np.linalg.norm(points - (cell + 0.5) * voxel, axis=1)
    order = np.lexsort((np.arange(len(points)), d, cell[:, 2], cell[:, 1], cell[:, 0]))
    c = cell[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = (c[1:] != c[:-1]).any(axis=1)
    return np.sort(order[first])


def build_map(sequence, predictions: Sequence[np.ndarray], poses: Sequence[np.ndarray] = None,
              voxel: Optional[float] = None) -> AggregateMap:
    """Stack every scan into the world frame, dropping points predicted moving.

    Ignore-labeled points stay in the map. ``poses`` defaults to the
    sequence's own absolute LiDAR poses.
    """
    poses = sequence.poses if poses is None else poses
    if len(predictions) != len(sequence) or len(poses) != len(sequence):
        raise PreconditionError(
            f"{len(predictions)} predictions and {len(poses)} poses for {len(sequence)} scans")
    pts, rem, frames, idx = [], [], [], []
    removed = 0
    for i in range(len(sequence)):
        scan = sequence.load_scan(i, with_labels=False)
        pred = np.asarray(predictions[i])
        if pred.shape != (len(scan),):
            raise PreconditionError(
                f"frame {i}: {pred.shape[0] if pred.ndim else 0} predictions for "
                f"{len(scan)} points")
        keep = pred != MovingLabel.MOVING
        removed += int((~keep).sum())
        T = check_pose(poses[i], f"pose {i}")
        pts.append(transform_points(scan.points[keep], T))
        rem.append(scan.remission[keep])
        frames.append(np.full(int(keep.sum()), i, dtype=np.int64))
        idx.append(np.flatnonzero(keep))
    cat = lambda parts, shape, dt: (np.concatenate(parts) if parts  # noqa: E731
                                    else np.zeros(shape, dtype=dt))
    m = AggregateMap(cat(pts, (0, 3), np.float64), cat(rem, (0,), np.float32),
                     cat(frames, (0,), np.int64), cat(idx, (0,), np.int64), voxel, removed)
    if voxel is not None:
        m = downsample(m, voxel)
    return m


def downsample(m: AggregateMap, voxel: float) -> AggregateMap:
    sel = voxel_downsample(m.points, voxel)
    return AggregateMap(m.points[sel], m.remission[sel], m.source_frame[sel],
                        m.source_index[sel], voxel, m.removed)


def export_ply(m: AggregateMap, path, binary: bool = False) -> None:
    n = len(m)
    header = ("ply\n"
              f"format {'binary_little_endian' if binary else 'ascii'} 1.0\n"
              f"element vertex {n}\n"
              "property float x\nproperty float y\nproperty float z\n"
              "property float remission\n"
              "end_header\n")
    data = np.empty((n, 4), dtype="<f4")
    data[:, :3] = m.points
    data[:, 3] = m.remission
    try:
        with open(path, "wb") as f:
            f.write(header.encode("ascii"))
            if binary:
                f.write(data.tobytes())
            else:
                for row in data:
                    f.write((" ".join(repr(float(v)) for v in row) + "\n").encode("ascii"))
    except OSError as e:
        raise OSError(f"cannot write PLY to {path}: {e}") from e


def read_ply(path):
    """Minimal reader for files written by ``export_ply``: ``(N, 4)`` float32."""
    with open(path, "rb") as f:
        lines = []
        while True:
            line = f.readline()
            if not line:
                raise PreconditionError(f"{path}: missing end_header")
            line = line.decode("ascii").strip()
            lines.append(line)
            if line == "end_header":
                break
        body = f.read()
    n = int(next(l for l in lines if l.startswith("element vertex")).split()[-1])
    if any("binary_little_endian" in l for l in lines):
        return np.frombuffer(body, dtype="<f4", count=4 * n).reshape(n, 4)
    rows = body.decode("ascii").split("\n")[:n]
    return np.array([[float(v) for v in r.split()] for r in rows], dtype=np.float32).reshape(n, 4)
