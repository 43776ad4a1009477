"""Readers and writers for KITTI odometry / SemanticKITTI style datasets.

Layout under a dataset root::

    sequences/<seq>/velodyne/%06d.bin    float32 x, y, z, remission
    sequences/<seq>/labels/%06d.label    uint32 (instance << 16 | semantic)
    sequences/<seq>/poses.txt            12 floats per line, camera frame
    sequences/<seq>/calib.txt            contains a "Tr:" row
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from lidarmos.errors import CalibrationError, FormatError, ValidationError
from lidarmos.geometry import Scan, camera_to_lidar_frame, lidar_to_camera_frame
from lidarmos.labels import MovingLabel

log = logging.getLogger(__name__)

POINT_BYTES = 16
_NAMES = {"static": MovingLabel.STATIC, "moving": MovingLabel.MOVING,
          "ignore": MovingLabel.IGNORE}


@dataclass(frozen=True)
class ClassMap:
    """Raw semantic id to ``MovingLabel`` mapping plus writer output codes."""

    version: int
    table: Dict[int, MovingLabel]
    default: MovingLabel = MovingLabel.STATIC
    write_moving: int = 251
    write_static: int = 9
    _lut: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        lut = np.full(1 << 16, int(self.default), dtype=np.uint8)
        for k, v in self.table.items():
            lut[k] = int(v)
        object.__setattr__(self, "_lut", lut)

    def map_semantic(self, semantic: np.ndarray) -> np.ndarray:
        return self._lut[np.asarray(semantic) & 0xFFFF]

    @classmethod
    def parse(cls, text: str) -> "ClassMap":
        table, version, default = {}, None, MovingLabel.STATIC
        codes = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if ":" not in line:
                raise FormatError(f"class map line {lineno}: expected 'key: value'")
            key, val = (s.strip() for s in line.split(":", 1))
            if key == "version":
                version = int(val)
            elif key == "default":
                default = _NAMES[val]
            elif key.startswith("write."):
                codes[key[len("write."):]] = int(val)
            else:
                if val not in _NAMES:
                    raise FormatError(f"class map line {lineno}: unknown class {val!r}")
                table[int(key)] = _NAMES[val]
        if version is None:
            raise FormatError("class map has no version")
        return cls(version, table, default,
                   codes.get("moving", 251), codes.get("static", 9))

    @classmethod
    def load(cls, path=None) -> "ClassMap":
        if path is None:
            text = resources.files("lidarmos").joinpath("classmap.cfg").read_text()
        else:
            text = Path(path).read_text()
        return cls.parse(text)


_DEFAULT_MAP: Optional[ClassMap] = None


def default_class_map() -> ClassMap:
    global _DEFAULT_MAP
    if _DEFAULT_MAP is None:
        _DEFAULT_MAP = ClassMap.load()
    return _DEFAULT_MAP


def read_scan_bin(path, frame: int = 0) -> Scan:
    path = Path(path)
    data = path.read_bytes()
    if len(data) % POINT_BYTES:
        whole = len(data) - len(data) % POINT_BYTES
        raise FormatError(
            f"{path}: size {len(data)} not divisible by {POINT_BYTES}; "
            f"truncated record at byte offset {whole}")
    arr = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    bad = ~np.isfinite(arr[:, :3]).all(axis=1)
    if bad.any():
        raise ValidationError(
            f"{path}: non-finite coordinate at point index {int(np.flatnonzero(bad)[0])}")
    return Scan(arr[:, :3], arr[:, 3], frame=frame)


def write_scan_bin(path, scan: Scan) -> None:
    out = np.empty((len(scan), 4), dtype="<f4")
    out[:, :3] = scan.points
    out[:, 3] = scan.remission
    Path(path).write_bytes(out.tobytes())


def read_raw_labels(path, num_points: int) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if len(data) != 4 * num_points:
        raise FormatError(
            f"{path}: expected {4 * num_points} bytes for {num_points} points, "
            f"got {len(data)}")
    return np.frombuffer(data, dtype="<u4")


def read_semantic_labels(path, num_points: int, class_map: ClassMap = None) -> np.ndarray:
    """Return ``(M,)`` uint8 ``MovingLabel`` values for a ``.label`` file."""
    class_map = class_map or default_class_map()
    raw = read_raw_labels(path, num_points)
    return class_map.map_semantic(raw & 0xFFFF)


def write_raw_labels(path, raw: np.ndarray) -> None:
    Path(path).write_bytes(np.asarray(raw, dtype="<u4").tobytes())


def write_prediction_labels(path, labels, class_map: ClassMap = None) -> None:
    """Write moving/static predictions as uint32 benchmark codes.

    Ignore entries are written as static; the writer never emits ignore.
    """
    class_map = class_map or default_class_map()
    labels = np.asarray(labels, dtype=np.uint8)
    out = np.where(labels == MovingLabel.MOVING,
                   class_map.write_moving, class_map.write_static).astype("<u4")
    try:
        Path(path).write_bytes(out.tobytes())
    except OSError as e:
        raise OSError(f"failed writing predictions to {path}: {e}") from e


def _parse_rows(path, what: str) -> List[np.ndarray]:
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                vals = np.array([float(v) for v in line.split()])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: malformed {what} line") from None
            if vals.shape != (12,) or not np.isfinite(vals).all():
                raise FormatError(
                    f"{path}:{lineno}: expected 12 finite floats, got {line.strip()!r}")
            rows.append(vals)
    return rows


def _to_pose(vals: np.ndarray) -> np.ndarray:
    T = np.eye(4)
    T[:3, :] = vals.reshape(3, 4)
    return T


def read_calib(calib_path) -> np.ndarray:
    with open(calib_path) as f:
        for lineno, line in enumerate(f, 1):
            key, _, rest = line.partition(":")
            if key.strip() != "Tr":
                continue
            try:
                vals = np.array([float(v) for v in rest.split()])
            except ValueError:
                raise CalibrationError(f"{calib_path}:{lineno}: malformed Tr row") from None
            if vals.shape != (12,):
                raise CalibrationError(f"{calib_path}:{lineno}: Tr needs 12 values")
            return _to_pose(vals)
    raise CalibrationError(f"{calib_path}: no 'Tr:' row")


def read_poses(poses_path, calib_path) -> List[np.ndarray]:
    """Absolute LiDAR-frame poses from a KITTI ``poses.txt`` + ``calib.txt``."""
    Tr = read_calib(calib_path)
    return [camera_to_lidar_frame(_to_pose(v), Tr)
            for v in _parse_rows(poses_path, "pose")]


def write_poses(poses_path, lidar_poses, Tr: np.ndarray) -> None:
    with open(poses_path, "w") as f:
        for P in lidar_poses:
            cam = lidar_to_camera_frame(P, Tr)
            f.write(" ".join(f"{v:.12e}" for v in cam[:3, :].reshape(-1)) + "\n")


def write_calib(calib_path, Tr: np.ndarray) -> None:
    with open(calib_path, "w") as f:
        f.write("Tr: " + " ".join(f"{v:.12e}" for v in Tr[:3, :].reshape(-1)) + "\n")


@dataclass
class DatasetSequence:
    """One sequence on disk, loaded lazily scan by scan."""

    seq_id: str
    root: Path
    scan_files: List[Path]
    poses: List[np.ndarray]
    calib: np.ndarray
    label_files: Optional[List[Path]] = None

    def __len__(self) -> int:
        return len(self.scan_files)

    @property
    def has_labels(self) -> bool:
        return self.label_files is not None

    def load_scan(self, i: int, with_labels: bool = True) -> Scan:
        scan = read_scan_bin(self.scan_files[i], frame=i)
        if with_labels and self.label_files is not None:
            raw = read_raw_labels(self.label_files[i], len(scan))
            labels = default_class_map().map_semantic(raw & 0xFFFF)
            return Scan(scan.points, scan.remission, labels=labels, frame=i,
                        raw_labels=raw)
        return scan

    def __iter__(self):
        for i in range(len(self)):
            yield self.load_scan(i)


def sequence_dir(root, seq_id: str) -> Path:
    return Path(root) / "sequences" / seq_id


def load_sequence(root, seq_id: str) -> DatasetSequence:
    d = sequence_dir(root, seq_id)
    vdir = d / "velodyne"
    if not vdir.is_dir():
        raise FileNotFoundError(f"missing scan directory {vdir}")
    scans = sorted(vdir.glob("*.bin"))
    for p in scans:
        if os.path.getsize(p) % POINT_BYTES:
            raise FormatError(f"{p}: size not divisible by {POINT_BYTES}")
    poses = read_poses(d / "poses.txt", d / "calib.txt")
    if len(poses) != len(scans):
        raise FormatError(
            f"sequence {seq_id}: {len(poses)} poses but {len(scans)} scan files")
    ldir = d / "labels"
    labels = None
    if ldir.is_dir():
        labels = [ldir / (p.stem + ".label") for p in scans]
        missing = [p for p in labels if not p.exists()]
        if missing:
            log.warning("sequence %s: %d label files missing, treating as unlabeled",
                        seq_id, len(missing))
            labels = None
    return DatasetSequence(seq_id, d, scans, poses, read_calib(d / "calib.txt"), labels)


def list_sequences(root) -> List[str]:
    base = Path(root) / "sequences"
    if not base.is_dir():
        return []
    return sorted(p.name for p in base.iterdir() if (p / "velodyne").is_dir())


def write_sequence(root, seq_id: str, scans, raw_labels, lidar_poses, Tr) -> Path:
    """Write scans, raw uint32 labels, poses and calibration in KITTI layout."""
    d = sequence_dir(root, seq_id)
    (d / "velodyne").mkdir(parents=True, exist_ok=True)
    if raw_labels is not None:
        (d / "labels").mkdir(exist_ok=True)
    for i, scan in enumerate(scans):
        write_scan_bin(d / "velodyne" / f"{i:06d}.bin", scan)
        if raw_labels is not None:
            write_raw_labels(d / "labels" / f"{i:06d}.label", raw_labels[i])
    write_poses(d / "poses.txt", lidar_poses, Tr)
    write_calib(d / "calib.txt", Tr)
    return d
