"""Synthetic LiDAR worlds rendered by exact ray casting.

Scenes are built from axis-aligned boxes and infinite planes. Each beam is the
direction of a range-image pixel center, so a rendered scan projects back onto
the pixel grid that generated it. Points hitting a mover are labeled with the
SemanticKITTI ``moving-car`` id; everything else keeps a static id.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from lidarmos.errors import PreconditionError
from lidarmos.geometry import Scan, make_pose, rot_z, transform_points
from lidarmos.projection import ProjectionConfig
from lidarmos.scanio import default_class_map, write_sequence

# SemanticKITTI semantic ids
ID_CAR = 10
ID_ROAD = 40
ID_BUILDING = 50
ID_MOVING_CAR = 252

# KITTI-style camera-from-LiDAR calibration
KITTI_TR = np.array([
    [0.0, -1.0, 0.0, -0.004],
    [0.0, 0.0, -1.0, -0.076],
    [1.0, 0.0, 0.0, -0.272],
    [0.0, 0.0, 0.0, 1.0],
])

EPS = 1e-9
SENSOR_HEIGHT = 1.73


@dataclass(frozen=True)
class Box:
    lo: Tuple[float, float, float]
    hi: Tuple[float, float, float]
    remission: float = 0.5
    semantic_id: int = ID_BUILDING
    hollow: bool = False  # rays from inside hit the walls (a room)

    def shifted(self, offset) -> "Box":
        off = np.asarray(offset, dtype=float)
        return replace(self, lo=tuple(np.asarray(self.lo) + off),
                       hi=tuple(np.asarray(self.hi) + off))

    def contains(self, pts: np.ndarray, pad: float = 0.0) -> np.ndarray:
        lo, hi = np.asarray(self.lo) - pad, np.asarray(self.hi) + pad
        return ((pts >= lo) & (pts <= hi)).all(axis=1)


@dataclass(frozen=True)
class Plane:
    """Points with ``normal . x == offset``."""

    normal: Tuple[float, float, float]
    offset: float
    remission: float = 0.2
    semantic_id: int = ID_ROAD


@dataclass(frozen=True)
class Mover:
    box: Box
    velocity: Tuple[float, float, float]  # meters per frame

    def at(self, frame: int) -> Box:
        return self.box.shifted(np.asarray(self.velocity) * frame)


@dataclass(frozen=True)
class SceneSpec:
    statics: Tuple = ()
    movers: Tuple[Mover, ...] = ()
    trajectory: Tuple[np.ndarray, ...] = ()
    sensor: ProjectionConfig = field(default_factory=ProjectionConfig)
    seed: int = 0
    range_noise: float = 0.0

    def __post_init__(self):
        if not self.trajectory:
            raise PreconditionError("trajectory must have at least one pose")
        for m in self.movers:
            diam = np.linalg.norm(np.subtract(m.box.hi, m.box.lo))
            if np.linalg.norm(m.velocity) >= max(diam, 1.0) * 10:
                raise PreconditionError("mover speed per frame exceeds scene scale")

    @property
    def frames(self) -> int:
        return len(self.trajectory)


@dataclass
class RenderedFrame:
    scan: Scan
    raw_labels: np.ndarray  # uint32 semantic ids
    pixel_u: np.ndarray
    pixel_v: np.ndarray
    primitive: np.ndarray   # index into statics + movers, per point


@dataclass
class RenderedSequence:
    seq_id: str
    spec: SceneSpec
    frames: List[RenderedFrame]

    @property
    def poses(self) -> List[np.ndarray]:
        return list(self.spec.trajectory)

    @property
    def scans(self) -> List[Scan]:
        return [f.scan for f in self.frames]

    @property
    def has_labels(self) -> bool:
        return True

    def __len__(self) -> int:
        return len(self.frames)

    def load_scan(self, i: int, with_labels: bool = True) -> Scan:
        scan = self.frames[i].scan
        return scan if with_labels else scan.with_labels(None)

    def write(self, root) -> None:
        write_sequence(root, self.seq_id, self.scans,
                       [f.raw_labels for f in self.frames], self.poses, KITTI_TR)


def beam_directions(cfg: ProjectionConfig) -> np.ndarray:
    """Unit ray directions ``(h, w, 3)`` through pixel centers, inverting the projection."""
    u = np.arange(cfg.w) + 0.5
    v = np.arange(cfg.h) + 0.5
    yaw = np.pi * (1.0 - 2.0 * u / cfg.w)
    pitch = (1.0 - v / cfg.h) * cfg.fov - cfg.fov_down
    cp = np.cos(pitch)[:, None]
    return np.stack([cp * np.cos(yaw)[None, :],
                     cp * np.sin(yaw)[None, :],
                     np.broadcast_to(np.sin(pitch)[:, None], (cfg.h, cfg.w))], axis=-1)


def ray_box(origin: np.ndarray, dirs: np.ndarray, box: Box) -> np.ndarray:
    """Hit distance per ray (inf on miss) with the slab method."""
    lo, hi = np.asarray(box.lo, float), np.asarray(box.hi, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    # rays parallel to a slab: inside -> unbounded, outside -> miss
    par = dirs == 0
    inside = (origin >= lo) & (origin <= hi)
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    tnear = tmin.max(axis=-1)
    tfar = tmax.min(axis=-1)
    hit = tnear <= tfar
    if box.hollow:
        t = np.where(hit & (tfar > EPS), tfar, np.inf)
    else:
        t = np.where(hit & (tnear > EPS), tnear, np.inf)
    return t


def ray_plane(origin: np.ndarray, dirs: np.ndarray, plane: Plane) -> np.ndarray:
    n = np.asarray(plane.normal, float)
    denom = dirs @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (plane.offset - origin @ n) / denom
    return np.where((denom != 0) & (t > EPS), t, np.inf)


def ray_hits(origin, dirs, prims) -> np.ndarray:
    """``(len(prims), n_rays)`` hit distances."""
    out = np.empty((len(prims), dirs.shape[0]))
    for i, p in enumerate(prims):
        out[i] = ray_box(origin, dirs, p) if isinstance(p, Box) else ray_plane(origin, dirs, p)
    return out


def frame_primitives(spec: SceneSpec, frame: int) -> list:
    return list(spec.statics) + [m.at(frame) for m in spec.movers]


def render_frame(spec: SceneSpec, frame: int) -> RenderedFrame:
    cfg = spec.sensor
    pose = np.asarray(spec.trajectory[frame], float)
    local = beam_directions(cfg).reshape(-1, 3)
    world = local @ pose[:3, :3].T
    prims = frame_primitives(spec, frame)
    if prims:
        t_all = ray_hits(pose[:3, 3], world, prims)
        which = t_all.argmin(axis=0)
        t = t_all[which, np.arange(len(which))]
    else:
        which = np.zeros(len(local), dtype=np.int64)
        t = np.full(len(local), np.inf)
    hit = np.flatnonzero(np.isfinite(t))
    t = t[hit]
    if spec.range_noise > 0:
        rng = np.random.default_rng([spec.seed, frame])
        t = np.maximum(t + rng.normal(scale=spec.range_noise, size=t.shape), 0.01)
    which = which[hit]
    pts = local[hit] * t[:, None]
    rem = np.array([p.remission for p in prims] or [0.0])[which]
    sem = np.array([p.semantic_id for p in spec.statics] + [ID_MOVING_CAR] * len(spec.movers)
                   or [0], dtype=np.uint32)[which]
    labels = default_class_map().map_semantic(sem)
    v, u = np.divmod(hit, cfg.w)
    scan = Scan(pts, rem, labels=labels, frame=frame)
    return RenderedFrame(scan, sem.astype(np.uint32), u, v, which)


def render_sequence(spec: SceneSpec, seq_id: str = "00") -> RenderedSequence:
    return RenderedSequence(seq_id, spec, [render_frame(spec, f) for f in range(spec.frames)])


def straight_trajectory(frames: int, start=(0.0, 0.0, 0.0), step=(0.0, 0.0, 0.0),
                        yaw: float = 0.0) -> tuple:
    R = rot_z(yaw)
    return tuple(make_pose(R, np.asarray(start) + f * np.asarray(step)) for f in range(frames))


def _floor(extent: float = 40.0) -> Box:
    z = -SENSOR_HEIGHT
    return Box((-extent, -extent, z - 0.2), (extent, extent, z), 0.2, ID_ROAD)


def _car(center_xy, length=4.2, width=1.8, along_x=True, parked=False, gap=0.35,
         height=1.5) -> Box:
    hx, hy = (length / 2, width / 2) if along_x else (width / 2, length / 2)
    z0 = -SENSOR_HEIGHT + gap
    cx, cy = center_xy
    return Box((cx - hx, cy - hy, z0), (cx + hx, cy + hy, z0 + height), 0.7,
               ID_CAR if parked else ID_MOVING_CAR)


def static_room(seed: int = 0, frames: int = 10, step: float = 0.5,
                sensor: Optional[ProjectionConfig] = None) -> SceneSpec:
    room = Box((-8.0, -6.0, -SENSOR_HEIGHT), (8.0, 6.0, 2.5), 0.4, ID_BUILDING, hollow=True)
    start = -step * (frames - 1) / 2
    return SceneSpec(statics=(room,), movers=(),
                     trajectory=straight_trajectory(frames, (start, 0, 0), (step, 0, 0)),
                     sensor=sensor or ProjectionConfig.from_degrees(64, 1024), seed=seed)


def crossing_box(seed: int = 0, frames: int = 20,
                 sensor: Optional[ProjectionConfig] = None) -> SceneSpec:
    rng = np.random.default_rng(seed)
    statics = (
        _floor(),
        Box((25.0, -30.0, -SENSOR_HEIGHT), (30.0, 30.0, 8.0), 0.5),
        Box((-10.0, 12.0, -SENSOR_HEIGHT), (20.0, 16.0, 6.0), 0.5),
        Box((-10.0, -16.0, -SENSOR_HEIGHT), (20.0, -12.0, 6.0), 0.5),
    )
    x = 12.0 + rng.uniform(-1.0, 1.0)
    mover = Mover(_car((x, -9.0), along_x=False), (0.0, 0.8, 0.0))
    return SceneSpec(statics=statics, movers=(mover,),
                     trajectory=straight_trajectory(frames, (0, 0, 0), (0.3, 0, 0)),
                     sensor=sensor or ProjectionConfig.from_degrees(64, 1024), seed=seed)


def approach(seed: int = 0, frames: int = 12, speed: float = 1.0,
             sensor: Optional[ProjectionConfig] = None) -> SceneSpec:
    """Stationary sensor; a tall vehicle drives straight at it.

    The front face reaches 10 m at frame 10. The vehicle stands on a small
    finite pad, so rays missing the vehicle mostly escape the scene.
    """
    start = 10.0 + 10 * speed
    body = Box((start, -1.25, -SENSOR_HEIGHT), (start + 8.0, 1.25, 2.0), 0.7, ID_MOVING_CAR)
    pad = Box((-15.0, -15.0, -SENSOR_HEIGHT - 0.2), (15.0, 15.0, -SENSOR_HEIGHT), 0.2, ID_ROAD)
    return SceneSpec(statics=(pad,), movers=(Mover(body, (-speed, 0.0, 0.0)),),
                     trajectory=straight_trajectory(frames),
                     sensor=sensor or ProjectionConfig.from_degrees(64, 1024), seed=seed)


# (axis of travel, lateral offset, direction) for the four lanes
LANES = ((1, 9.0, 1.0), (1, -9.5, -1.0), (0, 3.5, -1.0), (0, -3.5, 1.0))


def _lane_car(lane, s: float, parked: bool) -> Box:
    axis, lateral, _ = lane
    center = (lateral, s) if axis == 1 else (s, lateral)
    return _car(center, along_x=axis == 0, parked=parked)


def _parked_slot(rng, lane, swept, keep_out) -> float:
    """Position along the lane clear of the mover's path and the crossings."""
    lo, hi = swept
    for _ in range(1000):
        s = rng.uniform(-32.0, 32.0)
        if lo - 6.0 < s < hi + 6.0:
            continue
        if any(abs(s - c) < 6.0 for c in keep_out):
            continue
        return s
    raise PreconditionError("no free parking slot in lane")


def busy_intersection(seed: int = 0, frames: int = 16,
                      sensor: Optional[ProjectionConfig] = None) -> SceneSpec:
    """Ego vehicle waits at an intersection while four cars move.

    Each lane holds one mover and one parked twin of identical shape and
    remission. Positions along the lane are random per seed and drawn from
    overlapping ranges, so neither shape nor location tells them apart.
    """
    rng = np.random.default_rng(seed)
    statics = [
        _floor(),
        Box((14.0, 12.0, -SENSOR_HEIGHT), (34.0, 30.0, 9.0), 0.5),
        Box((-34.0, 12.0, -SENSOR_HEIGHT), (-14.0, 30.0, 7.0), 0.45),
        Box((14.0, -30.0, -SENSOR_HEIGHT), (34.0, -12.0, 6.0), 0.55),
        Box((-34.0, -30.0, -SENSOR_HEIGHT), (-14.0, -12.0, 10.0), 0.5),
    ]
    # lanes along y cross the x-lanes near s = +-3.5, lanes along x cross at 9 and -9.5
    crossings = {1: (0.0, 3.5, -3.5), 0: (0.0, 9.0, -9.5)}
    movers, twins = [], []
    for lane in LANES:
        axis, _, sign = lane
        speed = rng.uniform(0.7, 1.1)
        travel = speed * (frames - 1)
        start = rng.uniform(-30.0, 30.0 - travel) if sign > 0 else rng.uniform(-30.0 + travel, 30.0)
        end = start + sign * travel
        vel = [0.0, 0.0, 0.0]
        vel[axis] = sign * speed
        movers.append(Mover(_lane_car(lane, start, parked=False), tuple(vel)))
        slot = _parked_slot(rng, lane, (min(start, end), max(start, end)), crossings[axis])
        twins.append(_lane_car(lane, slot, parked=True))
    return SceneSpec(statics=tuple(statics + twins), movers=tuple(movers),
                     trajectory=straight_trajectory(frames),
                     sensor=sensor or ProjectionConfig.from_degrees(64, 1024), seed=seed)


PRESETS = {
    "static-room": (static_room, ("00",)),
    "crossing-box": (crossing_box, ("00",)),
    "approach": (approach, ("00",)),
    # 00-03 train, 08 validation
    "busy-intersection": (busy_intersection, ("00", "01", "02", "03", "08")),
}


def make_benchmark(preset: str, seed: int = 0,
                   sensor: Optional[ProjectionConfig] = None) -> List[RenderedSequence]:
    if preset not in PRESETS:
        raise KeyError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    build, seq_ids = PRESETS[preset]
    out = []
    for i, sid in enumerate(seq_ids):
        sub_seed = int(np.random.default_rng([seed, i]).integers(2**31))
        spec = build(seed=sub_seed if len(seq_ids) > 1 else seed, sensor=sensor)
        out.append(render_sequence(spec, sid))
    return out


def swept_volume_mask(mover: Mover, frames: int, pts: np.ndarray, pad: float = 0.0) -> np.ndarray:
    """Points inside the union of the mover's box over all frames."""
    lo = np.minimum(np.asarray(mover.at(0).lo), np.asarray(mover.at(frames - 1).lo))
    hi = np.maximum(np.asarray(mover.at(0).hi), np.asarray(mover.at(frames - 1).hi))
    return Box(tuple(lo), tuple(hi)).contains(pts, pad)


def world_points(frame: RenderedFrame, pose: np.ndarray) -> np.ndarray:
    return transform_points(frame.scan.points, pose)
