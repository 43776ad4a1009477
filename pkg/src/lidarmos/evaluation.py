"""Moving-class IoU and the sequence benchmark runner."""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from lidarmos.errors import PreconditionError
from lidarmos.geometry import Scan, invert_pose, perturb_pose
from lidarmos.labels import MovingLabel

log = logging.getLogger(__name__)


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def accumulate(counts: ConfusionCounts, predicted, truth) -> ConfusionCounts:
    """Add one scan's moving-class confusion to ``counts`` (ignore truth skipped)."""
    pred = np.asarray(predicted, dtype=np.uint8)
    gt = np.asarray(truth, dtype=np.uint8)
    if pred.shape != gt.shape:
        raise PreconditionError(f"prediction length {pred.shape} != truth length {gt.shape}")
    scored = gt != MovingLabel.IGNORE
    p = pred[scored] == MovingLabel.MOVING
    t = gt[scored] == MovingLabel.MOVING
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(p.size - tp - fp - fn)
    return counts + ConfusionCounts(tp, fp, fn, tn)


def iou(counts: ConfusionCounts):
    """Return ``(TP / (TP + FP + FN), undefined)``; 1.0 flagged when the denominator is 0."""
    denom = counts.tp + counts.fp + counts.fn
    if denom == 0:
        return 1.0, True
    return counts.tp / denom, False


@dataclass
class FrameInput:
    """What a segmentation method may see for one frame: only the past.

    ``history[j-1]`` is the ``j``-th previous scan and ``relative_poses[j]``
    maps the ``(j+1)``-th previous frame into the ``j``-th previous frame.
    """

    scan: Scan
    history: List[Scan]
    relative_poses: List[np.ndarray]
    frame: int
    seq_id: str = ""


Method = Callable[[FrameInput], np.ndarray]


@dataclass(frozen=True)
class BenchmarkConfig:
    n_residual: int = 1
    noise_units: int = 0
    seed: int = 0
    method_id: str = "residual"

    def fingerprint(self) -> str:
        return (f"method={self.method_id} n={self.n_residual} "
                f"noise={self.noise_units} seed={self.seed}")


@dataclass
class BenchmarkReport:
    config: BenchmarkConfig
    per_sequence: Dict[str, ConfusionCounts] = field(default_factory=dict)
    scan_counts: Dict[str, int] = field(default_factory=dict)
    skipped: List[str] = field(default_factory=list)

    @property
    def pooled(self) -> ConfusionCounts:
        total = ConfusionCounts()
        for c in self.per_sequence.values():
            total = total + c
        return total

    @property
    def iou(self) -> float:
        return iou(self.pooled)[0]

    @property
    def mean_sequence_iou(self) -> float:
        vals = [iou(c)[0] for c in self.per_sequence.values()]
        return float(np.mean(vals)) if vals else float("nan")

    def to_text(self) -> str:
        lines = [f"# {self.config.fingerprint()}",
                 f"{'sequence':<10}{'scans':>7}{'TP':>10}{'FP':>10}{'FN':>10}{'IoU':>9}"]
        for sid, c in sorted(self.per_sequence.items()):
            v, undef = iou(c)
            flag = "*" if undef else ""
            lines.append(f"{sid:<10}{self.scan_counts[sid]:>7}{c.tp:>10}{c.fp:>10}"
                         f"{c.fn:>10}{v:>8.4f}{flag}")
        p = self.pooled
        v, undef = iou(p)
        lines.append(f"{'pooled':<10}{sum(self.scan_counts.values()):>7}{p.tp:>10}"
                     f"{p.fp:>10}{p.fn:>10}{v:>8.4f}{'*' if undef else ''}")
        lines.append(f"mean per-sequence IoU: {self.mean_sequence_iou:.4f}")
        for sid in self.skipped:
            lines.append(f"skipped {sid}: no ground truth")
        if any(iou(c)[1] for c in self.per_sequence.values()) or undef:
            lines.append("* no moving points predicted or present; IoU reported as 1.0")
        return "\n".join(lines) + "\n"

    def to_kv(self) -> str:
        cfg = self.config
        out = {"method": cfg.method_id, "n_residual": cfg.n_residual,
               "noise_units": cfg.noise_units, "seed": cfg.seed}
        for sid, c in sorted(self.per_sequence.items()):
            v, undef = iou(c)
            out[f"seq.{sid}.scans"] = self.scan_counts[sid]
            for k, n in c.as_dict().items():
                out[f"seq.{sid}.{k}"] = n
            out[f"seq.{sid}.iou"] = repr(v)
            out[f"seq.{sid}.iou_undefined"] = int(undef)
        p = self.pooled
        for k, n in p.as_dict().items():
            out[f"pooled.{k}"] = n
        v, undef = iou(p)
        out["pooled.iou"] = repr(v)
        out["pooled.iou_undefined"] = int(undef)
        out["mean_sequence_iou"] = repr(self.mean_sequence_iou)
        out["skipped"] = ",".join(self.skipped)
        return "".join(f"{k}={v}\n" for k, v in out.items())


def noisy_relative(abs_poses: Sequence[np.ndarray], older: int, units: int, seed: int):
    """Odometry edge ``T^{older+1}_{older}`` with optional pose noise.

    The noise for an edge depends only on ``(seed, older)`` so every frame
    that reuses the edge sees the same perturbation.
    """
    T = invert_pose(abs_poses[older + 1]) @ abs_poses[older]
    if units:
        T = perturb_pose(T, units, rng_seed=int(seed) * 1_000_003 + older)
    return T


def iter_frames(sequence, n_history: int, noise_units: int = 0, seed: int = 0,
                with_labels: bool = False) -> Iterable[FrameInput]:
    """Stream frames in order with a backward-only history of ``n_history`` scans."""
    history: deque = deque(maxlen=max(n_history, 0))
    poses = sequence.poses
    for t in range(len(sequence)):
        scan = sequence.load_scan(t, with_labels=with_labels)
        past = list(history)
        rel = [noisy_relative(poses, t - j - 1, noise_units, seed) for j in range(len(past))]
        yield FrameInput(scan, past, rel, t, sequence.seq_id)
        if n_history > 0:
            history.appendleft(scan)


def run_benchmark(method: Method, sequences, config: BenchmarkConfig) -> BenchmarkReport:
    report = BenchmarkReport(config)
    for seq in sequences:
        if not seq.has_labels:
            log.warning("sequence %s has no ground truth; skipped", seq.seq_id)
            report.skipped.append(seq.seq_id)
            continue
        counts = ConfusionCounts()
        n = 0
        for frame in iter_frames(seq, config.n_residual, config.noise_units, config.seed,
                                 with_labels=True):
            counts = accumulate(counts, method(frame), frame.scan.labels)
            n += 1
        report.per_sequence[seq.seq_id] = counts
        report.scan_counts[seq.seq_id] = n
    return report


def score_predictions(sequence, predictions: Sequence[np.ndarray]) -> ConfusionCounts:
    """Counts for precomputed per-scan predictions against a sequence's labels."""
    if len(predictions) != len(sequence):
        raise PreconditionError(
            f"sequence {sequence.seq_id}: {len(predictions)} predictions for "
            f"{len(sequence)} scans")
    counts = ConfusionCounts()
    for i, pred in enumerate(predictions):
        counts = accumulate(counts, pred, sequence.load_scan(i).labels)
    return counts
