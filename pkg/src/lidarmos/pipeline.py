"""The online segmentation pipeline with per-stage timing.

project -> residual -> segment -> kNN clean -> per-point labels
"""
from __future__ import annotations

import time
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from lidarmos.evaluation import FrameInput
from lidarmos.heuristic import HeuristicParams, residual_rg, segment_residual
from lidarmos.labels import MovingLabel
from lidarmos.projection import (ProjectionConfig, RangeImage, knn_clean, labels_for_scan,
                                 project_scan)
from lidarmos.residual import ResidualStack, build_stack

STAGES = ("projection", "residual", "segmentation", "knn")

Segmenter = Callable[[RangeImage, ResidualStack], np.ndarray]


@dataclass(frozen=True)
class KnnParams:
    k: int = 5
    window: int = 5
    cutoff: float = 1.0
    enabled: bool = True


class MosPipeline:
    """Callable ``FrameInput -> per-point MovingLabel array``.

    Stacks always have ``n_residual`` channels; frames with a shorter history
    get zero-filled channels.
    """

    def __init__(self, segmenter: Segmenter, n_residual: int,
                 cfg: ProjectionConfig = ProjectionConfig(), knn: KnnParams = KnnParams()):
        self.segmenter = segmenter
        self.n_residual = n_residual
        self.cfg = cfg
        self.knn = knn
        self.timings: Dict[str, List[float]] = defaultdict(list)

    def __call__(self, frame: FrameInput) -> np.ndarray:
        t0 = time.perf_counter()
        current = project_scan(frame.scan, self.cfg)
        t1 = time.perf_counter()
        history = frame.history[:self.n_residual]
        stack = build_stack(history, frame.relative_poses, current, self.cfg,
                            n_channels=self.n_residual)
        t2 = time.perf_counter()
        grid = self.segmenter(current, stack)
        t3 = time.perf_counter()
        labels = labels_for_scan(grid, current)
        if self.knn.enabled:
            pp = np.stack([current.point_u, current.point_v], axis=1)
            labels = knn_clean(frame.scan, pp, current.range, current.index, labels,
                               self.knn.k, self.knn.window, self.knn.cutoff)
        # points outside the image have no evidence of motion
        labels[labels == MovingLabel.IGNORE] = MovingLabel.STATIC
        t4 = time.perf_counter()
        for name, dt in zip(STAGES, (t1 - t0, t2 - t1, t3 - t2, t4 - t3)):
            self.timings[name].append(dt)
        return labels

    def timing_summary(self, warmup: int = 10) -> Dict[str, Dict[str, float]]:
        """Mean / median / p99 in milliseconds, excluding the first ``warmup`` frames."""
        out = {}
        stages = list(STAGES) + ["total"]
        totals = np.sum([self.timings[s] for s in STAGES], axis=0) if self.timings else []
        for name in stages:
            vals = np.asarray(totals if name == "total" else self.timings[name]) * 1e3
            vals = vals[warmup:] if len(vals) > warmup else vals
            if len(vals) == 0:
                continue
            out[name] = {"mean": float(vals.mean()), "median": float(np.median(vals)),
                         "p99": float(np.percentile(vals, 99)), "count": int(len(vals))}
        return out


def residual_segmenter(params: HeuristicParams = HeuristicParams()) -> Segmenter:
    def seg(current: RangeImage, stack: ResidualStack) -> np.ndarray:
        return segment_residual(stack, params)
    return seg


def residual_rg_segmenter(params: HeuristicParams = HeuristicParams()) -> Segmenter:
    def seg(current: RangeImage, stack: ResidualStack) -> np.ndarray:
        return residual_rg(current, stack, params)
    return seg


def learned_segmenter(model) -> Segmenter:
    from lidarmos.learned import predict_image
    from lidarmos.residual import fuse

    def seg(current: RangeImage, stack: ResidualStack) -> np.ndarray:
        return predict_image(model, fuse(current, stack, model.norm))
    return seg


def oracle_method(frame: FrameInput) -> np.ndarray:
    return frame.scan.labels.copy()


def constant_static_method(frame: FrameInput) -> np.ndarray:
    return np.full(len(frame.scan), MovingLabel.STATIC, dtype=np.uint8)
