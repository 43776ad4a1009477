from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidarmos.errors import PreconditionError, ValidationError
from lidarmos.evaluation import ConfusionCounts, accumulate, iou
from lidarmos.geometry import invert_pose
from lidarmos.heuristic import (HeuristicParams, candidate_mask, free_space_check,
                                grow_regions, region_grow, residual_rg, segment_residual)
from lidarmos.labels import MovingLabel
from lidarmos.projection import image_labels_from_points, project_scan
from lidarmos.residual import ResidualStack, build_stack

P = HeuristicParams()


def stack_of(res, valid=None):
    res = np.asarray(res, np.float32)
    valid = np.ones(res.shape[1:], bool) if valid is None else valid
    return ResidualStack(res, np.full(res.shape, -1, np.float32), valid)


def bfs_grow(seeds, r, valid, tol, min_size):
    h, w = r.shape
    comp = -np.ones((h, w), int)
    sizes = []
    for sv, su in zip(*np.nonzero(valid)):
        if comp[sv, su] >= 0:
            continue
        cid = len(sizes)
        comp[sv, su] = cid
        q, n = deque([(sv, su)]), 0
        while q:
            v, u = q.popleft()
            n += 1
            for vv, uu in ((v - 1, u), (v + 1, u), (v, (u - 1) % w), (v, (u + 1) % w)):
                if 0 <= vv < h and valid[vv, uu] and comp[vv, uu] < 0 \
                        and abs(r[vv, uu] - r[v, u]) <= tol:
                    comp[vv, uu] = cid
                    q.append((vv, uu))
        sizes.append(n)
    keep = {c for c in comp[seeds & valid] if sizes[c] >= min_size}
    return np.isin(comp, list(keep)) & valid


def frame_stack(seq, t, n=1):
    cfg = seq.spec.sensor
    Ps = seq.poses
    cur = project_scan(seq.frames[t].scan, cfg)
    rel = [invert_pose(Ps[t - j]) @ Ps[t - j - 1] for j in range(n)]
    stack = build_stack([seq.frames[t - j].scan for j in range(1, n + 1)], rel, cur)
    truth = image_labels_from_points(seq.frames[t].scan.labels, cur)
    return cur, stack, truth


def test_zero_stack_has_no_moving():
    out = segment_residual(stack_of(np.zeros((2, 4, 8))), P)
    assert not (out == MovingLabel.MOVING).any()


def test_single_pixel_twice_threshold():
    res = np.zeros((3, 4, 8))
    res[:, 1, 2] = 2 * P.threshold
    out = segment_residual(stack_of(res), P)
    assert out[1, 2] == MovingLabel.MOVING and (out == MovingLabel.MOVING).sum() == 1


def test_invalid_pixels_ignored():
    valid = np.ones((4, 8), bool)
    valid[0] = False
    out = segment_residual(stack_of(np.ones((1, 4, 8)), valid), P)
    assert (out[0] == MovingLabel.IGNORE).all() and (out[1:] == MovingLabel.MOVING).all()


def test_min_votes():
    res = np.zeros((3, 2, 2))
    res[:2, 0, 0] = 1.0
    res[0, 1, 1] = 1.0
    out = segment_residual(stack_of(res), HeuristicParams(min_votes=2))
    assert out[0, 0] == MovingLabel.MOVING and out[1, 1] == MovingLabel.STATIC


def test_empty_stack_rejected():
    with pytest.raises(PreconditionError):
        segment_residual(stack_of(np.zeros((0, 2, 2))), P)


def test_params_validation():
    with pytest.raises(ValidationError):
        HeuristicParams(threshold=0)
    with pytest.raises(ValidationError):
        HeuristicParams(min_region_size=0)


@pytest.mark.parametrize("tau", [0.02, 0.05, 0.1, 0.2, 0.4])
def test_residual_iou_matches_grid_oracle(crossing, tau):
    counts, oracle = ConfusionCounts(), ConfusionCounts()
    for t in range(1, len(crossing), 3):
        cur, stack, truth = frame_stack(crossing, t)
        pred = segment_residual(stack, HeuristicParams(threshold=tau))
        v = cur.valid
        counts = accumulate(counts, pred[v], truth[v])
        # direct count over the raw residual grid
        p = stack.residuals[0][v] > tau
        gt = truth[v]
        m = gt != MovingLabel.IGNORE
        tp = int((p & (gt == 1) & m).sum())
        fp = int((p & (gt == 0) & m).sum())
        fn = int((~p & (gt == 1) & m).sum())
        oracle = oracle + ConfusionCounts(tp, fp, fn, int(m.sum()) - tp - fp - fn)
    assert counts == oracle
    assert iou(counts) == iou(oracle)


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 1.0), st.floats(0.01, 1.0))
@settings(max_examples=40, deadline=None)
def test_monotone_in_tau(seed, a, b):
    rng = np.random.default_rng(seed)
    stack = stack_of(rng.exponential(0.2, size=(2, 8, 16)))
    lo, hi = sorted((a, b))
    m_lo = segment_residual(stack, HeuristicParams(threshold=lo)) == MovingLabel.MOVING
    m_hi = segment_residual(stack, HeuristicParams(threshold=hi)) == MovingLabel.MOVING
    assert not (m_hi & ~m_lo).any()


def test_free_space_examples(approaching):
    cur = project_scan(approaching.frames[5].scan, approaching.spec.sensor)
    r = cur.range
    cand = cur.valid.copy()
    assert not free_space_check(cur, r.copy(), cand, 0.5).any()
    # one candidate with r_current = 10, r_past = 15
    past = np.full(r.shape, -1, np.float32)
    cur_r = r.copy()
    v, u = np.argwhere(cur.valid)[0]
    past[v, u] = cur_r[v, u] + 5.0
    kept = free_space_check(cur, past, cand, 0.5)
    assert kept[v, u] and kept.sum() == 1


def test_free_space_on_approaching_box(approaching):
    cur, stack, truth = frame_stack(approaching, 10)
    cand = candidate_mask(stack, cur.valid, P)
    kept = free_space_check(cur, stack.past_ranges[0], cand, P.free_space_margin)
    face = truth == MovingLabel.MOVING
    assert kept.any() and not (kept & ~face).any()
    assert kept.sum() >= 0.9 * (cand & face).sum()


@pytest.mark.parametrize("t", [3, 9, 15])
def test_free_space_drops_static_candidates(crossing, t):
    # the moving sensor leaves residual candidates on static structure
    cur, stack, truth = frame_stack(crossing, t)
    cand = candidate_mask(stack, cur.valid, P)
    kept = free_space_check(cur, stack.past_ranges[0], cand, P.free_space_margin)
    static = truth == MovingLabel.STATIC
    assert (cand & static).any() and not (kept & static).any()


def test_region_grow_empty_seeds():
    r = np.ones((4, 8), np.float32)
    assert not grow_regions(np.zeros((4, 8), bool), r, r > 0, 0.5, 1).any()


def test_region_grow_fills_uniform_patch():
    r = np.full((9, 9), -1, np.float32)
    r[2:7, 2:7] = 10.0
    seeds = np.zeros((9, 9), bool)
    seeds[4, 4] = True
    out = grow_regions(seeds, r, r > 0, 1.0, 1)
    assert out.sum() == 25 and out[2:7, 2:7].all()


def test_region_grow_wraps_azimuth():
    r = np.full((3, 10), 50.0, np.float32)
    r[1, 0] = r[1, 9] = 5.0
    seeds = np.zeros((3, 10), bool)
    seeds[1, 0] = True
    out = grow_regions(seeds, r, r > 0, 0.5, 2)
    assert out[1, 9] and out.sum() == 2


def test_region_grow_min_size():
    r = np.full((4, 4), 3.0, np.float32)
    seeds = np.zeros((4, 4), bool)
    seeds[0, 0] = True
    assert not grow_regions(seeds, r, r > 0, 1.0, 17).any()
    assert grow_regions(seeds, r, r > 0, 1.0, 16).all()


@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
@settings(max_examples=40, deadline=None)
def test_region_grow_matches_bfs(seed, min_size):
    rng = np.random.default_rng(seed)
    r = rng.uniform(1, 4, (12, 20)).astype(np.float32)
    valid = rng.random((12, 20)) > 0.15
    seeds = rng.random((12, 20)) > 0.93
    out = grow_regions(seeds, r, valid, 0.6, min_size)
    assert np.array_equal(out, bfs_grow(seeds, r, valid, 0.6, min_size))
    assert not (out & ~valid).any()
    # a valid seed is dropped only together with its whole (small) region
    lost = seeds & valid & ~out
    assert not (bfs_grow(lost, r, valid, 0.6, 1) & out).any()


def test_rg_within_closure_of_candidates(crossing):
    cur, stack, _ = frame_stack(crossing, 9)
    rg = residual_rg(cur, stack, P) == MovingLabel.MOVING
    cand = candidate_mask(stack, cur.valid, P)
    closure = region_grow(cand, cur, P.grow_tolerance, P.min_region_size) == MovingLabel.MOVING
    assert rg.any() and not (rg & ~closure).any()
