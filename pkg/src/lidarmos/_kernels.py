"""Compiled scatter/gather loops used on the per-scan hot path."""
import numba
import numpy as np


@numba.njit(cache=True)
def scatter_nearest(ui, vi, keep, r, h, w):
    # strict < keeps the lowest point index on equal ranges
    best = np.full(h * w, np.inf)
    winner = np.full(h * w, -1, dtype=np.int64)
    for i in range(r.shape[0]):
        if keep[i]:
            p = vi[i] * w + ui[i]
            if r[i] < best[p]:
                best[p] = r[i]
                winner[p] = i
    return winner


@numba.njit(cache=True)
def scatter_min_range(ui, vi, keep, r, h, w):
    best = np.full(h * w, np.inf)
    for i in range(r.shape[0]):
        if keep[i]:
            p = vi[i] * w + ui[i]
            if r[i] < best[p]:
                best[p] = r[i]
    for p in range(h * w):
        if best[p] == np.inf:
            best[p] = -1.0
    return best


@numba.njit(cache=True)
def gather_image(winner, pts, rem, r):
    n = winner.shape[0]
    rng = np.full(n, -1.0, dtype=np.float32)
    xyz = np.zeros((n, 3))
    out_rem = np.zeros(n, dtype=np.float32)
    for p in range(n):
        i = winner[p]
        if i >= 0:
            rng[p] = r[i]
            xyz[p, 0] = pts[i, 0]
            xyz[p, 1] = pts[i, 1]
            xyz[p, 2] = pts[i, 2]
            out_rem[p] = rem[i]
    return rng, xyz, out_rem


@numba.njit(cache=True)
def knn_vote(pu, pv, r_self, self_idx, raw, img_r, img_idx, k, window, cutoff):
    h, w = img_r.shape
    half = window // 2
    n = pu.shape[0]
    out = raw.copy()
    best_d = np.empty(k + 1)
    best_l = np.empty(k + 1, dtype=np.int64)
    for i in range(n):
        u = pu[i]
        if u < 0:
            continue
        v = pv[i]
        own = raw[self_idx[i]]
        # unanimous window: the vote cannot change the label
        mixed = False
        for dv in range(-half, half + 1):
            vv = v + dv
            if vv < 0 or vv >= h:
                continue
            for du in range(-half, half + 1):
                j = img_idx[vv, (u + du) % w]
                if j >= 0 and raw[j] != own:
                    mixed = True
                    break
            if mixed:
                break
        if not mixed:
            continue
        # slot 0: the point itself at distance 0
        m = 1
        best_d[0] = 0.0
        best_l[0] = own
        for dv in range(-half, half + 1):
            vv = v + dv
            if vv < 0 or vv >= h:
                continue
            for du in range(-half, half + 1):
                uu = (u + du) % w
                j = img_idx[vv, uu]
                if j < 0 or j == self_idx[i]:
                    continue
                d = abs(img_r[vv, uu] - r_self[i])
                if d > cutoff:
                    continue
                if m == k and d >= best_d[k - 1]:
                    continue
                # insert after any equal distances (earlier candidates win ties)
                pos = m if m < k else k - 1
                while pos > 0 and best_d[pos - 1] > d:
                    pos -= 1
                last = m if m < k else k - 1
                for q in range(last, pos, -1):
                    best_d[q] = best_d[q - 1]
                    best_l[q] = best_l[q - 1]
                best_d[pos] = d
                best_l[pos] = raw[j]
                if m < k:
                    m += 1
        c0 = 0
        c1 = 0
        c2 = 0
        for q in range(m):
            lab = best_l[q]
            if lab == 0:
                c0 += 1
            elif lab == 1:
                c1 += 1
            else:
                c2 += 1
        top = max(c0, max(c1, c2))
        ties = (c0 == top) + (c1 == top) + (c2 == top)
        if ties == 1:
            if c0 == top:
                out[self_idx[i]] = 0
            elif c1 == top:
                out[self_idx[i]] = 1
            else:
                out[self_idx[i]] = 2
    return out
