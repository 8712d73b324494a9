"""Independent reference implementations used as test oracles."""

import math

import numpy as np

SAMPLES = 1000
OFFSET = 0.37


def los_point_sampling(heights, cs, tx, rx, samples=SAMPLES, offset=OFFSET):
    """Blocked-cell set from dense point samples along the segment.

    A sample blocks when it lies in a building cell other than the endpoint
    cells and the building reaches the ray height at that sample.
    """
    h, w = heights.shape

    def cell(x, y):
        return min(max(int(math.floor(y / cs)), 0), h - 1), min(max(int(math.floor(x / cs)), 0), w - 1)

    start, end = cell(tx[0], tx[1]), cell(rx[0], rx[1])
    blocked = set()
    for k in range(samples):
        t = (k + offset) / samples
        x = tx[0] + t * (rx[0] - tx[0])
        y = tx[1] + t * (rx[1] - tx[1])
        z = tx[2] + t * (rx[2] - tx[2])
        c = cell(x, y)
        if c in (start, end):
            continue
        hb = heights[c]
        if hb > 0 and hb >= z:
            blocked.add(c)
    return blocked


def reference_init_fill(Gs, Ms, Ma, floor_value=-140.0, max_iter=None):
    """Plain-loop Jacobi sweeps of the 8-neighbor mean over accessible cells."""
    Gs = np.asarray(Gs, float)
    Ms = np.asarray(Ms) > 0.5
    Ma = np.asarray(Ma) > 0.5
    h, w = Gs.shape
    obs = Ms & Ma
    val = np.where(obs, Gs, 0.0)
    known = obs.copy()
    sweeps = 4 * max(h, w) if max_iter is None else max_iter
    offsets = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
    for _ in range(sweeps):
        new_val = val.copy()
        new_known = known.copy()
        changed = False
        for i in range(h):
            for j in range(w):
                if known[i, j] or not Ma[i, j]:
                    continue
                s = 0.0
                n = 0
                for di, dj in offsets:
                    a, b = i + di, j + dj
                    if 0 <= a < h and 0 <= b < w and known[a, b] and Ma[a, b]:
                        s += val[a, b]
                        n += 1
                if n:
                    new_val[i, j] = s / n
                    new_known[i, j] = True
                    changed = True
        val, known = new_val, new_known
        if not changed:
            break
    left = Ma & ~known
    if left.any():
        val[left] = Gs[obs].mean()
    return np.where(Ma, val, floor_value)


def topk_full_sort(U, Ma, M_t, K):
    """Sort every candidate by (-score, flat index) and keep the first K."""
    U = np.asarray(U, float).ravel()
    cand = [k for k in range(U.size) if np.asarray(Ma).ravel()[k] > 0.5 and not np.asarray(M_t).ravel()[k] > 0.5]
    cand.sort(key=lambda k: (-U[k], k))
    return sorted(cand[:K])


def tree_bytes(root):
    """Relative path -> file bytes for every file under ``root``."""
    import os

    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = os.path.join(dirpath, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out
