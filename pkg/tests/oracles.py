"""Independent reference implementations used as test oracles."""
from __future__ import annotations

import math
import sys
from contextlib import contextmanager

import numpy as np

NEIGHBORS = {
    4: [(-1, 0), (1, 0), (0, -1), (0, 1)],
    8: [(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1) if (di, dj) != (0, 0)],
}


@contextmanager
def _recursion_limit(n):
    old = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old, n))
    try:
        yield
    finally:
        sys.setrecursionlimit(old)


def flood_fill_labels(mask, connectivity):
    """Recursive flood fill; returns (labels, n) with labels in scan order."""
    mask = [list(map(bool, row)) for row in np.asarray(mask)]
    h = len(mask)
    w = len(mask[0]) if h else 0
    labels = [[0] * w for _ in range(h)]
    steps = NEIGHBORS[connectivity]

    def fill(i, j, k):
        labels[i][j] = k
        for di, dj in steps:
            a, b = i + di, j + dj
            if 0 <= a < h and 0 <= b < w and mask[a][b] and not labels[a][b]:
                fill(a, b, k)

    n = 0
    with _recursion_limit(h * w + 1000):
        for i in range(h):
            for j in range(w):
                if mask[i][j] and not labels[i][j]:
                    n += 1
                    fill(i, j, n)
    return np.array(labels, dtype=np.int64).reshape(h, w), n


def same_partition(a, b) -> bool:
    """Two label images describe the same components (up to renaming)."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if not np.array_equal(a == 0, b == 0):
        return False
    fwd, bwd = {}, {}
    for x, y in zip(a.tolist(), b.tolist()):
        if x == 0:
            continue
        if fwd.setdefault(x, y) != y or bwd.setdefault(y, x) != x:
            return False
    return True


def brute_standardize(vectors):
    """Column standardization with the n-1 divisor, constant columns to 0."""
    rows = [list(map(float, v)) for v in vectors]
    n, t = len(rows), len(rows[0])
    out = [[0.0] * t for _ in range(n)]
    for k in range(t):
        col = [r[k] for r in rows]
        mu = math.fsum(col) / n
        var = math.fsum((c - mu) ** 2 for c in col) / (n - 1) if n > 1 else 0.0
        if all(c == col[0] for c in col) or var == 0:
            continue
        sd = math.sqrt(var)
        for i in range(n):
            out[i][k] = (col[i] - mu) / sd
    return out


def brute_predict(features, labels, x, eta):
    """Kernel prediction from first principles with mpmath-free float math."""
    z = brute_standardize(list(features) + [x])
    test = z[-1]
    dist = [math.fsum((a - b) ** 2 for a, b in zip(row, test)) for row in z[:-1]]
    m = min(dist)
    w = [math.exp(-(d - m) / eta) for d in dist]
    s = math.fsum(w)
    return math.fsum(wi / s * y for wi, y in zip(w, labels))


def greedy_match(labels, n_objects, reference_masks):
    """TP and FP by greedy one-to-one matching on decreasing overlap."""
    labels = np.asarray(labels)
    pairs = []
    for r, ref in enumerate(reference_masks):
        counts = {}
        for o in labels[np.asarray(ref, bool)].tolist():
            if o:
                counts[o] = counts.get(o, 0) + 1
        pairs += [(-c, o, r) for o, c in counts.items()]
    used_o, used_r = set(), set()
    for _, o, r in sorted(pairs):
        if o not in used_o and r not in used_r:
            used_o.add(o)
            used_r.add(r)
    return len(used_o), n_objects - len(used_o)


def level_grid_optima(levels, reference_masks, connectivity, steps=20):
    """Minimum FP per TP over every threshold on the ``1 / steps`` lattice.

    ``levels`` holds integer channel values; a pixel passes threshold level
    ``j`` iff every channel level is <= ``j``. Returns ``{tp: min_fp}``.
    """
    levels = np.asarray(levels)
    seen = {}
    best = {}
    axis = range(steps + 1)
    for a in axis:
        for b in axis:
            for c in axis:
                mask = np.all(levels <= np.array([a, b, c]), axis=2)
                key = mask.tobytes()
                if key not in seen:
                    labels, n = flood_fill_labels(mask, connectivity)
                    seen[key] = greedy_match(labels, n, reference_masks)
                tp, fp = seen[key]
                if tp not in best or fp < best[tp]:
                    best[tp] = fp
    return best
