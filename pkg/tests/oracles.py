"""Slow, independent reference implementations used to check the library."""
from __future__ import annotations

import itertools
import math
from collections import deque

import numpy as np


def neighbours(connectivity: int):
    offs = [d for d in itertools.product((-1, 0, 1), repeat=3) if d != (0, 0, 0)]
    if connectivity == 6:
        offs = [d for d in offs if sum(map(abs, d)) == 1]
    return offs


def bfs_components(mask: np.ndarray, connectivity: int = 26) -> list[set]:
    """Components as voxel sets, ordered by their first voxel in x-fastest scan order."""
    seen = np.zeros(mask.shape, dtype=bool)
    comps = []
    nx, ny, nz = mask.shape
    offs = neighbours(connectivity)
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                if not mask[i, j, k] or seen[i, j, k]:
                    continue
                comp = set()
                q = deque([(i, j, k)])
                seen[i, j, k] = True
                while q:
                    p = q.popleft()
                    comp.add(p)
                    for d in offs:
                        n = (p[0] + d[0], p[1] + d[1], p[2] + d[2])
                        if all(0 <= n[a] < mask.shape[a] for a in range(3)) and mask[n] and not seen[n]:
                            seen[n] = True
                            q.append(n)
                comps.append(comp)
    return comps


def trilinear(arr: np.ndarray, p) -> float:
    """Trilinear value at fractional index ``p`` with edge clamping."""
    p = [min(max(float(x), 0.0), n - 1) for x, n in zip(p, arr.shape)]
    base = [min(int(math.floor(x)), n - 2) if n > 1 else 0 for x, n in zip(p, arr.shape)]
    total = 0.0
    for corner in itertools.product((0, 1), repeat=3):
        w = 1.0
        idx = []
        for a in range(3):
            if arr.shape[a] == 1:
                idx.append(0)
                w *= 1.0 if corner[a] == 0 else 0.0
                continue
            f = p[a] - base[a]
            w *= f if corner[a] else 1.0 - f
            idx.append(base[a] + corner[a])
        total += w * float(arr[tuple(idx)])
    return total


def mtv(label: np.ndarray, voxel_ml: float) -> float:
    n = 0
    for v in label.ravel():
        if v > 0:
            n += 1
    return n * voxel_ml


def tlg(label: np.ndarray, suv: np.ndarray, voxel_ml: float) -> float:
    sums, counts = {}, {}
    for idx in zip(*np.nonzero(label)):
        lid = int(label[idx])
        sums[lid] = sums.get(lid, 0.0) + float(suv[idx])
        counts[lid] = counts.get(lid, 0) + 1
    return sum(counts[k] * voxel_ml * (sums[k] / counts[k]) for k in sums)


def dice(a: np.ndarray, b: np.ndarray) -> float:
    inter = sa = sb = 0
    for x, y in zip(a.ravel(), b.ravel()):
        inter += bool(x) and bool(y)
        sa += bool(x)
        sb += bool(y)
    return 1.0 if sa + sb == 0 else 2.0 * inter / (sa + sb)


def unmatched_volume(src: np.ndarray, other: np.ndarray, voxel_ml: float, connectivity: int = 26) -> float:
    total = 0
    for comp in bfs_components(src.astype(bool), connectivity):
        if not any(other[p] for p in comp):
            total += len(comp)
    return total * voxel_ml


def dmax_centroid(centroids) -> float:
    best = 0.0
    for a in centroids:
        for b in centroids:
            best = max(best, math.dist(a, b))
    return best


def dmax_voxel(points) -> float:
    best = 0.0
    pts = [tuple(p) for p in points]
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            best = max(best, math.dist(pts[i], pts[j]))
    return best


def average_ranks(x) -> list[float]:
    order = sorted(range(len(x)), key=lambda i: x[i])
    ranks = [0.0] * len(x)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and x[order[j + 1]] == x[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    rx, ry = average_ranks(list(x)), average_ranks(list(y))
    n = len(rx)
    mx, my = sum(rx) / n, sum(ry) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    sxx = sum((a - mx) ** 2 for a in rx)
    syy = sum((b - my) ** 2 for b in ry)
    if sxx == 0 or syy == 0:
        return float("nan")
    return sxy / math.sqrt(sxx * syy)


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` (float64, perturbing one entry at a time)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))
