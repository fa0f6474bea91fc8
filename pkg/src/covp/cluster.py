"""Fixed-radius BEV clustering via grid hashing + union-find."""

from __future__ import annotations

import math

import numpy as np


class _UnionFind:
    def __init__(self, n: int):
        self.parent = np.arange(n)

    def find(self, i: int) -> int:
        p = self.parent
        root = i
        while p[root] != root:
            root = p[root]
        while p[i] != root:  # path compression
            p[i], i = root, p[i]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


# Cells are radius/sqrt(2) wide, so a link of length `radius` can span at
# most two cells per axis; one offset per unordered pair of nearby cells.
_NEIGHBOR_OFFSETS = tuple(
    (dx, dy)
    for dx in range(-2, 3)
    for dy in range(-2, 3)
    if dx > 0 or (dx == 0 and dy > 0)
)


def fixed_radius_clusters(
    xy: np.ndarray, radius: float, min_size: int = 1
) -> list[np.ndarray]:
    """Group points whose mutual distance chains stay within `radius`.

    Returns index arrays, one per cluster of at least `min_size` points,
    ordered by first point index for determinism.
    """
    xy = np.asarray(xy, dtype=float)
    n = len(xy)
    if n == 0:
        return []
    # cell diagonal == radius, so points sharing a cell are already linked
    cell = np.floor(xy * (math.sqrt(2.0) / radius)).astype(np.int64)
    buckets: dict[tuple[int, int], list[int]] = {}
    for i, (cx, cy) in enumerate(cell):
        buckets.setdefault((int(cx), int(cy)), []).append(i)
    uf = _UnionFind(n)
    for members in buckets.values():
        uf.parent[members] = members[0]
    r2 = radius * radius
    arrs = {key: xy[m] for key, m in buckets.items()}
    for (cx, cy), members in buckets.items():
        a = arrs[(cx, cy)]
        for dx, dy in _NEIGHBOR_OFFSETS:
            other = buckets.get((cx + dx, cy + dy))
            if other is None or uf.find(members[0]) == uf.find(other[0]):
                continue
            b = arrs[(cx + dx, cy + dy)]
            d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
            if np.any(d2 <= r2):
                uf.union(members[0], other[0])
    roots = np.fromiter((uf.find(i) for i in range(n)), dtype=np.int64, count=n)
    order = np.argsort(roots, kind="stable")
    sorted_roots = roots[order]
    out = []
    start = 0
    for k in range(1, n + 1):
        if k == n or sorted_roots[k] != sorted_roots[start]:
            idx = np.sort(order[start:k])
            if len(idx) >= min_size:
                out.append(idx)
            start = k
    out.sort(key=lambda a: int(a[0]))
    return out
