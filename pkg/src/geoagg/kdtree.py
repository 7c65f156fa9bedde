"""Planar k-d tree with exact k-nearest-neighbour queries.

The tree is built by median splits on alternating axes, so it is balanced for
any input.  Distance ties break towards the smaller point id, which makes
query results (and everything cached from them) fully deterministic.  A query
counter records how many searches were executed; the caching layer uses it to
prove that precomputed neighbourhoods never fall back to live searches.
"""

from __future__ import annotations

import heapq

import numpy as np

from .autodiff import ContractError

__all__ = ["KdTree"]


class _Node:
    __slots__ = ("point", "pid", "axis", "left", "right")

    def __init__(self, point, pid, axis, left, right):
        self.point = point
        self.pid = pid
        self.axis = axis
        self.left = left
        self.right = right


class KdTree:
    """Static 2-D tree over ``(u, v)`` points with integer ids."""

    def __init__(self, coords, ids):
        coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        if coords.shape[0] == 0:
            raise ContractError("cannot build a k-d tree over an empty pool")
        if coords.shape[0] != ids.shape[0]:
            raise ContractError("coords and ids disagree in length")
        if not np.isfinite(coords).all():
            raise ContractError("coordinates must be finite")
        self.size = coords.shape[0]
        self.query_count = 0
        self._root = self._build(coords, ids, np.arange(self.size), 0)

    def _build(self, coords, ids, idx, depth):
        if idx.size == 0:
            return None
        axis = depth % 2
        order = np.lexsort((ids[idx], coords[idx, axis]))
        idx = idx[order]
        mid = idx.size // 2
        i = idx[mid]
        return _Node(
            coords[i].copy(),
            int(ids[i]),
            axis,
            self._build(coords, ids, idx[:mid], depth + 1),
            self._build(coords, ids, idx[mid + 1:], depth + 1),
        )

    def reset_query_count(self) -> None:
        self.query_count = 0

    def knn(self, point, k: int) -> list[tuple[int, float]]:
        """The ``k`` nearest points as ``(id, squared distance)``, ascending.

        Ordering is by ``(squared distance, id)``; asking for more points than
        the tree holds returns the whole pool.
        """
        if k < 1:
            raise ContractError(f"k must be at least 1, got {k}")
        self.query_count += 1
        pu, pv = float(point[0]), float(point[1])
        k = min(k, self.size)
        # max-heap of the current best k, keyed worst-first by (d2, id)
        heap: list[tuple[float, int]] = []

        def visit(node):
            if node is None:
                return
            du = pu - node.point[0]
            dv = pv - node.point[1]
            d2 = du * du + dv * dv
            if len(heap) < k:
                heapq.heappush(heap, (-d2, -node.pid))
            else:
                wd2, wid = -heap[0][0], -heap[0][1]
                if d2 < wd2 or (d2 == wd2 and node.pid < wid):
                    heapq.heapreplace(heap, (-d2, -node.pid))
            gap = du if node.axis == 0 else dv
            near, far = (node.left, node.right) if gap < 0 else (node.right, node.left)
            visit(near)
            # equality must still descend: an equally distant point with a
            # smaller id may live on the far side
            if len(heap) < k or gap * gap <= -heap[0][0]:
                visit(far)

        visit(self._root)
        out = sorted((-nd2, -nid) for nd2, nid in heap)
        return [(pid, d2) for d2, pid in out]
