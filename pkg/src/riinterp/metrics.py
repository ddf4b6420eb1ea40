"""Symmetric nearest-neighbor RMSE between point clouds."""
from __future__ import annotations

import math

import numpy as np
from scipy.spatial import cKDTree

from .projection import PointCloud


def _xyz(cloud) -> np.ndarray:
    xyz = cloud.xyz if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)[:, :3]
    return np.ascontiguousarray(xyz, dtype=np.float64)


class KdTree:
    """Median-split 3-d tree over a cloud's coordinates (intensity ignored)."""

    def __init__(self, cloud):
        pts = _xyz(cloud)
        if len(pts) == 0:
            raise ValueError("cannot build a k-d tree over an empty cloud")
        self.points = pts
        self._tree = cKDTree(pts, balanced_tree=True, compact_nodes=True)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Distances and indices of the nearest stored point for each query row."""
        q = _xyz(queries)
        dist, idx = self._tree.query(q, k=1)
        return dist, idx


def build(cloud) -> KdTree:
    return KdTree(cloud)


def mse_directed(p, q_tree: KdTree) -> float:
    """Mean squared distance from each point of ``p`` to its nearest neighbor in the tree."""
    pts = _xyz(p)
    if len(pts) == 0:
        raise ValueError("directed MSE needs a nonempty source cloud")
    _, idx = q_tree.query(pts)
    # distances recomputed from coordinates so the value does not depend on tree internals
    d2 = np.sum((pts - q_tree.points[idx]) ** 2, axis=1)
    return float(math.fsum(d2) / len(pts))


def snnrmse(p, q) -> float:
    """sqrt((MSE(P,Q) + MSE(Q,P)) / 2), in meters."""
    tp, tq = KdTree(p), KdTree(q)
    a = mse_directed(tp.points, tq)
    b = mse_directed(tq.points, tp)
    # sorted pair keeps the sum order independent of argument order
    lo, hi = sorted((a, b))
    return math.sqrt((lo + hi) / 2.0)
