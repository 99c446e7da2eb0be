"""Keypoint extraction from activation maps.

Pipeline per keypoint channel: threshold the map into a pixel set, grow
clusters by repeatedly absorbing points within Euclidean distance M of a
member (equivalently: connected components of the distance-M graph,
single linkage), keep the largest cluster, and report its centroid. The
skeleton channel is returned as a binary mask, not a keypoint.

The default M = 1 makes clusters exactly 4-connected pixel components,
since diagonal neighbors sit at distance sqrt(2) > 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractViolation

__all__ = [
    "Cluster",
    "binarize",
    "expansion_cluster",
    "select_keypoint",
    "extract_keypoints",
    "predictions_to_json",
]

DEFAULT_THRESHOLD = 0.5
DEFAULT_M = 1.0


@dataclass(frozen=True)
class Cluster:
    """A group of pixels plus the arithmetic mean of their coordinates."""

    points: np.ndarray   # (k, 2) int array of (x, y)
    centroid: tuple      # (x, y) floats

    @property
    def size(self) -> int:
        return len(self.points)


def binarize(activation, threshold: float) -> np.ndarray:
    """Pixels with activation >= threshold, as an (n, 2) array of (x, y)."""
    if not 0.0 < threshold < 1.0:
        raise ContractViolation(f"threshold must be in (0, 1), got {threshold}")
    activation = np.asarray(activation)
    if activation.ndim != 2:
        raise ContractViolation(f"expected a 2-D map, got shape {activation.shape}")
    ys, xs = np.nonzero(activation >= threshold)
    return np.column_stack((xs, ys)).astype(np.int32)


class _DisjointSet:
    """Union-find with path compression and union by size."""

    def __init__(self, n: int):
        self.parent = np.arange(n, dtype=np.intp)
        self.size = np.ones(n, dtype=np.intp)

    def find(self, i: int) -> int:
        parent = self.parent
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    def union(self, a: int, b: int):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]


def expansion_cluster(points, m: float):
    """Partition points into groups chained by pairwise distance <= m.

    Two points belong to the same cluster iff they are connected through a
    chain of points with consecutive Euclidean distances at most ``m``
    (single-linkage connected components, realized as union-find over a
    k-d-tree neighbor search). Returns clusters with centroids; empty input
    yields an empty list. The result is independent of point order.
    """
    if m <= 0:
        raise ContractViolation(f"distance M must be positive, got {m}")
    raw = np.asarray(points).reshape(-1, 2)
    pts = raw.astype(np.float64)
    n = len(pts)
    if n == 0:
        return []
    dsu = _DisjointSet(n)
    tree = cKDTree(pts)
    for i, j in tree.query_pairs(m, output_type="ndarray"):
        dsu.union(int(i), int(j))
    roots = np.fromiter((dsu.find(i) for i in range(n)), dtype=np.intp, count=n)
    clusters = []
    for root in np.unique(roots):
        members = raw[roots == root]
        cx, cy = pts[roots == root].mean(axis=0)
        clusters.append(Cluster(members, (float(cx), float(cy))))
    return clusters


def select_keypoint(clusters):
    """Centroid of the largest cluster, or None when there are no clusters.

    Equal-sized candidates resolve to the lexicographically smaller
    (centroid y, centroid x), keeping selection deterministic.
    """
    if not clusters:
        return None
    best = min(clusters, key=lambda c: (-c.size, c.centroid[1], c.centroid[0]))
    return best.centroid


def extract_keypoints(output, threshold: float = DEFAULT_THRESHOLD,
                      m: float = DEFAULT_M):
    """Detect the 8 keypoints in a (9, H, W) activation stack.

    Channels 0-7 run binarize -> expansion_cluster -> select_keypoint;
    entries are (x, y) tuples or None for channels with no active pixels.
    The skeleton channel 8 is returned alongside as a boolean mask.
    """
    output = np.asarray(output)
    if output.ndim != 3 or output.shape[0] != 9:
        raise ContractViolation(f"expected (9, H, W) output, got {output.shape}")
    keypoints = []
    for c in range(8):
        clusters = expansion_cluster(binarize(output[c], threshold), m)
        keypoints.append(select_keypoint(clusters))
    skeleton = output[8] >= threshold
    return keypoints, skeleton


def predictions_to_json(keypoints) -> list:
    """JSON-ready form: per keypoint {x, y, detected}."""
    out = []
    for kp in keypoints:
        if kp is None:
            out.append({"x": None, "y": None, "detected": False})
        else:
            out.append({"x": kp[0], "y": kp[1], "detected": True})
    return out
