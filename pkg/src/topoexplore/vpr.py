"""Place recognition: sector descriptors, K-means codebook, VLAD and an exact ball tree."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .gridworld import MAX_RANGE, MISS_TEXTURE, N_TEXTURES, Observation

N_SECTORS = 12
SECTOR_RAYS = 6
DESC_DIM = 3 + N_TEXTURES


class StructureError(ValueError):
    pass


def sector_descriptors(obs: Observation) -> np.ndarray:
    """(12, 11) local descriptors over world-aligned sectors of 6 rays.

    Each row is [mean, min, max] depth / 5 followed by the texture histogram
    of the sector's wall hits (misses excluded), normalised to sum to one.
    """
    d = np.asarray(obs.depths, dtype=np.float64).reshape(N_SECTORS, SECTOR_RAYS) / MAX_RANGE
    t = np.asarray(obs.textures).reshape(N_SECTORS, SECTOR_RAYS)
    out = np.zeros((N_SECTORS, DESC_DIM))
    out[:, 0] = d.mean(axis=1)
    out[:, 1] = d.min(axis=1)
    out[:, 2] = d.max(axis=1)
    for s in range(N_SECTORS):
        hits = t[s][t[s] != MISS_TEXTURE]
        if hits.size:
            out[s, 3:] = np.bincount(hits, minlength=N_TEXTURES) / hits.size
    return out


# -------------------------------------------------------------------- K-means


@dataclass
class KMeansResult:
    centroids: np.ndarray
    objective: list  # after each assignment step
    labels: np.ndarray


def _sq_dists(x, c):
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=-1)


def _plus_plus(uniq, k, rng):
    chosen = [int(rng.integers(len(uniq)))]
    d2 = _sq_dists(uniq, uniq[chosen[0]][None])[:, 0]
    for _ in range(1, k):
        # distinct rows all have d2 > 0 until picked
        nxt = int(rng.choice(len(uniq), p=d2 / d2.sum()))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(uniq, uniq[nxt][None])[:, 0])
    return uniq[chosen].copy()


def kmeans_fit(descs, k: int = 16, iters: int = 25, seed: int = 0) -> KMeansResult:
    """Lloyd's algorithm from k distinct seeded samples.

    The samples are drawn by D-squared weighting (k-means++), so planted
    well-separated clusters each receive a seed.  A cluster that loses all
    its points is re-seeded at the point farthest from its current centroid,
    which can only lower the objective.
    """
    x = np.asarray(descs, dtype=np.float64)
    uniq = np.unique(x, axis=0)
    if len(uniq) < k:
        raise StructureError(f"need at least {k} distinct descriptors, got {len(uniq)}")
    rng = np.random.default_rng(seed)
    centroids = _plus_plus(uniq, k, rng)
    d2 = _sq_dists(x, centroids)
    labels = d2.argmin(axis=1)
    objective = [float(d2[np.arange(len(x)), labels].sum())]
    for _ in range(iters):
        for j in range(k):
            members = labels == j
            if members.any():
                centroids[j] = x[members].mean(axis=0)
        cost = _sq_dists(x, centroids)[np.arange(len(x)), labels]
        for j in range(k):
            if not (labels == j).any():
                far = int(np.argmax(cost))
                centroids[j] = x[far]
                labels[far] = j
                cost[far] = 0.0
        d2 = _sq_dists(x, centroids)
        new = d2.argmin(axis=1)
        objective.append(float(d2[np.arange(len(x)), new].sum()))
        if np.array_equal(new, labels):
            break
        labels = new
    return KMeansResult(centroids, objective, labels)


# ----------------------------------------------------------------------- VLAD


class VLADDescriptor(NamedTuple):
    values: np.ndarray
    zero: bool


def vlad_encode(descs, centroids) -> VLADDescriptor:
    x = np.asarray(descs, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise StructureError("non-empty descriptor set required")
    nearest = _sq_dists(x, c).argmin(axis=1)
    v = np.zeros_like(c)
    np.add.at(v, nearest, x - c[nearest])
    v = v.reshape(-1)
    norm = np.sqrt(v @ v)
    if norm == 0.0:
        return VLADDescriptor(v, True)
    return VLADDescriptor(v / norm, False)


def observation_vlad(obs: Observation, centroids) -> np.ndarray:
    return vlad_encode(sector_descriptors(obs), centroids).values


# ------------------------------------------------------------------- ball tree


def _dist(points, q):
    diff = points - q
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


@dataclass
class BallTree:
    """Exact nearest-neighbour index over Euclidean space.

    Nodes are stored in flat lists; a leaf holds at most ``leaf_size`` ids.
    ``visits`` counts point-distance evaluations of the last query.
    """

    points: np.ndarray
    leaf_size: int = 60
    centers: list = field(default_factory=list)
    radii: list = field(default_factory=list)
    children: list = field(default_factory=list)  # (left, right) or None
    members: list = field(default_factory=list)  # id array for leaves
    min_ids: list = field(default_factory=list)  # smallest id under each node
    visits: int = 0

    def __len__(self):
        return len(self.points)

    def _add(self, ids) -> int:
        pts = self.points[ids]
        center = pts.mean(axis=0)
        node = len(self.centers)
        self.centers.append(center)
        self.radii.append(float(_dist(pts, center).max()))
        self.min_ids.append(int(ids.min()))
        self.children.append(None)
        self.members.append(ids)
        if len(ids) > self.leaf_size:
            spread = pts.max(axis=0) - pts.min(axis=0)
            dim = int(np.argmax(spread))
            order = ids[np.argsort(pts[:, dim], kind="stable")]
            half = len(order) // 2
            left = self._add(order[:half])
            right = self._add(order[half:])
            self.children[node] = (left, right)
            self.members[node] = None
        return node

    def query(self, q, n: int = 5):
        """n nearest (id, distance) pairs in ascending (distance, id) order."""
        q = np.asarray(q, dtype=np.float64)
        if not 1 <= n <= len(self.points):
            raise ValueError("n must lie in [1, point count]")
        self.visits = 0
        best_d = np.empty(0)
        best_i = np.empty(0, dtype=np.int64)
        todo = [(0.0, 0)]

        def hopeless(bound, node):
            # a node can only help if it may hold a smaller distance, or an
            # equal distance under a lower id (ties resolve by id)
            if len(best_d) < n:
                return False
            kd, ki = best_d[-1], best_i[-1]
            return bound > kd or (bound == kd and self.min_ids[node] > ki)

        while todo:
            bound, node = heapq.heappop(todo)
            if len(best_d) == n and bound > best_d[-1]:
                break
            if hopeless(bound, node):
                continue
            kids = self.children[node]
            if kids is None:
                ids = self.members[node]
                self.visits += len(ids)
                d = np.concatenate([best_d, _dist(self.points[ids], q)])
                i = np.concatenate([best_i, ids])
                keep = np.lexsort((i, d))[:n]
                best_d, best_i = d[keep], i[keep]
                continue
            for child in kids:
                gap = float(np.sqrt(np.sum((q - self.centers[child]) ** 2))) - self.radii[child]
                # small slack guards the bound against rounding
                bound = max(gap - 1e-12, 0.0)
                if not hopeless(bound, child):
                    heapq.heappush(todo, (bound, child))
        return [(int(i), float(d)) for i, d in zip(best_i, best_d)]


def ball_tree_build(vlads, leaf: int = 60) -> BallTree:
    pts = np.asarray(vlads, dtype=np.float64)
    if pts.ndim != 2 or len(pts) == 0:
        raise StructureError("at least one descriptor required")
    tree = BallTree(pts, leaf)
    tree._add(np.arange(len(pts)))
    return tree


def ball_tree_query(tree: BallTree, v, n: int = 5):
    return tree.query(v, n)


def linear_scan(points, q, n: int = 5):
    pts = np.asarray(points, dtype=np.float64)
    d = _dist(pts, np.asarray(q, dtype=np.float64))
    order = np.lexsort((np.arange(len(pts)), d))[:n]
    return [(int(i), float(d[i])) for i in order]


__all__ = [
    "StructureError",
    "sector_descriptors",
    "KMeansResult",
    "kmeans_fit",
    "VLADDescriptor",
    "vlad_encode",
    "observation_vlad",
    "BallTree",
    "ball_tree_build",
    "ball_tree_query",
    "linear_scan",
]
