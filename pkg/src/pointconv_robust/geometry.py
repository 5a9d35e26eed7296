"""Point clouds, neighbor search, density compensation and subsampling.

All functions are pure: they never mutate their inputs and every random
choice is driven by an explicit seed. Ties are broken by ascending point
index everywhere, and distances are compared through the squared-distance
form ``((p - c) ** 2).sum()`` so that equal distances compare equal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "PointCloud",
    "Neighborhood",
    "NeighborTable",
    "SpatialIndex",
    "build_index",
    "knn_query",
    "knn_table",
    "epsilon_ball_query",
    "epsilon_ball_table",
    "farthest_point_sampling",
    "pc2d_subsample",
    "pc2d_indices",
    "grid_subsample",
    "estimate_normals",
    "inverse_density",
]

_NORMAL_TOL = 1e-9
# Relative slack used to turn scipy's closed-ball queries into candidate
# supersets; the exact comparison is done afterwards on squared distances.
_SLACK = 1e-9


def _frozen(a) -> np.ndarray:
    """float64 read-only view; already-frozen float64 arrays are shared, not copied."""
    if isinstance(a, np.ndarray) and a.dtype == np.float64 and not a.flags.writeable:
        return a
    out = np.array(a, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An immutable set of points with optional features and unit normals.

    Parameters
    ----------
    positions : array_like, shape (n, dim)
        Point coordinates, ``dim`` is 2 or 3.
    features : array_like, shape (n, c), optional
        Per-point feature vectors.
    normals : array_like, shape (n, 3), optional
        Per-point unit normals (3D clouds only).
    """

    positions: np.ndarray
    features: np.ndarray | None = None
    normals: np.ndarray | None = None

    def __post_init__(self):
        pos = _frozen(self.positions)
        if pos.ndim != 2 or pos.shape[1] not in (2, 3):
            raise ValueError(f"positions must have shape (n, 2) or (n, 3), got {pos.shape}")
        object.__setattr__(self, "positions", pos)
        n = pos.shape[0]

        if self.features is not None:
            feats = _frozen(self.features)
            if feats.ndim == 1:
                feats = feats[:, None]
            if feats.ndim != 2 or feats.shape[0] != n:
                raise ValueError(f"features must have one row per point ({n}), got {feats.shape}")
            object.__setattr__(self, "features", feats)

        if self.normals is not None:
            if pos.shape[1] != 3:
                raise ValueError("normals are only supported for 3D clouds")
            nrm = _frozen(self.normals)
            if nrm.shape != pos.shape:
                raise ValueError(f"normals must have shape {pos.shape}, got {nrm.shape}")
            lengths = np.linalg.norm(nrm, axis=1)
            if n and np.max(np.abs(lengths - 1.0)) > _NORMAL_TOL:
                raise ValueError("normals must have unit length")
            object.__setattr__(self, "normals", nrm)

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def __len__(self) -> int:
        return self.positions.shape[0]

    def subset(self, indices) -> "PointCloud":
        """Return the cloud restricted to ``indices`` (in that order)."""
        idx = np.asarray(indices, dtype=np.intp)
        return PointCloud(
            self.positions[idx],
            None if self.features is None else self.features[idx],
            None if self.normals is None else self.normals[idx],
        )

    def with_features(self, features) -> "PointCloud":
        return PointCloud(self.positions, features, self.normals)

    def with_normals(self, normals) -> "PointCloud":
        return PointCloud(self.positions, self.features, normals)


@dataclass(frozen=True, eq=False)
class Neighborhood:
    """Neighbors of one center point.

    ``offsets[j] == positions[neighbors[j]] - positions[center]`` and
    ``normalizer[j]`` is the density compensation weight S of that neighbor.
    ``mode`` records how the neighborhood was built (``"knn"`` or ``"eps"``).
    """

    center: int
    neighbors: np.ndarray
    offsets: np.ndarray
    normalizer: np.ndarray
    mode: str = "knn"

    def __len__(self) -> int:
        return len(self.neighbors)


@dataclass(frozen=True, eq=False)
class NeighborTable:
    """Padded neighborhoods for many centers at once.

    Rows are centers, columns neighbor slots. Padding slots carry index 0,
    ``mask`` False and a normalizer of exactly 0 so they contribute nothing to
    a weighted sum.
    """

    centers: np.ndarray  # (m,) center indices into the source cloud
    index: np.ndarray  # (m, K) neighbor indices into the source cloud
    mask: np.ndarray  # (m, K) bool
    normalizer: np.ndarray  # (m, K)
    mode: str = "knn"

    @property
    def counts(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def offsets(self, source_positions: np.ndarray, center_positions: np.ndarray | None = None) -> np.ndarray:
        """Offsets ``p_neighbor - p_center`` with zeros on padding slots."""
        if center_positions is None:
            center_positions = source_positions[self.centers]
        off = source_positions[self.index] - center_positions[:, None, :]
        off[~self.mask] = 0.0
        return off

    def row(self, i: int, source_positions: np.ndarray) -> Neighborhood:
        keep = self.mask[i]
        nbrs = self.index[i][keep]
        center = int(self.centers[i])
        return Neighborhood(
            center=center,
            neighbors=nbrs,
            offsets=source_positions[nbrs] - source_positions[center],
            normalizer=self.normalizer[i][keep],
            mode=self.mode,
        )


class SpatialIndex:
    """KD-tree over a cloud's positions.

    Query results are post-filtered with exact squared distances, so they
    match a brute-force scan exactly, ties included.
    """

    def __init__(self, cloud: PointCloud):
        if len(cloud) == 0:
            raise ValueError("empty point cloud")
        self.cloud = cloud
        self.positions = cloud.positions
        self.count = len(cloud)
        self.dim = cloud.dim
        self._tree = cKDTree(self.positions)

    def __repr__(self) -> str:
        return f"SpatialIndex(count={self.count}, dim={self.dim})"

    def sq_dists(self, point: np.ndarray, candidates: np.ndarray) -> np.ndarray:
        return ((self.positions[candidates] - point) ** 2).sum(axis=1)

    def knn_indices(self, point: np.ndarray, k: int) -> np.ndarray:
        """The ``k`` nearest points to ``point`` ordered by (distance, index)."""
        if k < 1:
            raise ValueError("k must be at least 1")
        if k > self.count:
            raise ValueError("k exceeds cloud size")
        dk, _ = self._tree.query(point, k=k)
        radius = float(np.atleast_1d(dk)[-1])
        cand = np.asarray(self._tree.query_ball_point(point, radius * (1 + _SLACK) + 1e-300), dtype=np.intp)
        d2 = self.sq_dists(point, cand)
        order = np.lexsort((cand, d2))
        return cand[order[:k]]

    def ball_indices(self, point: np.ndarray, epsilon: float) -> np.ndarray:
        """Indices with ``d(point, p) < epsilon`` in ascending index order."""
        cand = np.asarray(self._tree.query_ball_point(point, epsilon * (1 + _SLACK)), dtype=np.intp)
        d2 = self.sq_dists(point, cand)
        return np.sort(cand[d2 < epsilon * epsilon])

    def ball_indices_many(self, points: np.ndarray, radius: float) -> list:
        return self._tree.query_ball_point(points, radius * (1 + _SLACK))


def build_index(cloud: PointCloud) -> SpatialIndex:
    """Build a spatial index answering kNN and radius queries over ``cloud``."""
    return SpatialIndex(cloud)


def _check_center(index: SpatialIndex, center: int) -> int:
    center = int(center)
    if not 0 <= center < index.count:
        raise IndexError(f"center {center} out of range for cloud of size {index.count}")
    return center


def knn_query(index: SpatialIndex, center: int, k: int, include_center: bool = True) -> Neighborhood:
    """k nearest neighbors of point ``center`` (itself included by default).

    The normalizer is the KDE-based inverse density of :func:`inverse_density`.
    """
    center = _check_center(index, center)
    p = index.positions[center]
    if include_center:
        nbrs = index.knn_indices(p, k)
    else:
        if k > index.count - 1:
            raise ValueError("k exceeds cloud size")
        nbrs = index.knn_indices(p, k + 1)
        nbrs = nbrs[nbrs != center][:k]
    offsets = index.positions[nbrs] - p
    nbhd = Neighborhood(center, nbrs, offsets, np.ones(len(nbrs)), mode="knn")
    return Neighborhood(center, nbrs, offsets, inverse_density(index.cloud, nbhd), mode="knn")


def _subselect(candidates: np.ndarray, center: int, k_cap: int, seed) -> np.ndarray:
    if len(candidates) <= k_cap:
        return candidates
    others = candidates[candidates != center]
    rng = np.random.default_rng([*np.atleast_1d(seed).tolist(), center])
    picked = others[rng.choice(len(others), size=k_cap - 1, replace=False)]
    return np.sort(np.concatenate([picked, [center]]))


def epsilon_ball_query(index: SpatialIndex, center: int, epsilon: float, k_cap: int, seed=0) -> Neighborhood:
    """Points strictly within ``epsilon`` of ``center``, capped at ``k_cap``.

    When more than ``k_cap`` points qualify, ``k_cap - 1`` of them are drawn
    uniformly without replacement (seeded by ``(seed, center)``) and the
    center is always kept. Every member gets normalizer ``1 / |C|``.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if k_cap < 1:
        raise ValueError("k_cap must be at least 1")
    center = _check_center(index, center)
    p = index.positions[center]
    nbrs = _subselect(index.ball_indices(p, epsilon), center, k_cap, seed)
    return Neighborhood(
        center,
        nbrs,
        index.positions[nbrs] - p,
        np.full(len(nbrs), 1.0 / len(nbrs)),
        mode="eps",
    )


def _pack(rows: list, centers: np.ndarray, normalizers: list, mode: str) -> NeighborTable:
    width = max(len(r) for r in rows)
    m = len(rows)
    index = np.zeros((m, width), dtype=np.intp)
    mask = np.zeros((m, width), dtype=bool)
    norm = np.zeros((m, width))
    for i, (r, s) in enumerate(zip(rows, normalizers)):
        index[i, : len(r)] = r
        mask[i, : len(r)] = True
        norm[i, : len(r)] = s
    return NeighborTable(np.asarray(centers, dtype=np.intp), index, mask, norm, mode)


def knn_table(source: SpatialIndex, center_points: np.ndarray, k: int, centers=None, include_center: bool = True) -> NeighborTable:
    """kNN neighborhoods of many query points against ``source``.

    ``centers`` gives the source index of each query point (defaults to
    ``arange``); it is only used to drop the center when ``include_center``
    is False.
    """
    center_points = np.asarray(center_points, dtype=np.float64)
    if centers is None:
        centers = np.arange(len(center_points))
    kk = k if include_center else k + 1
    if kk > source.count:
        raise ValueError("k exceeds cloud size")
    dk, _ = source._tree.query(center_points, k=kk)
    radii = np.atleast_2d(dk.reshape(len(center_points), -1))[:, -1]
    rows, norms = [], []
    for q, c, r in zip(center_points, centers, radii):
        cand = np.asarray(source._tree.query_ball_point(q, r * (1 + _SLACK) + 1e-300), dtype=np.intp)
        d2 = ((source.positions[cand] - q) ** 2).sum(axis=1)
        nbrs = cand[np.lexsort((cand, d2))]
        if not include_center:
            nbrs = nbrs[nbrs != c]
        nbrs = nbrs[:k]
        rows.append(nbrs)
        norms.append(_kde_inverse_density(source, nbrs))
    return _pack(rows, centers, norms, "knn")


def epsilon_ball_table(source: SpatialIndex, center_points: np.ndarray, epsilon: float, k_cap: int, seed=0, centers=None) -> NeighborTable:
    """ε-ball neighborhoods of many query points against ``source``.

    Row ``i`` equals ``epsilon_ball_query(source, centers[i], epsilon, k_cap, seed)``
    whenever the query point is the source point ``centers[i]``.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if k_cap < 1:
        raise ValueError("k_cap must be at least 1")
    center_points = np.asarray(center_points, dtype=np.float64)
    if centers is None:
        centers = np.arange(len(center_points))
    cand_lists = source.ball_indices_many(center_points, epsilon)
    eps2 = epsilon * epsilon
    rows, norms = [], []
    for q, c, cand in zip(center_points, centers, cand_lists):
        cand = np.asarray(cand, dtype=np.intp)
        d2 = ((source.positions[cand] - q) ** 2).sum(axis=1)
        members = np.sort(cand[d2 < eps2])
        if len(members) == 0:
            raise ValueError("empty epsilon-ball neighborhood")
        members = _subselect(members, int(c), k_cap, seed)
        rows.append(members)
        norms.append(np.full(len(members), 1.0 / len(members)))
    return _pack(rows, centers, norms, "eps")


def farthest_point_sampling(cloud: PointCloud, m: int, start: int = 0) -> np.ndarray:
    """Greedy max-min subsampling.

    ``output[0] == start``; each following index maximizes the minimum
    distance to the points chosen so far, ties going to the lowest index.
    """
    positions = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = len(positions)
    if not 1 <= m <= n:
        raise ValueError(f"m must be in [1, {n}], got {m}")
    if not 0 <= start < n:
        raise IndexError("start index out of range")
    chosen = np.empty(m, dtype=np.intp)
    chosen[0] = start
    min_d2 = ((positions - positions[start]) ** 2).sum(axis=1)
    min_d2[start] = -1.0
    for i in range(1, m):
        nxt = int(np.argmax(min_d2))
        chosen[i] = nxt
        d2 = ((positions - positions[nxt]) ** 2).sum(axis=1)
        np.minimum(min_d2, d2, out=min_d2)
        # chosen points sit at -1 so duplicates (d2 == 0) are still preferred
        min_d2[nxt] = -1.0
    return chosen


def pc2d_indices(width: int, height: int) -> np.ndarray:
    """Row-major indices of the top-left pixel of every 2x2 window."""
    if width % 2 or height % 2:
        raise ValueError(f"PC-2D subsampling needs even sides, got {width}x{height}")
    rows = np.arange(0, height, 2)
    cols = np.arange(0, width, 2)
    return (rows[:, None] * width + cols[None, :]).ravel()


def pc2d_subsample(cloud: PointCloud, width: int, height: int) -> PointCloud:
    """Keep one point per 2x2 pixel window of a raster-derived cloud.

    Points are identified with pixels through the row-major order produced by
    raster conversion, so this also works on rotated clouds. The kept point is
    the window's top-left pixel (1-based odd row and odd column).
    """
    if len(cloud) != width * height:
        raise ValueError(f"cloud has {len(cloud)} points, expected {width}x{height} raster")
    return cloud.subset(pc2d_indices(width, height))


def grid_subsample(cloud: PointCloud, grid_size: float) -> PointCloud:
    """Barycentric subsampling on an origin-anchored cubic grid.

    One output point per non-empty cell, in lexicographic cell order. Features
    are averaged; normals are averaged and renormalized.
    """
    if cloud.dim != 3:
        raise ValueError("grid subsampling expects a 3D cloud")
    if not grid_size > 0:
        raise ValueError("grid_size must be positive")
    cells = np.floor(cloud.positions / grid_size).astype(np.int64)
    _, inverse, counts = np.unique(cells, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    k = len(counts)

    def cell_mean(values):
        out = np.zeros((k, values.shape[1]))
        np.add.at(out, inverse, values)
        return out / counts[:, None]

    positions = cell_mean(cloud.positions)
    features = None if cloud.features is None else cell_mean(cloud.features)
    normals = None
    if cloud.normals is not None:
        summed = np.zeros((k, 3))
        np.add.at(summed, inverse, cloud.normals)
        lengths = np.linalg.norm(summed, axis=1)
        if np.any(lengths < 1e-12):
            raise ValueError("degenerate normal cell")
        normals = summed / lengths[:, None]
    return PointCloud(positions, features, normals)


def _orient(normal: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    # +z first, then +x, then +y decide the sign
    for axis in (2, 0, 1):
        if abs(normal[axis]) > tol:
            return normal if normal[axis] > 0 else -normal
    return normal


def estimate_normals(cloud: PointCloud, k: int) -> PointCloud:
    """PCA normals from the ``k`` nearest neighbors of every point.

    The normal is the eigenvector of the smallest covariance eigenvalue,
    oriented to have a positive z component (then x, then y on ties).
    """
    if cloud.dim != 3:
        raise ValueError("normal estimation expects a 3D cloud")
    if k < 3:
        raise ValueError("k must be at least 3")
    index = build_index(cloud)
    normals = np.empty_like(cloud.positions)
    for i, p in enumerate(cloud.positions):
        nbrs = index.knn_indices(p, min(k, len(cloud)))
        pts = cloud.positions[nbrs]
        centered = pts - pts.mean(axis=0)
        cov = centered.T @ centered / len(pts)
        if np.trace(cov) <= 1e-300:
            raise ValueError("degenerate covariance: all neighbors coincide")
        _, vecs = np.linalg.eigh(cov)
        n = vecs[:, 0]
        normals[i] = _orient(n / np.linalg.norm(n))
    return cloud.with_normals(normals)


def _kde_inverse_density(index: SpatialIndex, neighbors: np.ndarray) -> np.ndarray:
    pts = index.positions[neighbors]
    if len(pts) == 1:
        return np.ones(1)
    diff = pts[:, None, :] - pts[None, :, :]
    pair = np.sqrt((diff ** 2).sum(axis=-1))
    iu = np.triu_indices(len(pts), k=1)
    bandwidth = pair[iu].mean()
    if not bandwidth > 0:
        raise ValueError("zero KDE bandwidth: all neighbors coincide")
    # Gaussian tails beyond 8 bandwidths are below 1.3e-14 and are cut off
    density = np.empty(len(pts))
    for j, q in enumerate(pts):
        cand = np.asarray(index._tree.query_ball_point(q, 8.0 * bandwidth), dtype=np.intp)
        d2 = ((index.positions[cand] - q) ** 2).sum(axis=1)
        density[j] = np.exp(-d2 / (2.0 * bandwidth * bandwidth)).sum()
    inv = 1.0 / density
    return inv * (len(inv) / inv.sum())


def inverse_density(cloud: PointCloud | SpatialIndex, nbhd: Neighborhood) -> np.ndarray:
    """Density compensation S for each neighbor of ``nbhd``.

    kNN neighborhoods: reciprocal of a Gaussian KDE evaluated at each
    neighbor over the cloud, with bandwidth equal to the mean pairwise
    distance among the neighbors, rescaled to mean 1. ε-ball neighborhoods
    keep their uniform ``1/|C|``.
    """
    if nbhd.mode == "eps":
        return np.asarray(nbhd.normalizer, dtype=np.float64).copy()
    index = cloud if isinstance(cloud, SpatialIndex) else build_index(cloud)
    return _kde_inverse_density(index, np.asarray(nbhd.neighbors, dtype=np.intp))
