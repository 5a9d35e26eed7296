"""Inputs for weight functions: cubic polynomial bases, the viewpoint-invariant
descriptor, and raster-to-point-cloud conversion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import NeighborTable, PointCloud

__all__ = [
    "PolyFeatures",
    "OrthoBasis",
    "VIDescriptor",
    "POLY_TERMS_2D",
    "POLY_TERMS_3D",
    "poly_basis",
    "poly_degree_mask",
    "poly_features",
    "gram_schmidt_basis",
    "vi_descriptor",
    "vi_descriptors",
    "raster_to_pointcloud",
]

_S3 = np.sqrt(3.0)
_S6 = np.sqrt(6.0)

POLY_TERMS_2D = ("x^3", "y^3", "s3*x^2y", "s3*xy^2", "s3*x^2", "s3*y^2", "s6*xy", "x", "y", "1")
POLY_TERMS_3D = (
    "x^3", "y^3", "z^3",
    "s3*x^2y", "s3*x^2z", "s3*xy^2", "s3*y^2z", "s3*xz^2", "s3*yz^2",
    "s3*x^2", "s3*y^2", "s3*z^2",
    "s6*xyz", "s6*xy", "s6*xz", "s6*yz",
    "s3*x", "s3*y", "s3*z", "1",
)
# total degree of every term, same order as above
_DEGREES_2D = np.array([3, 3, 3, 3, 2, 2, 2, 1, 1, 0])
_DEGREES_3D = np.array([3, 3, 3, 3, 3, 3, 3, 3, 3, 2, 2, 2, 3, 2, 2, 2, 1, 1, 1, 0])

DEGENERACY_TOL = 1e-8


def poly_degree_mask(dim: int) -> np.ndarray:
    """True for every basis term of degree two or higher."""
    if dim == 2:
        return _DEGREES_2D >= 2
    if dim == 3:
        return _DEGREES_3D >= 2
    raise ValueError(f"dim must be 2 or 3, got {dim}")


def poly_basis(offsets: np.ndarray) -> np.ndarray:
    """Evaluate the scaled cubic basis on offsets of shape (..., dim).

    Returns shape (..., 10) in 2D and (..., 20) in 3D.
    """
    off = np.asarray(offsets, dtype=np.float64)
    dim = off.shape[-1]
    if dim == 2:
        x, y = off[..., 0], off[..., 1]
        cols = [
            x ** 3, y ** 3, _S3 * x * x * y, _S3 * x * y * y,
            _S3 * x * x, _S3 * y * y, _S6 * x * y,
            x, y, np.ones_like(x),
        ]
    elif dim == 3:
        x, y, z = off[..., 0], off[..., 1], off[..., 2]
        cols = [
            x ** 3, y ** 3, z ** 3,
            _S3 * x * x * y, _S3 * x * x * z, _S3 * x * y * y,
            _S3 * y * y * z, _S3 * x * z * z, _S3 * y * z * z,
            _S3 * x * x, _S3 * y * y, _S3 * z * z,
            _S6 * x * y * z, _S6 * x * y, _S6 * x * z, _S6 * y * z,
            _S3 * x, _S3 * y, _S3 * z, np.ones_like(x),
        ]
    else:
        raise ValueError(f"offsets must be 2D or 3D, got dim={dim}")
    return np.stack(cols, axis=-1)


@dataclass(frozen=True, eq=False)
class PolyFeatures:
    dim: int
    values: np.ndarray
    degree_mask: np.ndarray


def poly_features(offset) -> PolyFeatures:
    """Cubic basis for a single offset vector."""
    off = np.asarray(offset, dtype=np.float64)
    if off.shape not in ((2,), (3,)):
        raise ValueError(f"offset must be a 2- or 3-vector, got shape {off.shape}")
    return PolyFeatures(len(off), poly_basis(off), poly_degree_mask(len(off)))


@dataclass(frozen=True, eq=False)
class OrthoBasis:
    r_hat: np.ndarray
    v_hat: np.ndarray
    w_hat: np.ndarray
    degenerate: bool = False

    def matrix(self) -> np.ndarray:
        """Basis vectors as columns."""
        return np.column_stack([self.r_hat, self.v_hat, self.w_hat])


def gram_schmidt_basis(r_vec, n_mu, tol: float = DEGENERACY_TOL) -> OrthoBasis:
    """Right-handed orthonormal basis from an offset and the center normal.

    ``r_hat`` follows the offset, ``v_hat`` is the normal with its ``r_hat``
    component removed, ``w_hat = r_hat x v_hat``. When the two inputs are
    (nearly) collinear the coordinate axis least aligned with ``r_hat`` takes
    the place of the normal and ``degenerate`` is set.
    """
    r = np.asarray(r_vec, dtype=np.float64)
    n = np.asarray(n_mu, dtype=np.float64)
    length = np.linalg.norm(r)
    if length == 0:
        raise ValueError("zero offset in VI descriptor")
    r_hat = r / length
    proj = r_hat @ n
    gap = 1.0 - proj * proj
    degenerate = gap < tol
    if degenerate:
        e = np.eye(3)[int(np.argmin(np.abs(r_hat)))]
        v = e - (r_hat @ e) * r_hat
        v_hat = v / np.linalg.norm(v)
    else:
        v_hat = (n - proj * r_hat) / np.sqrt(gap)
    return OrthoBasis(r_hat, v_hat, np.cross(r_hat, v_hat), bool(degenerate))


@dataclass(frozen=True, eq=False)
class VIDescriptor:
    beta: np.ndarray
    basis: OrthoBasis


def vi_descriptor(p_mu, n_mu, p_alpha, n_alpha) -> VIDescriptor:
    """8-d viewpoint-invariant descriptor of neighbor ``alpha`` w.r.t. center ``mu``.

    Entries, in order: ``n_a.n_m``, ``r.n_m/|r|``, ``r.n_a/|r|``, ``n_a.v``,
    ``n_a.w``, ``r.n_m``, ``r.(n_a x n_m)``, ``|r|`` with ``r = p_a - p_m``.
    The first five are rotation and scale invariant, the last three only
    rotation invariant.
    """
    p_mu = np.asarray(p_mu, dtype=np.float64)
    p_alpha = np.asarray(p_alpha, dtype=np.float64)
    n_mu = np.asarray(n_mu, dtype=np.float64)
    n_alpha = np.asarray(n_alpha, dtype=np.float64)
    r = p_alpha - p_mu
    if not np.any(r):
        raise ValueError("zero offset in VI descriptor")
    basis = gram_schmidt_basis(r, n_mu)
    length = np.linalg.norm(r)
    beta = np.array([
        n_alpha @ n_mu,
        (r @ n_mu) / length,
        (r @ n_alpha) / length,
        n_alpha @ basis.v_hat,
        n_alpha @ basis.w_hat,
        r @ n_mu,
        r @ np.cross(n_alpha, n_mu),
        length,
    ])
    return VIDescriptor(beta, basis)


def vi_descriptors(source: PointCloud, table: NeighborTable, centers: PointCloud | None = None) -> np.ndarray:
    """Descriptors for every slot of a neighbor table, shape (m, K, 8).

    The center itself (zero offset) and padding slots get an all-zero
    descriptor.
    """
    if source.normals is None:
        raise ValueError("VI descriptors need normals")
    if centers is None:
        centers = source.subset(table.centers)
    if centers.normals is None:
        raise ValueError("VI descriptors need normals")
    p_mu = centers.positions[:, None, :]
    n_mu = np.broadcast_to(centers.normals[:, None, :], table.index.shape + (3,))
    r = source.positions[table.index] - p_mu
    n_a = source.normals[table.index]
    length = np.linalg.norm(r, axis=-1)
    valid = table.mask & (length > 0)
    safe = np.where(valid, length, 1.0)
    r_hat = r / safe[..., None]
    proj = (r_hat * n_mu).sum(-1)
    gap = 1.0 - proj ** 2
    degenerate = valid & (gap < DEGENERACY_TOL)
    v = n_mu - proj[..., None] * r_hat
    v_hat = v / np.sqrt(np.where(degenerate | ~valid, 1.0, gap))[..., None]
    if np.any(degenerate):
        for i, j in zip(*np.nonzero(degenerate)):
            v_hat[i, j] = gram_schmidt_basis(r[i, j], n_mu[i, j]).v_hat
    w_hat = np.cross(r_hat, v_hat)
    beta = np.stack([
        (n_a * n_mu).sum(-1),
        proj,
        (r_hat * n_a).sum(-1),
        (n_a * v_hat).sum(-1),
        (n_a * w_hat).sum(-1),
        (r * n_mu).sum(-1),
        (r * np.cross(n_a, n_mu)).sum(-1),
        length,
    ], axis=-1)
    beta[~valid] = 0.0
    return beta


def raster_to_pointcloud(image) -> PointCloud:
    """One 2D point per pixel at ``(row / m, col / n)`` with 1-based indices.

    ``image`` has shape (m, n) or (m, n, channels). Integer images and images
    with values above 1 are treated as 0-255 and divided by 255. Points are in
    row-major pixel order.
    """
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ValueError(f"image must be (h, w) or (h, w, c), got shape {np.shape(image)}")
    m, n, c = img.shape
    if m < 1 or n < 1:
        raise ValueError("image must have at least one pixel")
    feats = img.astype(np.float64).reshape(m * n, c)
    if np.issubdtype(img.dtype, np.integer) or (feats.size and feats.max() > 1.0):
        feats = feats / 255.0
    rows, cols = np.meshgrid(np.arange(1, m + 1) / m, np.arange(1, n + 1) / n, indexing="ij")
    positions = np.column_stack([rows.ravel(), cols.ravel()])
    return PointCloud(positions, feats)
