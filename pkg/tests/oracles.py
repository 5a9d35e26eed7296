"""Slow reference implementations used only by the tests.

Nothing here imports the package's fast paths: distances are full scans,
convolution is a literal double sum, gradients are central differences and
integrals are Gauss-Legendre quadrature.
"""

import numpy as np


def brute_knn(positions, center, k, include_center=True):
    """Full scan, ordered by (squared distance, index)."""
    positions = np.asarray(positions, float)
    d2 = ((positions - positions[center]) ** 2).sum(axis=1)
    order = np.lexsort((np.arange(len(positions)), d2))
    if not include_center:
        order = order[order != center]
    return order[:k]


def brute_ball(positions, center, epsilon):
    positions = np.asarray(positions, float)
    d2 = ((positions - positions[center]) ** 2).sum(axis=1)
    return np.flatnonzero(d2 < epsilon * epsilon)


def brute_fps(positions, m, start=0):
    """Each step rescans every (candidate, chosen) pair from scratch."""
    positions = np.asarray(positions, float)
    chosen = [start]
    while len(chosen) < m:
        diff = positions[:, None, :] - positions[chosen][None, :, :]
        d = (diff ** 2).sum(axis=2).min(axis=1)
        d[chosen] = -1.0
        chosen.append(int(np.argmax(d)))  # first (lowest) index wins ties
    return np.array(chosen)


def explicit_pointconv(weights, H, bias, c_in, normalizer, feats):
    """Literal sum over neighbors and channels of S_k * W(d_k)[o, c] * f_k[c].

    ``weights`` are the weight-function outputs w(d_k), shape (K, c_mid); the
    full kernel is materialized as W(d)[o, c] = sum_j H[o, j*c_in + c] w_j(d).
    """
    K, c_mid = weights.shape
    c_out = H.shape[0]
    out = np.array(bias, dtype=float).copy()
    for k in range(K):
        W = np.zeros((c_out, c_in))
        for o in range(c_out):
            for c in range(c_in):
                W[o, c] = sum(H[o, j * c_in + c] * weights[k, j] for j in range(c_mid))
        for o in range(c_out):
            for c in range(c_in):
                out[o] += normalizer[k] * W[o, c] * feats[k, c]
    return out


def central_diff(f, x, h=1e-6):
    """Central-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    den = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if den == 0 else np.linalg.norm(a - b) / den


def random_rotation(rng, dim=3):
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def second_derivatives_fd(basis_fn, points, h=1e-2):
    """Hessians of every basis term at ``points`` by central differences.

    Exact up to rounding for cubics (the fourth derivative vanishes).
    Returns shape (N, n_terms, dim, dim).
    """
    points = np.asarray(points, dtype=float)
    n, dim = points.shape
    e = np.eye(dim) * h
    f0 = basis_fn(points)
    hess = np.zeros((n, f0.shape[1], dim, dim))
    for a in range(dim):
        for b in range(dim):
            if a == b:
                val = (basis_fn(points + e[a]) - 2 * f0 + basis_fn(points - e[a])) / (h * h)
            else:
                val = (basis_fn(points + e[a] + e[b]) - basis_fn(points + e[a] - e[b])
                       - basis_fn(points - e[a] + e[b]) + basis_fn(points - e[a] - e[b])) / (4 * h * h)
            hess[:, :, a, b] = val
    return hess


def sobolev_gram(basis_fn, dim, n_nodes=64):
    """G with theta^T G theta = mean over [-1,1]^dim of sum_ab (d_a d_b f)^2.

    Summing over all ordered pairs (a, b) gives f_xx^2 + 2 f_xy^2 + f_yy^2
    in 2D.
    """
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    wts = np.ones_like(grids[0])
    for wg in np.meshgrid(*([w] * dim), indexing="ij"):
        wts = wts * wg
    pts = np.stack([g.ravel() for g in grids], axis=1)
    wts = wts.ravel() / 2.0 ** dim  # weights integrate to the mean
    G = None
    for s in range(0, len(pts), 16384):
        hess = second_derivatives_fd(basis_fn, pts[s:s + 16384])
        flat = hess.reshape(hess.shape[0], hess.shape[1], dim * dim)
        part = np.einsum("p,pia,pja->ij", wts[s:s + 16384], flat, flat)
        G = part if G is None else G + part
    return G
