"""IDX ingestion, image rescaling, rotation and dataset assembly."""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from ..geometry import PointCloud

__all__ = [
    "IdxError",
    "read_idx",
    "write_idx",
    "load_idx",
    "load_mnist",
    "rescale_image",
    "rotate_pointcloud",
    "grid_positions",
    "grid_center",
    "make_dataset",
    "split_indices",
]

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path) -> np.ndarray:
    """Parse an unsigned-byte IDX file into an array of its declared shape."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IdxError(f"{path}: truncated at byte {len(raw)} (need 4-byte magic)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IMAGES_MAGIC, LABELS_MAGIC):
        raise IdxError(f"{path}: bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IdxError(f"{path}: truncated at byte {len(raw)} inside the header (need {head} bytes)")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    need = head + int(np.prod(dims, dtype=np.int64))
    if len(raw) < need:
        raise IdxError(f"{path}: truncated at byte {len(raw)}, expected {need} bytes for dims {dims}")
    return np.frombuffer(raw, dtype=np.uint8, count=need - head, offset=head).reshape(dims)


def write_idx(path, array) -> None:
    a = np.asarray(array)
    if a.dtype != np.uint8:
        raise ValueError("IDX writer supports uint8 arrays only")
    if a.ndim not in (1, 3):
        raise ValueError("expected labels (n,) or images (n, h, w)")
    magic = LABELS_MAGIC if a.ndim == 1 else IMAGES_MAGIC
    data = struct.pack(">I", magic) + struct.pack(f">{a.ndim}I", *a.shape) + a.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        data = gzip.compress(data, mtime=0)
    path.write_bytes(data)


def load_mnist(images_path, labels_path):
    """Return ``(images (n, h, w) uint8, labels (n,) int64)``."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise IdxError(f"{images_path}: not an image file")
    if labels.ndim != 1:
        raise IdxError(f"{labels_path}: not a label file")
    if len(images) != len(labels):
        raise IdxError(f"image count {len(images)} does not match label count {len(labels)}")
    if labels.size and labels.max() > 9:
        raise IdxError(f"{labels_path}: labels outside 0-9")
    return images, labels.astype(np.int64)


def load_idx(images_path, labels_path) -> list:
    """List of ``(image grid, label)`` pairs."""
    images, labels = load_mnist(images_path, labels_path)
    return list(zip(images, labels.tolist()))


def rescale_image(image, target: int) -> np.ndarray:
    """Bilinear resize to ``target x target`` with corner-aligned sampling.

    Output pixel ``i`` samples source coordinate ``i*(h-1)/(target-1)`` so
    the four corner pixels are reproduced exactly. Returns float64 in the
    input's value range.
    """
    if target < 1:
        raise ValueError("target side must be at least 1")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim not in (2, 3):
        raise ValueError("image must be (h, w) or (h, w, c)")
    h, w = img.shape[:2]

    def axis(n):
        if target == 1 or n == 1:
            src = np.zeros(target) if n == 1 else np.full(target, (n - 1) / 2.0)
        else:
            src = np.arange(target) * ((n - 1) / (target - 1))
        lo = np.clip(np.floor(src).astype(int), 0, n - 1)
        hi = np.minimum(lo + 1, n - 1)
        return lo, hi, src - lo

    r0, r1, fr = axis(h)
    c0, c1, fc = axis(w)
    if img.ndim == 3:
        fr = fr[:, None, None]
        fc = fc[None, :, None]
    else:
        fr = fr[:, None]
        fc = fc[None, :]
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bot = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr) + bot * fr


def grid_center(m: int, n: int) -> np.ndarray:
    """Centroid of the normalized ``m x n`` pixel grid."""
    return np.array([0.5 * (1 + 1 / m), 0.5 * (1 + 1 / n)])


def rotate_pointcloud(cloud: PointCloud, angle: float, center=None, shape=None) -> PointCloud:
    """Rotate a 2D cloud counter-clockwise by ``angle`` degrees.

    The pivot defaults to the grid centroid of ``shape`` (rows, cols); when
    no shape is given the cloud is assumed to be a square raster.
    """
    if cloud.dim != 2:
        raise ValueError("rotate_pointcloud expects a 2D cloud")
    if center is None:
        if shape is None:
            side = int(round(np.sqrt(len(cloud))))
            if side * side != len(cloud):
                raise ValueError("pass center= or shape= for non-square clouds")
            shape = (side, side)
        center = grid_center(*shape)
    if float(angle) % 360.0 == 0.0:
        return PointCloud(cloud.positions, cloud.features, None)
    center = np.asarray(center, dtype=np.float64)
    t = np.deg2rad(angle)
    c, s = np.cos(t), np.sin(t)
    rot = np.array([[c, -s], [s, c]])
    pos = (cloud.positions - center) @ rot.T + center
    return PointCloud(pos, cloud.features, None)


def grid_positions(m: int, n: int) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(1, m + 1) / m, np.arange(1, n + 1) / n, indexing="ij")
    pos = np.column_stack([rows.ravel(), cols.ravel()])
    pos.setflags(write=False)
    return pos


def make_dataset(images, labels, *, size: int | None = None, angle: float = 0.0,
                 prune_threshold: float | None = None) -> list:
    """Convert raster images to ``(cloud, label, raster_shape)`` samples.

    All clouds of one call share a single positions array, so neighbor
    tables are computed once per variant. ``prune_threshold`` drops pixels
    whose [0, 1] intensity is at or below it (off by default).
    """
    images = np.asarray(images)
    if images.ndim != 3:
        raise ValueError("images must be (n, h, w)")
    h, w = images.shape[1:]
    if size is not None and (size != h or size != w):
        arr = np.stack([rescale_image(im, size) for im in images]) if len(images) else \
            np.zeros((0, size, size))
        h = w = size
    else:
        arr = images.astype(np.float64)
    arr = arr / 255.0 if (np.issubdtype(images.dtype, np.integer) or arr.max(initial=0) > 1) else arr
    arr = np.clip(arr, 0.0, 1.0)
    pos = grid_positions(h, w)
    if float(angle) % 360.0:
        t = np.deg2rad(angle)
        c, s = np.cos(t), np.sin(t)
        ctr = grid_center(h, w)
        pos = (pos - ctr) @ np.array([[c, -s], [s, c]]).T + ctr
        pos.setflags(write=False)
    out = []
    for im, lab in zip(arr, np.asarray(labels)):
        feats = im.reshape(h * w, 1)
        if prune_threshold is not None:
            keep = feats[:, 0] > prune_threshold
            if not keep.any():
                keep[np.argmax(feats[:, 0])] = True
            cloud = PointCloud(pos[keep], feats[keep])
        else:
            feats = feats.copy()
            feats.setflags(write=False)
            cloud = PointCloud(pos, feats)
        out.append((cloud, int(lab), (h, w)))
    return out


def split_indices(labels, counts, seed: int) -> list:
    """Disjoint, seeded index sets of the requested sizes (stratified by label)."""
    labels = np.asarray(labels)
    total = sum(counts)
    if total > len(labels):
        raise ValueError(f"requested {total} images but only {len(labels)} are available")
    rng = np.random.default_rng([seed, 7])
    perm = rng.permutation(len(labels))
    # round-robin over classes keeps every split close to balanced
    by_class = [perm[labels[perm] == c] for c in np.unique(labels)]
    order = []
    depth = max(len(b) for b in by_class)
    for i in range(depth):
        for b in by_class:
            if i < len(b):
                order.append(b[i])
    order = np.array(order, dtype=np.int64)
    out, start = [], 0
    for c in counts:
        out.append(np.sort(order[start:start + c]))
        start += c
    return out
