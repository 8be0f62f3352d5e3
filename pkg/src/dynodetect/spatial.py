"""Voxel-grid downsampling and fixed-radius neighbor search.

Downsampling keeps the first point (in input order) of each occupied voxel,
so original coordinates and timestamps survive untouched; averaging would
smear the per-point timestamps that the scoring stage depends on. Neighbor
queries are 3D closed-ball lookups over spatial coordinates only.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .cloud import Cloud
from .errors import EmptyCloudError

__all__ = [
    "voxel_keys",
    "downsample",
    "downsample_indices",
    "compute_scale",
    "auto_voxel_size",
    "KdIndex",
    "build_index",
    "radius_query",
]


def voxel_keys(xyz: np.ndarray, voxel_size: float) -> np.ndarray:
    """Integer voxel coordinates floor(xyz / voxel_size), shape (N, 3) int64.

    floor (not truncation) so that negative coordinates bin correctly.
    """
    if voxel_size <= 0:
        raise ValueError(f"voxel size must be > 0, got {voxel_size}")
    scaled = np.asarray(xyz, dtype=np.float64) / voxel_size
    if np.abs(scaled).max(initial=0.0) >= 2**62:
        raise ValueError(
            f"voxel size {voxel_size} is too small for the coordinate range")
    return np.floor(scaled).astype(np.int64)


def _pack_keys(keys: np.ndarray) -> np.ndarray:
    """Collision-free packing of 3 voxel indices into one int64 per point."""
    kmin = keys.min(axis=0)
    span = keys.max(axis=0) - kmin + 1
    if int(span[0]) * int(span[1]) * int(span[2]) >= 2**62:
        raise OverflowError("voxel grid too large to pack")
    rel = keys - kmin
    return (rel[:, 0] * int(span[1]) + rel[:, 1]) * int(span[2]) + rel[:, 2]


def downsample_indices(xyz: np.ndarray, voxel_size: float) -> np.ndarray:
    """Indices of the retained points, in first-occurrence order."""
    keys = voxel_keys(xyz, voxel_size)
    try:
        packed = _pack_keys(keys)
        _, first = np.unique(packed, return_index=True)
    except OverflowError:
        _, first = np.unique(keys, axis=0, return_index=True)
    first.sort()
    return first


def downsample(cloud: Cloud, voxel_size: float) -> Cloud:
    """Voxel-grid downsample: at most one point per cube of side voxel_size."""
    keep = downsample_indices(cloud.xyz, voxel_size)
    return Cloud(cloud.xyz[keep], cloud.t[keep], frame_index=cloud.frame_index,
                 stamp=cloud.stamp, rejected_points=cloud.rejected_points)


def compute_scale(cloud: Cloud) -> float:
    """Diagonal length of the cloud's axis-aligned bounding box."""
    if len(cloud) == 0:
        raise EmptyCloudError("cannot compute scale of an empty cloud")
    extent = cloud.xyz.max(axis=0) - cloud.xyz.min(axis=0)
    return float(np.linalg.norm(extent))


def auto_voxel_size(cloud: Cloud, divisor: float) -> float:
    """Voxel size proportional to cloud scale: bounding-box diagonal / divisor."""
    if divisor <= 0:
        raise ValueError(f"divisor must be > 0, got {divisor}")
    return compute_scale(cloud) / divisor


class KdIndex:
    """Immutable kd-tree over 3D spatial coordinates (t is not indexed).

    Safe for concurrent queries once built. An empty index is valid and
    returns empty results for every query.
    """

    def __init__(self, xyz: np.ndarray, leafsize: int = 16):
        if leafsize < 1:
            raise ValueError(f"leafsize must be >= 1, got {leafsize}")
        xyz = np.ascontiguousarray(np.asarray(xyz, dtype=np.float64)).reshape(-1, 3)
        self._xyz = xyz
        self.leafsize = leafsize
        self._tree = cKDTree(xyz, leafsize=leafsize) if xyz.shape[0] else None

    def __len__(self) -> int:
        return self._xyz.shape[0]

    @property
    def points(self) -> np.ndarray:
        return self._xyz

    def radius_query(self, center, radius: float) -> np.ndarray:
        """Indices of all points with ||p - center||2 <= radius (closed ball)."""
        if radius <= 0:
            raise ValueError(f"radius must be > 0, got {radius}")
        if self._tree is None:
            return np.empty(0, dtype=np.int64)
        idx = self._tree.query_ball_point(np.asarray(center, dtype=np.float64), radius)
        return np.asarray(idx, dtype=np.int64)

    def radius_query_many(self, centers: np.ndarray, radius: float) -> list[np.ndarray]:
        if radius <= 0:
            raise ValueError(f"radius must be > 0, got {radius}")
        centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        if self._tree is None:
            return [np.empty(0, dtype=np.int64) for _ in range(centers.shape[0])]
        out = self._tree.query_ball_point(centers, radius)
        return [np.asarray(ix, dtype=np.int64) for ix in out]

    def nearest_within(self, centers: np.ndarray, radius: float) -> np.ndarray:
        """Boolean mask: True where any indexed point lies within radius."""
        if radius <= 0:
            raise ValueError(f"radius must be > 0, got {radius}")
        centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        if self._tree is None:
            return np.zeros(centers.shape[0], dtype=bool)
        dist, _ = self._tree.query(centers, k=1, distance_upper_bound=radius * (1 + 1e-12))
        return dist <= radius


def build_index(points) -> KdIndex:
    """Build a KdIndex from (N, 3) coordinates, a Cloud, or TimedPoints."""
    if isinstance(points, Cloud):
        return KdIndex(points.xyz)
    points = list(points) if not isinstance(points, np.ndarray) else points
    if len(points) and hasattr(points[0], "x"):
        return KdIndex(np.array([[p.x, p.y, p.z] for p in points]))
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        return KdIndex(np.empty((0, 3)))
    return KdIndex(arr.reshape(len(points), -1)[:, :3])


def radius_query(index: KdIndex, center, radius: float) -> np.ndarray:
    return index.radius_query(center, radius)
