"""Point clouds, canonical instance frames and point <-> grid conversion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidBoxError, InvalidInputError

DEFAULT_INSTANCE_DIMS = (32, 32, 32)
DEGENERATE_EXTENT = 1e-6


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    conf: np.ndarray | None = None
    height: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        n = len(pts)
        for name in ("conf", "height", "labels"):
            val = getattr(self, name)
            if val is not None:
                val = np.asarray(val)
                if len(val) != n:
                    raise InvalidInputError(f"{name} length {len(val)} != {n} points")
                object.__setattr__(self, name, val)

    def __len__(self):
        return len(self.points)

    def subset(self, mask):
        pick = lambda a: None if a is None else a[mask]
        return PointCloud(self.points[mask], pick(self.conf), pick(self.height), pick(self.labels))

    def with_points(self, pts):
        return PointCloud(pts, self.conf, self.height, self.labels)


@dataclass(frozen=True)
class CanonicalFrame:
    """Maps a world box onto [-1, 1]^3: ``p' = (p - center) / half_extents``."""

    center: tuple
    half_extents: tuple

    def __post_init__(self):
        c = tuple(float(x) for x in np.asarray(self.center).reshape(3))
        h = tuple(float(x) for x in np.asarray(self.half_extents).reshape(3))
        if min(h) <= DEGENERATE_EXTENT:
            raise InvalidBoxError(f"degenerate box half extents {h}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_extents", h)

    @classmethod
    def from_box(cls, box):
        """Frame of anything with ``center`` and full ``size`` attributes."""
        if isinstance(box, CanonicalFrame):
            return box
        size = np.asarray(box.size, dtype=np.float64)
        if np.any(size / 2 <= DEGENERATE_EXTENT):
            raise InvalidBoxError(f"degenerate box size {tuple(size)}")
        return cls(box.center, size / 2)

    def to_canonical(self, pts):
        return (np.asarray(pts) - np.asarray(self.center)) / np.asarray(self.half_extents)

    def to_world(self, pts):
        return np.asarray(pts) * np.asarray(self.half_extents) + np.asarray(self.center)


@dataclass(frozen=True, eq=False)
class InstanceGrid:
    """Trilinear mass grid over [-1, 1]^3 with vertices at ``-1 + 2 i / (n - 1)``.

    ``moments`` holds the mass-weighted sum of source coordinates per vertex
    and lets re-gridding place points at sub-cell positions.
    """

    values: np.ndarray
    moments: np.ndarray | None = None
    frame: CanonicalFrame | None = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 3 or min(vals.shape) < 2:
            raise InvalidInputError("instance grid needs >= 2 vertices per axis")
        if not np.all(np.isfinite(vals)) or np.any(vals < 0):
            raise InvalidInputError("grid values must be finite and non-negative")
        object.__setattr__(self, "values", vals)

    @property
    def dims(self):
        return self.values.shape

    def vertex_coords(self):
        axes = [np.linspace(-1.0, 1.0, n) for n in self.dims]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def canonicalize(cloud, box):
    """Normalize ``cloud`` into the box frame.

    Returns ``(canonical_cloud, frame, n_dropped)``; points that land outside
    [-1, 1]^3 are dropped.
    """
    frame = CanonicalFrame.from_box(box)
    pts = frame.to_canonical(cloud.points)
    inside = np.all(np.abs(pts) <= 1.0, axis=1)
    out = cloud.subset(inside).with_points(pts[inside])
    return out, frame, int((~inside).sum())


def decanonicalize(cloud, frame):
    return cloud.with_points(frame.to_world(cloud.points))


def _trilinear(points, dims):
    dims_a = np.asarray(dims)
    g = (np.asarray(points, dtype=np.float64) + 1.0) / 2.0 * (dims_a - 1)
    i0 = np.clip(np.floor(g).astype(np.int64), 0, dims_a - 2)
    f = g - i0
    corners, weights = [], []
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (
                    (f[:, 0] if dx else 1 - f[:, 0])
                    * (f[:, 1] if dy else 1 - f[:, 1])
                    * (f[:, 2] if dz else 1 - f[:, 2])
                )
                corners.append(i0 + np.array([dx, dy, dz]))
                weights.append(w)
    return np.stack(corners, 1), np.stack(weights, 1)


def gridding(cloud, dims=DEFAULT_INSTANCE_DIMS, frame=None):
    """Scatter unit mass per point onto the 8 surrounding grid vertices."""
    dims = tuple(int(d) for d in dims)
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud).reshape(-1, 3)
    if len(pts) and np.any(np.abs(pts) > 1.0 + 1e-9):
        raise InvalidInputError("gridding expects canonical points in [-1, 1]^3")
    values = np.zeros(dims)
    moments = np.zeros(dims + (3,))
    if len(pts):
        corners, weights = _trilinear(pts, dims)
        flat = np.ravel_multi_index(tuple(corners.reshape(-1, 3).T), dims)
        w = weights.reshape(-1)
        n = int(np.prod(dims))
        values = np.bincount(flat, weights=w, minlength=n).reshape(dims)
        src = np.repeat(pts, 8, axis=0)
        moments = np.stack(
            [np.bincount(flat, weights=w * src[:, a], minlength=n) for a in range(3)], axis=-1
        ).reshape(dims + (3,))
    return InstanceGrid(values, moments, frame)


def regridding(grid, threshold=0.5, conserve=False):
    """One point per grid vertex whose mass is >= ``threshold``.

    Points sit at the mass-weighted source position when the grid carries
    moments, otherwise at the vertex itself.

    With ``conserve`` the threshold is ignored and the grid's total mass is
    turned back into ``round(total)`` points: vertices are visited in raster
    order and emit ``round(cum_i) - round(cum_{i-1})`` points, where ``cum``
    is the running mass. A gridded cloud thus re-extracts to its own size.
    """
    if conserve:
        cum = np.floor(np.cumsum(grid.values.reshape(-1)) + 0.5).astype(np.int64)
        reps = np.diff(np.concatenate([[0], cum]))
        keep = (reps > 0).reshape(grid.dims)
        reps = reps[reps > 0]
    else:
        keep = (grid.values >= threshold) & (grid.values > 0)
        reps = None
    if grid.moments is not None:
        pts = grid.moments[keep] / grid.values[keep][:, None]
    else:
        pts = grid.vertex_coords()[keep]
    if reps is not None:
        pts = np.repeat(pts, reps, axis=0)
    return PointCloud(np.clip(pts, -1.0, 1.0))


def voxelize_instance_to_scene(points, class_id, spec):
    """Scene voxels touched by world ``points``.

    Returns ``(indices (K, 3), n_dropped)``; indices are unique and sorted.
    Indexing is ``floor((p - origin) / voxel_size)``, so a point on a shared
    face belongs to the voxel whose lower face it lies on.
    """
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points).reshape(-1, 3)
    if int(class_id) < 1:
        raise InvalidInputError("instance class id must be >= 1")
    idx = spec.index_of(pts)
    ok = spec.in_bounds(idx)
    uniq = np.unique(idx[ok], axis=0) if ok.any() else np.zeros((0, 3), np.int64)
    return uniq, int((~ok).sum())
