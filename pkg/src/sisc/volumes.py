"""Voxel grid types and construction of the two input volumes.

Array layout: every dense volume is indexed ``[x, y, z]`` with shape
``spec.dims``; ``y`` is the vertical axis and grid index ``j`` sits
``j * voxel_size`` above the grid floor.

Semantic confidences carry ``C + 1`` channels where channel 0 is the
"empty" class, so a class id indexes its channel directly.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidInputError

DEFAULT_DIMS = (60, 36, 60)
DEFAULT_VOXEL_SIZE = 0.08
DEFAULT_TRUNCATION = 0.24

# sign_convention byte for TSDF payloads: negative distance means occluded
SIGN_NEGATIVE_OCCLUDED = 1


class Visibility(enum.IntEnum):
    OUTSIDE = 0
    FREE = 1
    SURFACE = 2
    OCCLUDED = 3


def _frozen(a, dtype=None):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole camera. ``rotation``/``translation`` map camera to world.

    Camera axes: x right, y down, z forward. ``width``/``height`` give the
    image size in pixels and bound the view frustum.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    width: int | None = None
    height: int | None = None

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError("focal lengths must be positive")
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise InvalidInputError("rotation must be 3x3")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1) > 1e-6:
            raise InvalidInputError("pose rotation is not orthonormal with det +1")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    def to_world(self, pts_cam):
        return np.asarray(pts_cam) @ self.rotation.T + self.translation

    def to_camera(self, pts_world):
        return (np.asarray(pts_world) - self.translation) @ self.rotation

    def project(self, pts_world):
        """Return (u, v, z) pixel coordinates and camera depth for world points."""
        p = self.to_camera(pts_world)
        z = p[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * p[..., 0] / z + self.cx
            v = self.fy * p[..., 1] / z + self.cy
        return u, v, z

    def to_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True, eq=False)
class DepthMap:
    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise InvalidInputError("depth map must be 2-D")
        valid = np.isfinite(vals) & (vals > 0)
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=bool)
            if m.shape != vals.shape:
                raise InvalidInputError("mask shape does not match depth")
            valid &= m
        object.__setattr__(self, "values", _frozen(np.where(valid, vals, 0.0)))
        object.__setattr__(self, "mask", _frozen(valid))

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class GridSpec:
    dims: tuple = DEFAULT_DIMS
    voxel_size: float = DEFAULT_VOXEL_SIZE
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise InvalidInputError(f"bad grid dims {self.dims}")
        if not self.voxel_size > 0:
            raise InvalidInputError("voxel_size must be positive")
        # stored at f32 precision so the on-disk header round-trips exactly
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", float(np.float32(self.voxel_size)))
        object.__setattr__(
            self, "origin", tuple(float(np.float32(o)) for o in self.origin)
        )

    @property
    def num_voxels(self):
        X, Y, Z = self.dims
        return X * Y * Z

    @property
    def extent(self):
        return tuple(d * self.voxel_size for d in self.dims)

    def voxel_centers(self):
        """World coordinates of every voxel center, shape ``dims + (3,)``."""
        axes = [
            self.origin[a] + (np.arange(self.dims[a]) + 0.5) * self.voxel_size
            for a in range(3)
        ]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def index_of(self, points):
        """Floor-rule voxel index of world points (may be out of range)."""
        p = (np.asarray(points, dtype=np.float64) - np.asarray(self.origin)) / self.voxel_size
        return np.floor(p).astype(np.int64)

    def in_bounds(self, idx):
        idx = np.asarray(idx)
        return np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=-1)

    def center_of(self, idx):
        return np.asarray(self.origin) + (np.asarray(idx) + 0.5) * self.voxel_size

    def to_dict(self):
        return {"dims": list(self.dims), "voxel_size": self.voxel_size, "origin": list(self.origin)}


@dataclass(frozen=True, eq=False)
class TsdfVolume:
    spec: GridSpec
    d: np.ndarray
    visibility: np.ndarray

    def __post_init__(self):
        d = _frozen(self.d, np.float32)
        vis = _frozen(self.visibility, np.uint8)
        if d.shape != self.spec.dims or vis.shape != self.spec.dims:
            raise InvalidInputError("TSDF arrays do not match grid dims")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "visibility", vis)

    @property
    def in_frustum(self):
        return self.visibility != Visibility.OUTSIDE

    @property
    def occluded(self):
        return self.visibility == Visibility.OCCLUDED

    @property
    def surface(self):
        return self.visibility == Visibility.SURFACE

    @property
    def free(self):
        return self.visibility == Visibility.FREE


@dataclass(frozen=True, eq=False)
class SemanticVolume:
    """Per-voxel confidences, shape ``dims + (C + 1,)``; channel 0 is empty."""

    spec: GridSpec
    conf: np.ndarray

    def __post_init__(self):
        conf = _frozen(self.conf, np.float32)
        if conf.ndim != 4 or conf.shape[:3] != self.spec.dims or conf.shape[3] < 2:
            raise InvalidInputError("confidence array does not match grid dims")
        object.__setattr__(self, "conf", conf)

    @property
    def num_classes(self):
        return self.conf.shape[3] - 1

    @property
    def class_conf(self):
        """The ``C`` object-class channels without the empty channel."""
        return self.conf[..., 1:]

    @property
    def evidence(self):
        return self.conf.sum(axis=-1) > 0

    @classmethod
    def from_labels(cls, labels, spec, num_classes):
        conf = np.zeros(spec.dims + (num_classes + 1,), np.float32)
        np.put_along_axis(conf, np.asarray(labels, np.int64)[..., None], 1.0, axis=-1)
        return cls(spec, conf)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Hard labels in ``{0=empty, 1..C}`` plus a visibility evaluation mask."""

    spec: GridSpec
    labels: np.ndarray
    visibility: np.ndarray | None = None

    def __post_init__(self):
        labels = _frozen(self.labels, np.uint8)
        if labels.shape != self.spec.dims:
            raise InvalidInputError("label array does not match grid dims")
        object.__setattr__(self, "labels", labels)
        if self.visibility is not None:
            vis = _frozen(self.visibility, np.uint8)
            if vis.shape != self.spec.dims:
                raise InvalidInputError("mask does not match grid dims")
            object.__setattr__(self, "visibility", vis)

    def with_visibility(self, visibility):
        return LabelVolume(self.spec, self.labels, visibility)


def depth_to_points(depth, cam):
    """Back-project every valid pixel to a world point, shape (N, 3).

    Pixel ``(u, v)`` is column ``u``, row ``v``.
    """
    if cam.width is not None and (cam.width, cam.height) != (depth.width, depth.height):
        raise InvalidInputError("camera and depth map sizes differ")
    v, u = np.nonzero(depth.mask)
    z = depth.values[v, u]
    x = (u - cam.cx) * z / cam.fx
    y = (v - cam.cy) * z / cam.fy
    return cam.to_world(np.stack([x, y, z], axis=1))


def _zbuffer(points, cam):
    W, H = cam.width, cam.height
    zbuf = np.full((H, W), np.inf)
    u, v, z = cam.project(points)
    ui, vi = np.rint(u), np.rint(v)
    ok = (z > 0) & (ui >= 0) & (ui < W) & (vi >= 0) & (vi < H)
    np.minimum.at(zbuf, (vi[ok].astype(np.int64), ui[ok].astype(np.int64)), z[ok])
    return zbuf


def build_tsdf(points, cam, spec=GridSpec(), trunc=DEFAULT_TRUNCATION):
    """Truncated signed distance to the observed surface points.

    Visibility comes from a z-buffer of the points rendered through ``cam``:
    a voxel whose center lies behind the first surface along its pixel ray is
    occluded and gets a negative distance. Voxels that contain a surface
    point are flagged surface; voxels projecting outside the image or onto a
    pixel with no surface are outside the frustum.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise InvalidInputError("TSDF undefined for an empty surface")
    if trunc < spec.voxel_size:
        raise InvalidInputError("truncation must be at least one voxel")
    if cam.width is None or cam.height is None:
        raise InvalidInputError("camera image size required for frustum test")

    centers = spec.voxel_centers().reshape(-1, 3)
    zbuf = _zbuffer(points, cam)
    u, v, z = cam.project(centers)
    ui, vi = np.rint(u), np.rint(v)
    inside = (z > 0) & (ui >= 0) & (ui < cam.width) & (vi >= 0) & (vi < cam.height)
    surf_z = np.full(len(centers), np.inf)
    surf_z[inside] = zbuf[vi[inside].astype(np.int64), ui[inside].astype(np.int64)]
    in_frustum = inside & np.isfinite(surf_z)

    surface = np.zeros(spec.dims, bool)
    idx = spec.index_of(points)
    idx = idx[spec.in_bounds(idx)]
    surface[tuple(idx.T)] = True
    surface = surface.reshape(-1)

    dist, _ = cKDTree(points).query(centers, distance_upper_bound=trunc)
    d = np.minimum(dist, trunc)

    occluded = in_frustum & ~surface & (z > surf_z)
    free = in_frustum & ~surface & ~occluded
    d[occluded] = -d[occluded]

    vis = np.full(len(centers), Visibility.OUTSIDE, np.uint8)
    vis[free] = Visibility.FREE
    vis[occluded] = Visibility.OCCLUDED
    vis[surface] = Visibility.SURFACE
    return TsdfVolume(spec, d.reshape(spec.dims), vis.reshape(spec.dims))


def project_semantics(seg, depth, cam, spec=GridSpec()):
    """Accumulate per-pixel class confidences into the voxels their rays hit.

    ``seg`` has shape (H, W, C). Touched voxels are renormalized to sum 1;
    untouched voxels stay all-zero.
    """
    seg = np.asarray(seg, dtype=np.float64)
    if seg.ndim != 3 or seg.shape[:2] != depth.values.shape:
        raise InvalidInputError("segmentation and depth dimensions differ")
    C = seg.shape[2]
    pts = depth_to_points(depth, cam)
    v, u = np.nonzero(depth.mask)
    conf = seg[v, u]
    idx = spec.index_of(pts)
    keep = spec.in_bounds(idx)
    flat = np.ravel_multi_index(tuple(idx[keep].T), spec.dims)
    acc = np.zeros((spec.num_voxels, C + 1))
    for c in range(C):
        acc[:, c + 1] = np.bincount(flat, weights=conf[keep, c], minlength=spec.num_voxels)
    total = acc.sum(axis=1, keepdims=True)
    np.divide(acc, total, out=acc, where=total > 0)
    return SemanticVolume(spec, acc.reshape(spec.dims + (C + 1,)))


def argmax_labels(sem, occ_threshold=0.0, visibility=None):
    """Hard labels from confidences; weak voxels (max < threshold) become empty.

    Ties resolve to the lowest class id.
    """
    conf = sem.conf
    labels = np.argmax(conf, axis=-1)
    labels[conf.max(axis=-1) < occ_threshold] = 0
    if visibility is not None and hasattr(visibility, "visibility"):
        visibility = visibility.visibility
    return LabelVolume(sem.spec, labels, visibility)
