"""On-disk formats: SISV binary volumes and PLY point clouds / meshes.

SISV layout::

    b"SISVOL01"
    <3I dims> <f voxel_size> <3f origin> <I channels> <B dtype> <B sign_convention>
    payload, little endian, channel fastest, then x, then y, then z

dtype 0 is float32, 1 is uint8.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from plyfile import PlyData, PlyElement

from .errors import FormatError
from .pointgrid import PointCloud
from .volumes import (
    SIGN_NEGATIVE_OCCLUDED,
    GridSpec,
    LabelVolume,
    SemanticVolume,
    TsdfVolume,
    Visibility,
)

MAGIC = b"SISVOL01"
_HEADER = struct.Struct("<3If3fIBB")
HEADER_SIZE = len(MAGIC) + _HEADER.size
DTYPE_F32, DTYPE_U8 = 0, 1
_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_U8: np.dtype("u1")}


def write_sisv(path, spec, data, sign_convention=0):
    """Write ``data`` with shape ``dims`` or ``dims + (channels,)``."""
    data = np.asarray(data)
    if data.ndim == 3:
        data = data[..., None]
    if data.shape[:3] != spec.dims:
        raise ValueError("payload does not match grid dims")
    code = DTYPE_U8 if data.dtype == np.uint8 else DTYPE_F32
    payload = np.ascontiguousarray(data.astype(_DTYPES[code]).transpose(2, 1, 0, 3))
    header = _HEADER.pack(*spec.dims, spec.voxel_size, *spec.origin, data.shape[3], code, sign_convention)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(header)
        f.write(payload.tobytes())


def read_sisv(path):
    """Return ``(spec, data (X, Y, Z, channels), sign_convention)``."""
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(path, 0, "bad magic, not a SISV volume")
    if len(raw) < HEADER_SIZE:
        raise FormatError(path, len(raw), "truncated header")
    X, Y, Z, vs, ox, oy, oz, ch, code, sign = _HEADER.unpack_from(raw, len(MAGIC))
    if code not in _DTYPES:
        raise FormatError(path, len(MAGIC) + 28, f"unknown dtype code {code}")
    if min(X, Y, Z, ch) < 1:
        raise FormatError(path, len(MAGIC), "zero-sized dims or channels")
    dt = _DTYPES[code]
    expected = X * Y * Z * ch * dt.itemsize
    body = raw[HEADER_SIZE:]
    if len(body) != expected:
        raise FormatError(path, HEADER_SIZE + min(len(body), expected),
                          f"payload has {len(body)} bytes, expected {expected}")
    data = np.frombuffer(body, dtype=dt).reshape(Z, Y, X, ch).transpose(2, 1, 0, 3)
    spec = GridSpec((X, Y, Z), vs, (ox, oy, oz))
    return spec, np.ascontiguousarray(data), sign


def save_tsdf(path, tsdf):
    data = np.stack([tsdf.d, tsdf.visibility.astype(np.float32)], axis=-1)
    write_sisv(path, tsdf.spec, data.astype(np.float32), SIGN_NEGATIVE_OCCLUDED)


def load_tsdf(path):
    spec, data, sign = read_sisv(path)
    if data.dtype != np.float32 or data.shape[3] != 2 or sign != SIGN_NEGATIVE_OCCLUDED:
        raise FormatError(path, len(MAGIC), "not a TSDF volume")
    return TsdfVolume(spec, data[..., 0], data[..., 1].astype(np.uint8))


def save_semantic(path, sem):
    write_sisv(path, sem.spec, sem.conf.astype(np.float32))


def load_semantic(path):
    spec, data, _ = read_sisv(path)
    if data.dtype != np.float32 or data.shape[3] < 2:
        raise FormatError(path, len(MAGIC), "not a semantic volume")
    return SemanticVolume(spec, data)


def save_labels(path, lab):
    vis = lab.visibility if lab.visibility is not None else np.zeros(lab.spec.dims, np.uint8)
    write_sisv(path, lab.spec, np.stack([lab.labels, vis], axis=-1).astype(np.uint8))


def load_labels(path):
    spec, data, _ = read_sisv(path)
    if data.dtype != np.uint8 or data.shape[3] not in (1, 2):
        raise FormatError(path, len(MAGIC), "not a label volume")
    vis = data[..., 1] if data.shape[3] == 2 else None
    return LabelVolume(spec, data[..., 0], vis)


def load_any(path):
    """Load a SISV file as TSDF, semantic or label volume based on its header."""
    spec, data, sign = read_sisv(path)
    if sign == SIGN_NEGATIVE_OCCLUDED:
        return load_tsdf(path)
    if data.dtype == np.uint8:
        return load_labels(path)
    return SemanticVolume(spec, data)


def write_ply(path, cloud, binary=True):
    """Write points as float32 x/y/z, with an int ``class`` property when labelled."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud).reshape(-1, 3)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    labels = getattr(cloud, "labels", None)
    if labels is not None:
        fields.append(("class", "<i4"))
    arr = np.empty(len(pts), dtype=fields)
    arr["x"], arr["y"], arr["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    if labels is not None:
        arr["class"] = labels
    el = PlyElement.describe(arr, "vertex")
    PlyData([el], text=not binary, byte_order="<").write(str(path))


def read_ply(path):
    try:
        ply = PlyData.read(str(path))
        v = ply["vertex"].data
    except Exception as exc:  # plyfile raises several unrelated types
        raise FormatError(path, 0, f"unreadable PLY: {exc}") from exc
    pts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    names = v.dtype.names
    labels = np.asarray(v["class"]) if "class" in names else None
    return PointCloud(pts, labels=labels)


def write_mesh_ply(path, vertices, faces, colors):
    """ASCII PLY triangle mesh with per-vertex RGB."""
    vert = np.empty(len(vertices), dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                           ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    if len(vertices):
        vert["x"], vert["y"], vert["z"] = vertices.T
        vert["red"], vert["green"], vert["blue"] = np.asarray(colors, np.uint8).T
    face = np.empty(len(faces), dtype=[("vertex_indices", "i4", (3,))])
    if len(faces):
        face["vertex_indices"] = faces
    PlyData([PlyElement.describe(vert, "vertex"), PlyElement.describe(face, "face")],
            text=True).write(str(path))


def write_proposals(path, proposals):
    """One proposal per line: ``class cx cy cz sx sy sz objectness``."""
    lines = []
    for p in proposals:
        vals = [*np.asarray(p.center), *np.asarray(p.size), p.objectness]
        lines.append(f"{p.class_id} " + " ".join(f"{v:.6f}" for v in vals))
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_proposals(path, num_classes=11):
    from .proposals import Proposal

    out = []
    for n, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 8:
            raise FormatError(path, n, f"line {n + 1}: expected 8 fields, got {len(parts)}")
        cls = int(parts[0])
        c, s, obj = np.array(parts[1:4], float), np.array(parts[4:7], float), float(parts[7])
        conf = np.zeros(num_classes)
        conf[cls - 1] = 1.0
        out.append(Proposal(c, s, cls, np.zeros(3), obj, conf))
    return out


_CUBE_CORNERS = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
                          [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]], np.float64)
_CUBE_TRIS = np.array([[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7],
                       [0, 1, 5], [0, 5, 4], [3, 6, 2], [3, 7, 6],
                       [0, 4, 7], [0, 7, 3], [1, 2, 6], [1, 6, 5]], np.int64)


def voxel_mesh(labels, spec, palette=None):
    """One unwelded cube per occupied voxel, in x-major index order.

    Returns ``(vertices (8V, 3), faces (12V, 3), colors (8V, 3) uint8)``.
    """
    from .classes import PALETTE

    palette = np.asarray(PALETTE if palette is None else palette, np.uint8)
    labels = np.asarray(labels)
    vox = np.argwhere(labels > 0)
    n = len(vox)
    corners = np.asarray(spec.origin) + (vox[:, None, :] + _CUBE_CORNERS[None]) * spec.voxel_size
    verts = corners.reshape(-1, 3)
    faces = (_CUBE_TRIS[None] + 8 * np.arange(n)[:, None, None]).reshape(-1, 3)
    cls = labels[tuple(vox.T)].astype(np.int64)
    colors = np.repeat(palette[np.clip(cls, 0, len(palette) - 1)], 8, axis=0)
    return verts, faces, colors


def export_voxel_mesh(path, volume):
    """Write the occupied voxels of a label/semantic volume as a coloured cube mesh."""
    from .volumes import argmax_labels

    if isinstance(volume, SemanticVolume):
        volume = argmax_labels(volume)
    if isinstance(volume, LabelVolume):
        labels = volume.labels
    else:  # TSDF: observed surface only, drawn in the first palette colour
        labels = (volume.visibility == Visibility.SURFACE).astype(np.uint8)
    verts, faces, colors = voxel_mesh(labels, volume.spec)
    write_mesh_ply(path, verts, faces, colors)
    return len(verts), len(faces)
