"""Seeded synthetic indoor scenes with exact ground truth.

A scene is a box room (floor, ceiling, three walls, optional windows) with
non-overlapping furniture instances taken from a procedural shape library.
Instances sit on a voxel-aligned lattice, so every template point lands on a
voxel center and the retrieval completer can reproduce the ground truth
exactly when it finds the right template and position.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import classes as K
from .errors import PlacementError
from .instances import ShapeLibrary, TemplateEntry
from .pointgrid import PointCloud
from .volumes import (
    DEFAULT_TRUNCATION,
    CameraModel,
    DepthMap,
    GridSpec,
    LabelVolume,
    build_tsdf,
    depth_to_points,
    project_semantics,
)

DEPTH_INSET = 1e-3


# --- procedural shapes ---------------------------------------------------------------


def _chair():
    a = np.zeros((6, 12, 6), bool)
    for x in (0, 5):
        for z in (0, 5):
            a[x, :5, z] = True
    a[:, 5, :] = True
    a[:, 6:, 5] = True
    return a


def _table(sx, sz):
    a = np.zeros((sx, 9, sz), bool)
    a[:, 8, :] = True
    for x in (0, sx - 1):
        for z in (0, sz - 1):
            a[x, :8, z] = True
    return a


def _bed():
    a = np.zeros((25, 10, 18), bool)
    a[:, :4, :] = True
    a[0, :, :] = True
    return a


def _sofa():
    a = np.zeros((22, 9, 10), bool)
    a[:, :4, :] = True
    a[:, :, 8:] = True
    a[:2, :6, :] = True
    a[-2:, :6, :] = True
    return a


def _tv():
    a = np.zeros((10, 12, 4), bool)
    a[3:7, :7, 0:4] = True
    a[:, 7:, 1] = True
    return a


def _cabinet():
    return np.ones((12, 14, 6), bool)


def _shelf():
    a = np.zeros((10, 20, 4), bool)
    a[:, :, 3] = True
    a[0, :, :] = True
    a[-1, :, :] = True
    for y in (0, 6, 12, 19):
        a[:, y, :] = True
    return a


def _crate():
    return np.ones((3, 3, 3), bool)


def _lamp():
    a = np.zeros((4, 6, 4), bool)
    a[1:3, :4, 1:3] = True
    a[:, 4:, :] = True
    return a


def _rotations(a, n):
    return [np.rot90(a, k, axes=(0, 2)) for k in range(n)]


SHAPE_DEFS = {
    K.CHAIR: [("chair", r) for r in _rotations(_chair(), 4)],
    K.TABLE: [("table", r) for r in _rotations(_table(14, 9), 2)] + [("table_small", _table(8, 8))],
    K.BED: [("bed", r) for r in _rotations(_bed(), 4)],
    K.SOFA: [("sofa", r) for r in _rotations(_sofa(), 4)],
    K.TVS: [("tv", r) for r in _rotations(_tv(), 4)],
    K.FURNITURE: [("cabinet", r) for r in _rotations(_cabinet(), 2)]
    + [("shelf", r) for r in _rotations(_shelf(), 4)],
    K.OBJECTS: [("crate", _crate()), ("lamp", _lamp())],
}


def _shape_entries(voxel_size):
    out = []
    for cid in sorted(SHAPE_DEFS):
        for k, (name, occ) in enumerate(SHAPE_DEFS[cid]):
            dims = np.array(occ.shape)
            cells = np.argwhere(occ)
            canon = (cells + 0.5 - dims / 2) / (dims / 2)
            entry = TemplateEntry(cid, f"{name}{k}", canon, tuple(dims * voxel_size))
            out.append((entry, np.ascontiguousarray(occ)))
    return out


def build_shape_library(voxel_size=0.08):
    """Template library: solid lattices at one point per voxel, in canonical frames."""
    return ShapeLibrary([e for e, _ in _shape_entries(voxel_size)])


# --- scenes --------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneRecipe:
    seed: int = 0
    dims: tuple = (60, 36, 60)
    voxel_size: float = 0.08
    instance_count: tuple = (3, 6)
    instance_classes: tuple = K.INSTANCE_CLASSES
    image_size: tuple = (160, 120)
    hfov_deg: float = 70.0
    seg_noise: float = 0.0
    window_prob: float = 0.7
    max_retries: int = 200
    near_clearance: int = 14  # voxels kept free in front of the camera
    trunc: float = DEFAULT_TRUNCATION

    def __post_init__(self):
        lo, hi = self.instance_count
        if lo < 0 or hi < lo:
            raise ValueError("instance_count must be a non-negative (min, max) range")

    @property
    def spec(self):
        return GridSpec(self.dims, self.voxel_size)

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass(frozen=True, eq=False)
class SceneInstance:
    id: int
    class_id: int
    template: str
    center: tuple
    size: tuple
    points: np.ndarray  # canonical
    voxels: np.ndarray  # (K, 3) gt voxel indices

    def world_points(self):
        return np.asarray(self.points) * np.asarray(self.size) / 2 + np.asarray(self.center)


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    recipe: SceneRecipe
    gt: LabelVolume
    instances: list
    depth: DepthMap
    seg2d: np.ndarray
    cam: CameraModel
    inputs: tuple = field(default=None, repr=False)

    @property
    def spec(self):
        return self.gt.spec


def _build_shell(rng, dims, window_prob):
    X, Y, Z = dims
    lab = np.zeros(dims, np.uint8)
    lab[:, 0, :] = K.FLOOR
    lab[:, Y - 1, :] = K.CEILING
    lab[0, 1:Y - 1, :] = K.WALL
    lab[X - 1, 1:Y - 1, :] = K.WALL
    lab[:, 1:Y - 1, Z - 1] = K.WALL
    if rng.random() < window_prob:
        w, h = rng.integers(8, 20), rng.integers(8, 14)
        x0, y0 = rng.integers(4, X - 4 - w), rng.integers(8, Y - 4 - h)
        lab[x0:x0 + w, y0:y0 + h, Z - 1] = K.WINDOW
    if rng.random() < window_prob / 2:
        w, h = rng.integers(8, 16), rng.integers(8, 14)
        z0, y0 = rng.integers(16, Z - 4 - w), rng.integers(8, Y - 4 - h)
        lab[rng.choice([0, X - 1]), y0:y0 + h, z0:z0 + w] = K.WINDOW
    return lab


def _place_instances(rng, lab, recipe, shapes):
    X, Y, Z = recipe.dims
    lo, hi = recipe.instance_count
    n = int(rng.integers(lo, hi + 1))
    taken = np.zeros(recipe.dims, bool)
    out = []
    by_class = {}
    for e, occ in shapes:
        by_class.setdefault(e.class_id, []).append((e, occ))
    def find_spot(occ):
        sx, sy, sz = occ.shape
        if X - 2 - sx < 2 or Z - 2 - sz < recipe.near_clearance or sy + 2 > Y - 1:
            return None
        for _ in range(recipe.max_retries):
            x0 = int(rng.integers(2, X - 2 - sx + 1))
            z0 = int(rng.integers(recipe.near_clearance, Z - 2 - sz + 1))
            box = (slice(x0 - 1, x0 + sx + 1), slice(1, 1 + sy + 1), slice(z0 - 1, z0 + sz + 1))
            if not taken[box].any():
                return x0, z0, box
        return None

    all_shapes = sorted(shapes, key=lambda s: int(s[1].sum()))
    for k in range(n):
        cid = int(rng.choice(recipe.instance_classes))
        entry, occ = by_class[cid][int(rng.integers(len(by_class[cid])))]
        spot = find_spot(occ)
        if spot is None:
            # crowded room: fall back to the smallest shapes that still fit
            for entry, occ in all_shapes:
                if entry.class_id in recipe.instance_classes:
                    spot = find_spot(occ)
                    if spot is not None:
                        cid = entry.class_id
                        break
        if spot is None:
            if k >= lo:
                break
            raise PlacementError(
                f"recipe seed={recipe.seed}: no free spot for instance {k} ({K.CLASS_NAMES[cid]})"
            )
        x0, z0, box = spot
        taken[box] = True
        vox = np.argwhere(occ) + np.array([x0, 1, z0])
        lab[tuple(vox.T)] = cid
        corner = np.array([x0, 1, z0])
        center = (corner + np.array(occ.shape) / 2) * recipe.voxel_size
        out.append(SceneInstance(k, cid, entry.name, tuple(center), entry.size, entry.points, vox))
    return out


def _camera(rng, recipe):
    W, H = recipe.image_size
    f = (W / 2) / np.tan(np.radians(recipe.hfov_deg) / 2)
    X, Y, Z = recipe.dims
    vs = recipe.voxel_size
    pos = np.array([X * vs / 2 + rng.uniform(-0.6, 0.6), rng.uniform(1.3, 1.7), 0.2])
    yaw, pitch = rng.uniform(-0.25, 0.25), rng.uniform(0.25, 0.4)
    fwd = np.array([np.sin(yaw) * np.cos(pitch), -np.sin(pitch), np.cos(yaw) * np.cos(pitch)])
    right = np.cross(fwd, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.column_stack([right, down, fwd])
    return CameraModel(f, f, (W - 1) / 2, (H - 1) / 2, R, pos, W, H)


def raycast(labels, spec, origin, directions):
    """First occupied voxel along each ray (Amanatides-Woo traversal).

    Returns ``(t_entry, label)``; ``t_entry`` is the ray parameter where the
    hit voxel is entered (inf and 0 when nothing is hit).
    """
    D = np.asarray(directions, dtype=np.float64)
    n = len(D)
    o = np.asarray(origin, dtype=np.float64)
    vs = spec.voxel_size
    org = np.asarray(spec.origin)
    dims = np.asarray(spec.dims)
    idx = np.tile(spec.index_of(o[None])[0], (n, 1))
    step = np.where(D > 0, 1, np.where(D < 0, -1, 0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t_delta = np.where(D != 0, vs / np.abs(D), np.inf)
        bound = org + (idx + (step > 0)) * vs
        t_max = np.where(D != 0, (bound - o) / D, np.inf)
    t_cur = np.zeros(n)
    t_hit = np.full(n, np.inf)
    hit_label = np.zeros(n, np.uint8)
    active = np.ones(n, bool)
    for _ in range(int(dims.sum()) + 4):
        inb = active & np.all((idx >= 0) & (idx < dims), axis=1)
        active &= inb
        if not active.any():
            break
        a = np.nonzero(active)[0]
        lab = labels[idx[a, 0], idx[a, 1], idx[a, 2]]
        h = lab > 0
        t_hit[a[h]] = t_cur[a[h]]
        hit_label[a[h]] = lab[h]
        active[a[h]] = False
        a = a[~h]
        ax = np.argmin(t_max[a], axis=1)
        t_cur[a] = t_max[a, ax]
        idx[a, ax] += step[a, ax]
        t_max[a, ax] += t_delta[a, ax]
    return t_hit, hit_label


def pixel_rays(cam):
    """World ray directions for every pixel, scaled so the ray parameter is camera depth."""
    v, u = np.mgrid[0:cam.height, 0:cam.width]
    d_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones(u.shape)], -1)
    return d_cam.reshape(-1, 3) @ cam.rotation.T


def _render(lab, spec, cam, rng, noise, num_classes):
    dirs = pixel_rays(cam)
    t_hit, hit = raycast(lab, spec, cam.translation, dirs)
    valid = np.isfinite(t_hit)
    depth = np.where(valid, t_hit + DEPTH_INSET, 0.0).reshape(cam.height, cam.width)
    hit = hit.astype(np.int64)
    if noise > 0:
        flip = valid & (rng.random(len(hit)) < noise)
        other = rng.integers(1, num_classes, size=len(hit))
        hit = np.where(flip, np.where(other >= hit, other + 1, other), hit)
    seg = np.zeros((len(hit), num_classes), np.float32)
    seg[valid, hit[valid] - 1] = 1.0
    return DepthMap(depth, valid.reshape(depth.shape)), seg.reshape(cam.height, cam.width, num_classes)


def occlude(scene):
    """TSDF and projected semantic input volumes from the rendered views."""
    if scene.inputs is not None:
        return scene.inputs
    pts = depth_to_points(scene.depth, scene.cam)
    tsdf = build_tsdf(pts, scene.cam, scene.spec, scene.recipe.trunc)
    sem = project_semantics(scene.seg2d, scene.depth, scene.cam, scene.spec)
    return tsdf, sem


def generate(recipe=SceneRecipe(), library_entries=None):
    """Build one scene. Same recipe, same bytes."""
    rng = np.random.default_rng(recipe.seed)
    spec = recipe.spec
    shapes = library_entries or _shape_entries(recipe.voxel_size)
    lab = _build_shell(rng, recipe.dims, recipe.window_prob)
    instances = _place_instances(rng, lab, recipe, shapes)
    cam = _camera(rng, recipe)
    depth, seg = _render(lab, spec, cam, rng, recipe.seg_noise, K.NUM_CLASSES)
    scene = SyntheticScene(recipe, LabelVolume(spec, lab), instances, depth, seg, cam)
    tsdf, sem = occlude(scene)
    return replace(scene, gt=scene.gt.with_visibility(tsdf.visibility), inputs=(tsdf, sem))


# --- bundles -------------------------------------------------------------------------


def write_bundle(scene, directory):
    """Scene bundle: SISV volumes, per-instance PLY shapes and ``manifest.json``."""
    from .io import save_labels, save_semantic, save_tsdf, write_ply

    d = Path(directory)
    (d / "instances").mkdir(parents=True, exist_ok=True)
    tsdf, sem = occlude(scene)
    save_labels(d / "gt.sisv", scene.gt)
    save_tsdf(d / "tsdf.sisv", tsdf)
    save_semantic(d / "vs0.sisv", sem)
    np.save(d / "depth.npy", scene.depth.values.astype(np.float32))
    np.save(d / "seg2d.npy", scene.seg2d.astype(np.float32))
    inst_meta = []
    for inst in scene.instances:
        fname = f"instances/{inst.id:03d}_{K.CLASS_NAMES[inst.class_id]}.ply"
        write_ply(d / fname, PointCloud(inst.points, labels=np.full(len(inst.points), inst.class_id)))
        inst_meta.append({
            "id": inst.id, "class_id": inst.class_id, "template": inst.template,
            "center": list(inst.center), "size": list(inst.size), "file": fname,
        })
    files = ["gt.sisv", "tsdf.sisv", "vs0.sisv", "depth.npy", "seg2d.npy"] + [m["file"] for m in inst_meta]
    manifest = {
        "format": "sisc-bundle/1",
        "recipe": scene.recipe.to_dict(),
        "grid": scene.spec.to_dict(),
        "camera": scene.cam.to_dict(),
        "instances": inst_meta,
        "checksums": {f: hashlib.sha256((d / f).read_bytes()).hexdigest() for f in files},
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d / "manifest.json"


@dataclass(frozen=True, eq=False)
class Bundle:
    path: Path
    gt: LabelVolume
    tsdf: object
    vs0: object
    instances: list
    manifest: dict


def read_bundle(directory, verify=True):
    from .errors import FormatError
    from .io import load_labels, load_semantic, load_tsdf, read_ply, read_sisv

    d = Path(directory)
    mpath = d / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise FormatError(mpath, 0, "bundle manifest missing")
    except json.JSONDecodeError as exc:
        raise FormatError(mpath, exc.pos, f"bad JSON: {exc.msg}")
    if verify:
        for f, digest in manifest.get("checksums", {}).items():
            p = d / f
            if not p.exists():
                raise FormatError(p, 0, "file listed in manifest is missing")
            if hashlib.sha256(p.read_bytes()).hexdigest() != digest:
                if p.suffix == ".sisv":
                    read_sisv(p)  # pinpoints structural damage when there is any
                raise FormatError(p, 0, "checksum mismatch")
    insts = []
    for m in manifest["instances"]:
        pts = read_ply(d / m["file"]).points
        center, size = np.asarray(m["center"]), np.asarray(m["size"])
        spec = GridSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in manifest["grid"].items()})
        world = pts * size / 2 + center
        vox = np.unique(spec.index_of(world), axis=0)
        insts.append(SceneInstance(m["id"], m["class_id"], m["template"], tuple(center),
                                   tuple(size), pts, vox))
    return Bundle(d, load_labels(d / "gt.sisv"), load_tsdf(d / "tsdf.sisv"),
                  load_semantic(d / "vs0.sisv"), insts, manifest)
