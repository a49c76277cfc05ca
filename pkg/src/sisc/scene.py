"""Scene-level completion, instance-to-scene merge and the scene loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .pointgrid import voxelize_instance_to_scene
from .volumes import SemanticVolume, Visibility

DEFAULT_DIFFUSION_STEPS = 3
LOG_EPS = 1e-12


def _check_specs(tsdf, sem):
    if tsdf.spec != sem.spec:
        raise InvalidInputError(f"grid specs differ: {tsdf.spec} vs {sem.spec}")


def _neighbor_counts(onehot):
    """Per-class count of labelled 6-neighbours, shape like ``onehot``."""
    counts = np.zeros(onehot.shape, np.int16)
    for axis in range(3):
        sl_lo = [slice(None)] * 4
        sl_hi = [slice(None)] * 4
        sl_lo[axis] = slice(0, -1)
        sl_hi[axis] = slice(1, None)
        counts[tuple(sl_lo)] += onehot[tuple(sl_hi)]
        counts[tuple(sl_hi)] += onehot[tuple(sl_lo)]
    return counts


def complete_scene_heuristic(tsdf, sem, max_steps=DEFAULT_DIFFUSION_STEPS, free_seeds=True):
    """Deterministic stand-in for the learned scene completer.

    Surface and occluded voxels that already carry confidences keep them.
    Visible free space becomes empty. The remaining occluded (or unlabelled
    surface) voxels take the majority label of their labelled 6-neighbours,
    one ring per step, for at most ``max_steps`` rings; anything still
    unreached is empty. With ``free_seeds`` visible free space seeds the
    empty label into the diffusion as well.
    """
    _check_specs(tsdf, sem)
    conf = sem.conf
    n_ch = conf.shape[-1]
    vis = tsdf.visibility
    ev = sem.evidence
    free = vis == Visibility.FREE

    out = np.zeros(conf.shape, np.float32)
    keep = ev & ~free
    out[keep] = conf[keep]
    label = np.full(vis.shape, -1, np.int64)
    label[keep] = np.argmax(conf[keep], axis=-1)
    label[free] = 0 if free_seeds else -2

    target = ((vis == Visibility.OCCLUDED) | (vis == Visibility.SURFACE)) & ~ev
    ch = np.arange(n_ch)
    for _ in range(max_steps):
        pending = target & (label == -1)
        if not pending.any():
            break
        onehot = (label[..., None] == ch).astype(np.int16)
        counts = _neighbor_counts(onehot)
        has = counts.sum(-1) > 0
        grow = pending & has
        if not grow.any():
            break
        label[grow] = np.argmax(counts[grow], axis=-1)

    grown = target & (label >= 0)
    out[grown] = 0
    out[grown, label[grown]] = 1.0
    unassigned = out.sum(-1) == 0
    out[unassigned, 0] = 1.0
    return SemanticVolume(sem.spec, out)


class HeuristicSceneCompleter:
    name = "heuristic"

    def __init__(self, max_steps=DEFAULT_DIFFUSION_STEPS, free_seeds=True):
        self.max_steps = max_steps
        self.free_seeds = free_seeds

    def complete(self, tsdf, sem):
        return complete_scene_heuristic(tsdf, sem, self.max_steps, self.free_seeds)

    def fingerprint(self):
        return f"{self.name}:{self.max_steps}:{self.free_seeds}"


class PassthroughSceneCompleter:
    """Normalized input; voxels without evidence become empty."""

    name = "passthrough"

    def complete(self, tsdf, sem):
        _check_specs(tsdf, sem)
        out = np.array(sem.conf, np.float32)
        s = out.sum(-1)
        np.divide(out, s[..., None], out=out, where=s[..., None] > 0)
        out[s == 0, 0] = 1.0
        return SemanticVolume(sem.spec, out)

    def fingerprint(self):
        return self.name


class OracleSceneCompleter:
    """Returns the ground truth one-hot. Testing only."""

    name = "oracle"

    def __init__(self, gt, num_classes):
        self.gt = gt
        self.num_classes = num_classes

    def complete(self, tsdf, sem):
        _check_specs(tsdf, sem)
        return SemanticVolume.from_labels(self.gt.labels, sem.spec, self.num_classes)

    def fingerprint(self):
        return f"{self.name}:{self.num_classes}"


SCENE_COMPLETERS = ("heuristic", "oracle", "passthrough")


def make_scene_completer(name, gt=None, num_classes=None, **kwargs):
    if name == "heuristic":
        return HeuristicSceneCompleter(**kwargs)
    if name == "passthrough":
        return PassthroughSceneCompleter()
    if name == "oracle":
        if gt is None:
            raise InvalidInputError("oracle scene completer needs ground truth")
        return OracleSceneCompleter(gt, num_classes)
    raise InvalidInputError(f"unknown scene completer {name!r}")


@dataclass(frozen=True, eq=False)
class MergePatch:
    """Voxel writes from completed instances; may contain conflicting entries.

    ``classes`` may hold 0 for voxels an instance declares free inside its
    box; such entries lose every conflict against occupied ones.
    """

    indices: np.ndarray  # (K, 3)
    classes: np.ndarray  # (K,)
    objectness: np.ndarray  # (K,)
    instance_ids: np.ndarray  # (K,)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3), np.int64), np.zeros(0, np.int64),
                   np.zeros(0), np.zeros(0, np.int64))

    def __len__(self):
        return len(self.classes)

    def resolved(self):
        """One entry per voxel: occupied beats free, then higher objectness,
        then lower instance id."""
        if len(self) == 0:
            return self
        order = np.lexsort((self.instance_ids, -self.objectness, self.classes == 0))
        idx = self.indices[order]
        _, first = np.unique(idx, axis=0, return_index=True)
        pick = order[np.sort(first)]
        return MergePatch(self.indices[pick], self.classes[pick],
                          self.objectness[pick], self.instance_ids[pick])


def build_patch(instances, spec, carve_free=False, base=None, carve_margin=0, protect=None):
    """Voxelize completed instances into a merge patch.

    With ``carve_free``, voxels inside an instance's box (grown by
    ``carve_margin`` voxels) that it does not occupy are written as empty,
    except where ``base`` carries evidence or ``protect`` is set.
    """
    dims = np.asarray(spec.dims)
    idx, cls, obj, ids = [], [], [], []
    for k, inst in enumerate(instances):
        occ, _ = voxelize_instance_to_scene(inst.world_points(), inst.class_id, spec)
        idx.append(occ)
        cls.append(np.full(len(occ), inst.class_id))
        obj.append(np.full(len(occ), inst.objectness))
        ids.append(np.full(len(occ), k))
        if carve_free:
            c = np.asarray(inst.frame.center)
            half = np.asarray(inst.frame.half_extents) + carve_margin * spec.voxel_size
            lo = np.clip(spec.index_of(c - half), 0, dims - 1)
            hi = np.clip(spec.index_of(c + half), 0, dims - 1)
            box = np.stack(np.meshgrid(*[np.arange(lo[a], hi[a] + 1) for a in range(3)],
                                       indexing="ij"), -1).reshape(-1, 3)
            box = box[np.all(np.abs(spec.center_of(box) - c) <= half, axis=1)]
            occ_set = np.zeros(spec.dims, bool)
            occ_set[tuple(occ.T)] = True
            freev = box[~occ_set[tuple(box.T)]]
            if base is not None:
                freev = freev[~base.evidence[tuple(freev.T)]]
            if protect is not None:
                freev = freev[~protect[tuple(freev.T)]]
            idx.append(freev)
            cls.append(np.zeros(len(freev), np.int64))
            obj.append(np.full(len(freev), inst.objectness))
            ids.append(np.full(len(freev), k))
    if not idx:
        return MergePatch.empty()
    return MergePatch(np.concatenate(idx).astype(np.int64).reshape(-1, 3),
                      np.concatenate(cls).astype(np.int64),
                      np.concatenate(obj).astype(np.float64),
                      np.concatenate(ids).astype(np.int64))


def merge_instances(sem, patch):
    """Write one-hot confidences at the resolved patch voxels; nothing else changes."""
    if len(patch) == 0:
        return sem
    p = patch.resolved()
    spec = sem.spec
    if not np.all(spec.in_bounds(p.indices)):
        raise InvalidInputError("patch index outside the grid")
    if np.any((p.classes < 0) | (p.classes > sem.num_classes)):
        raise InvalidInputError("patch class id out of range")
    conf = np.array(sem.conf)
    sel = tuple(p.indices.T)
    conf[sel] = 0
    conf[sel + (p.classes,)] = 1.0
    return SemanticVolume(spec, conf)


def loss_scene(pred, gt, return_grad=False):
    """Mean voxel-wise cross entropy over in-frustum ground-truth voxels.

    ``pred`` is a SemanticVolume or a raw ``dims + (C + 1,)`` probability
    array (kept at full precision). The gradient is with respect to those
    probabilities.
    """
    if isinstance(pred, SemanticVolume):
        if pred.spec != gt.spec:
            raise InvalidInputError("grid specs differ")
        conf = pred.conf
    else:
        conf = np.asarray(pred, np.float64)
        if conf.shape[:3] != gt.spec.dims:
            raise InvalidInputError("prediction does not match the ground truth grid")
    mask = np.ones(gt.spec.dims, bool) if gt.visibility is None else gt.visibility != Visibility.OUTSIDE
    n = int(mask.sum())
    grad = np.zeros(conf.shape, np.float64)
    if n == 0:
        return (0.0, grad) if return_grad else 0.0
    g = gt.labels[mask].astype(np.int64)
    p = conf[mask].astype(np.float64)[np.arange(n), g]
    val = float(-np.log(np.maximum(p, LOG_EPS)).sum() / n)
    if not return_grad:
        return val
    sub = np.zeros((n, conf.shape[-1]))
    sub[np.arange(n), g] = -1.0 / (np.maximum(p, LOG_EPS) * n)
    grad[mask] = sub
    return val, grad
