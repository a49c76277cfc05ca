"""Instance proposals from a completed scene: sampling, votes, clustering,
box fitting, assignment, NMS, training selection and the detection losses.

The learned vote/proposal heads are replaced by deterministic stand-ins: a
class-aware box-kernel mean shift predicts votes, and boxes come from the
cluster mean plus per-class size templates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .boxes import pairwise_iou
from .classes import INSTANCE_CLASSES
from .errors import EmptySceneError, InvalidInputError

POSITIVE, NEGATIVE, IGNORED = 1, 0, -1
SMOOTH_L1_DELTA = 1.0
PROB_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 0.5
    lambda3: float = 0.1

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise InvalidInputError("loss weights must be non-negative")


@dataclass(frozen=True)
class SelectionConfig:
    sigma: float = 0.3
    beta: float = 0.5
    k: int = 16
    pos_radius: float = 0.3
    neg_radius: float = 0.6
    nms_iou: float = 0.25
    cluster_radius: float = 0.3

    def __post_init__(self):
        if not self.sigma > 0:
            raise InvalidInputError("sigma must be positive")
        if not 0 <= self.beta <= 1:
            raise InvalidInputError("beta must be in [0, 1]")
        if self.k < 1:
            raise InvalidInputError("K must be >= 1")
        if not self.pos_radius < self.neg_radius:
            raise InvalidInputError("pos_radius must be below neg_radius")
        if not 0 < self.nms_iou < 1:
            raise InvalidInputError("nms_iou must be in (0, 1)")


@dataclass(frozen=True, eq=False)
class ScenePointSample:
    points: np.ndarray  # (M, 3) world
    conf: np.ndarray  # (M, C), rows sum to 1
    height: np.ndarray  # (M,)
    voxels: np.ndarray  # (M, 3) source voxel index

    def __len__(self):
        return len(self.points)

    @property
    def class_ids(self):
        return np.argmax(self.conf, axis=1) + 1


@dataclass(frozen=True, eq=False)
class VoteSet:
    offsets: np.ndarray
    gt_offsets: np.ndarray | None = None
    foreground: np.ndarray | None = None
    instance_ids: np.ndarray | None = None

    def __post_init__(self):
        off = np.asarray(self.offsets, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(off)):
            raise InvalidInputError("vote offsets must be finite")
        object.__setattr__(self, "offsets", off)
        if self.foreground is None:
            object.__setattr__(self, "foreground", np.ones(len(off), bool))


@dataclass(frozen=True)
class GtInstance:
    """Ground-truth object. ``voxels`` (K, 3) decides point membership when given,
    otherwise membership is box containment."""

    id: int
    class_id: int
    center: tuple
    size: tuple
    voxels: np.ndarray | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True, eq=False)
class Proposal:
    center: np.ndarray
    size: np.ndarray
    size_class: int
    size_residual: np.ndarray
    objectness: float
    class_conf: np.ndarray
    cluster_id: int = -1

    def __post_init__(self):
        size = np.asarray(self.size, dtype=np.float64)
        if np.any(size <= 0):
            raise InvalidInputError("proposal size must be positive")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "size_residual", np.asarray(self.size_residual, dtype=np.float64))
        object.__setattr__(self, "class_conf", np.asarray(self.class_conf, dtype=np.float64))
        object.__setattr__(self, "objectness", float(np.clip(self.objectness, 0.0, 1.0)))

    @property
    def class_id(self):
        return int(np.argmax(self.class_conf)) + 1


# --- sampling and votes -------------------------------------------------------


def sample_scene_points(sem, labels, m, seed=0, instance_classes=INSTANCE_CLASSES):
    """Uniformly sample ``m`` voxels carrying an instance-class label."""
    if m < 1:
        raise InvalidInputError("M must be >= 1")
    occ = np.isin(labels.labels, instance_classes)
    idx = np.argwhere(occ)
    if len(idx) == 0:
        raise EmptySceneError("no occupied instance voxels to sample")
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(idx), size=m, replace=len(idx) < m)
    vox = idx[np.sort(pick)]
    conf = sem.class_conf[tuple(vox.T)].astype(np.float64)
    s = conf.sum(axis=1, keepdims=True)
    conf = np.divide(conf, s, out=np.zeros_like(conf), where=s > 0)
    # voxels without class evidence fall back to their hard label
    lab = labels.labels[tuple(vox.T)].astype(np.int64)
    bare = s[:, 0] == 0
    conf[bare, lab[bare] - 1] = 1.0
    spec = labels.spec
    return ScenePointSample(
        points=spec.center_of(vox),
        conf=conf,
        height=vox[:, 1] * spec.voxel_size,
        voxels=vox,
    )


def _membership(sample, gt_instances):
    inst = np.full(len(sample), -1, np.int64)
    for k, g in enumerate(gt_instances):
        if g.voxels is not None and len(g.voxels):
            keys = {tuple(v) for v in np.asarray(g.voxels).tolist()}
            hit = np.array([tuple(v) in keys for v in sample.voxels.tolist()], bool)
        else:
            lo = np.asarray(g.center) - np.asarray(g.size) / 2
            hi = np.asarray(g.center) + np.asarray(g.size) / 2
            hit = np.all((sample.points >= lo) & (sample.points <= hi), axis=1)
        inst[hit & (inst < 0)] = k
    return inst


def compute_gt_offsets(sample, gt_instances):
    """Ground-truth votes: offset from each foreground point to its instance center."""
    inst = _membership(sample, gt_instances)
    fg = inst >= 0
    gt = np.zeros((len(sample), 3))
    centers = np.array([g.center for g in gt_instances], dtype=np.float64).reshape(-1, 3)
    gt[fg] = centers[inst[fg]] - sample.points[fg]
    return VoteSet(offsets=gt.copy(), gt_offsets=gt, foreground=fg, instance_ids=inst)


def predict_votes(sample, size_templates, iters=8):
    """Box-kernel mean shift within each class; the kernel is the class template box.

    Stands in for a learned vote head: every point moves to the centroid of
    same-class points inside a template-sized window around its estimate.
    """
    pts = sample.points
    cls = sample.class_ids
    est = pts.copy()
    for c in np.unique(cls):
        sel = np.nonzero(cls == c)[0]
        half = np.asarray(size_templates[int(c)], dtype=np.float64) / 2
        P = pts[sel]
        # box window == unit Chebyshev ball in template-scaled coordinates
        tree = cKDTree(P / half)
        E = P.copy()
        for _ in range(iters):
            # identical estimates share a window, so shift each distinct one once
            U, inv = np.unique(E, axis=0, return_inverse=True)
            inside = cKDTree(U / half).sparse_distance_matrix(
                tree, 1.0, p=np.inf, output_type="coo_matrix").tocsr()
            inside.data[:] = 1.0
            n_in = np.asarray(inside.sum(axis=1)).ravel()
            U_new = np.where(n_in[:, None] > 0, inside @ P / np.maximum(n_in, 1)[:, None], U)
            E_new = U_new[inv.ravel()]
            if np.allclose(E_new, E):
                break
            E = E_new
        est[sel] = E
    return VoteSet(offsets=est - pts, foreground=np.ones(len(pts), bool))


def cluster_votes(sample, votes, radius=0.3):
    """Greedy radius grouping of voted positions, densest seeds first.

    Returns a list of index arrays into the sample; each point joins at most
    one cluster and background points join none.
    """
    if not radius > 0:
        raise InvalidInputError("cluster radius must be positive")
    fg = np.nonzero(votes.foreground)[0]
    if len(fg) == 0:
        return []
    q = sample.points[fg] + votes.offsets[fg]
    # votes collapse onto few distinct positions; group those, weighted by multiplicity
    U, inv, mult = np.unique(q, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    tree = cKDTree(U)
    nbrs = tree.query_ball_point(U, r=radius)
    density = np.array([mult[n].sum() for n in nbrs])
    order = np.argsort(-density, kind="stable")
    taken = np.zeros(len(U), bool)
    clusters = []
    for i in order:
        if taken[i]:
            continue
        group = np.array([j for j in nbrs[i] if not taken[j]], np.int64)
        taken[group] = True
        clusters.append(fg[np.nonzero(np.isin(inv, group))[0]])
    return clusters


def fit_proposals(clusters, sample, votes, size_templates, expected_population=None,
                  voxel_size=0.08, scale_range=(0.5, 1.5), min_points=1):
    """One axis-aligned box per cluster.

    center: mean voted position; class: argmax of mean member confidence;
    size: class template scaled per axis by the observed member extent
    (clipped to ``scale_range``); objectness: members / expected members.
    """
    out = []
    for cid, members in enumerate(clusters):
        if len(members) < min_points:
            continue
        q = sample.points[members] + votes.offsets[members]
        conf = sample.conf[members].mean(axis=0)
        cls = int(np.argmax(conf)) + 1
        template = np.asarray(size_templates[cls], dtype=np.float64)
        pts = sample.points[members]
        extent = pts.max(axis=0) - pts.min(axis=0) + voxel_size
        size = template * np.clip(extent / template, *scale_range)
        if expected_population is None:
            obj = 1.0
        else:
            obj = min(1.0, len(members) / max(expected_population[cls], 1e-9))
        out.append(Proposal(
            center=q[0] + (q - q[0]).mean(axis=0),  # exact when all members coincide
            size=size,
            size_class=cls,
            size_residual=size - template,
            objectness=obj,
            class_conf=conf,
            cluster_id=cid,
        ))
    return out


# --- assignment, NMS, selection -------------------------------------------------


def _center_dists(proposals, gt_centers):
    P = np.array([p.center for p in proposals], dtype=np.float64).reshape(-1, 3)
    G = np.asarray(gt_centers, dtype=np.float64).reshape(-1, 3)
    if len(G) == 0:
        return np.full(len(P), np.inf), np.full(len(P), -1)
    d = np.linalg.norm(P[:, None] - G[None], axis=2)
    return d.min(axis=1), d.argmin(axis=1)


def assign_proposals(proposals, gt_centers, pos_radius=0.3, neg_radius=0.6):
    """POSITIVE within ``pos_radius`` of a gt center, NEGATIVE beyond
    ``neg_radius``, IGNORED in between."""
    d, _ = _center_dists(proposals, gt_centers)
    out = np.full(len(d), IGNORED, np.int64)
    out[d < pos_radius] = POSITIVE
    out[d > neg_radius] = NEGATIVE
    return out


def nms3d(proposals, iou_threshold=0.25):
    if not 0 < iou_threshold < 1:
        raise InvalidInputError("iou_threshold must be in (0, 1)")
    if not proposals:
        return []
    scores = np.array([p.objectness for p in proposals])
    order = np.argsort(-scores, kind="stable")
    C = np.array([p.center for p in proposals])
    S = np.array([p.size for p in proposals])
    iou = pairwise_iou(C, S, C, S)
    keep = []
    suppressed = np.zeros(len(proposals), bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= iou[i] > iou_threshold
    return [proposals[i] for i in keep]


def select_training_proposals(proposals, gt_centers, cfg=SelectionConfig()):
    d, _ = _center_dists(proposals, gt_centers)
    ok = [i for i, p in enumerate(proposals) if d[i] < cfg.sigma and p.objectness > cfg.beta]
    ok.sort(key=lambda i: -proposals[i].objectness)
    return [proposals[i] for i in ok[: cfg.k]]


# --- losses ----------------------------------------------------------------------


def smooth_l1(x, delta=SMOOTH_L1_DELTA):
    ax = np.abs(x)
    return np.where(ax < delta, 0.5 * x * x / delta, ax - 0.5 * delta)


def smooth_l1_grad(x, delta=SMOOTH_L1_DELTA):
    return np.where(np.abs(x) < delta, x / delta, np.sign(x))


def loss_loc_reg(votes, return_grad=False):
    """Mean L2 norm of vote errors over foreground points (0 when none)."""
    fg = votes.foreground
    n = int(fg.sum())
    grad = np.zeros_like(votes.offsets)
    if n == 0:
        return (0.0, grad) if return_grad else 0.0
    err = votes.offsets[fg] - votes.gt_offsets[fg]
    # scaled norm: tiny errors must not underflow to zero
    m = np.abs(err).max(axis=1)
    norms = m * np.linalg.norm(err / np.where(m > 0, m, 1.0)[:, None], axis=1)
    val = float(norms.sum() / n)
    if not return_grad:
        return val
    safe = np.where(norms > 0, norms, 1.0)[:, None]
    grad[fg] = np.where(norms[:, None] > 0, err / safe, 0.0) / n
    return val, grad


@dataclass(frozen=True, eq=False)
class BoxPrediction:
    center: np.ndarray  # (P, 3)
    size_probs: np.ndarray  # (P, S)
    size_residuals: np.ndarray  # (P, S, 3)


@dataclass(frozen=True, eq=False)
class BoxTarget:
    center: np.ndarray  # (P, 3)
    size_class: np.ndarray  # (P,) index into S
    size_residual: np.ndarray  # (P, 3)


def loss_box(pred, gt, lambda1=0.1, return_grad=False):
    """center smooth-L1 + lambda1 * size cross entropy + size-residual smooth-L1.

    Each term sums over axes and averages over the (positive) proposals.
    Gradients are taken with respect to the prediction arrays.
    """
    P = len(gt.size_class)
    grads = BoxPrediction(
        np.zeros_like(pred.center, dtype=np.float64),
        np.zeros_like(pred.size_probs, dtype=np.float64),
        np.zeros_like(pred.size_residuals, dtype=np.float64),
    )
    if P == 0:
        return (0.0, grads) if return_grad else 0.0
    rows = np.arange(P)
    sc = np.asarray(gt.size_class, np.int64)
    dc = pred.center - gt.center
    center = smooth_l1(dc).sum() / P
    p_true = pred.size_probs[rows, sc]
    size_cls = -np.log(p_true).sum() / P
    dr = pred.size_residuals[rows, sc] - gt.size_residual
    size_reg = smooth_l1(dr).sum() / P
    val = float(center + lambda1 * size_cls + size_reg)
    if not return_grad:
        return val
    grads.center[:] = smooth_l1_grad(dc) / P
    grads.size_probs[rows, sc] = -lambda1 / (p_true * P)
    grads.size_residuals[rows, sc] = smooth_l1_grad(dr) / P
    return val, grads


def loss_obj_cls(objectness, assignment, return_grad=False):
    """Binary cross entropy over positive and negative proposals, normalized by their count."""
    p = np.asarray(objectness, dtype=np.float64)
    a = np.asarray(assignment)
    used = a != IGNORED
    n = int(used.sum())
    grad = np.zeros_like(p)
    if n == 0:
        return (0.0, grad) if return_grad else 0.0
    pos = a == POSITIVE
    neg = a == NEGATIVE
    val = float((-np.log(p[pos]).sum() - np.log1p(-p[neg]).sum()) / n)
    if not return_grad:
        return val
    grad[pos] = -1.0 / (p[pos] * n)
    grad[neg] = 1.0 / ((1 - p[neg]) * n)
    return val, grad


def loss_sem_cls(class_probs, gt_class_index, return_grad=False):
    """Cross entropy over positives; ``gt_class_index`` is 0-based."""
    probs = np.asarray(class_probs, dtype=np.float64)
    P = len(probs)
    grad = np.zeros_like(probs)
    if P == 0:
        return (0.0, grad) if return_grad else 0.0
    rows = np.arange(P)
    t = np.asarray(gt_class_index, np.int64)
    val = float(-np.log(probs[rows, t]).sum() / P)
    if not return_grad:
        return val
    grad[rows, t] = -1.0 / (probs[rows, t] * P)
    return val, grad


def loss_det(parts, weights=LossWeights()):
    """loc_reg + box + lambda2 * obj_cls + lambda3 * sem_cls."""
    return float(
        parts["loc_reg"] + parts["box"]
        + weights.lambda2 * parts["obj_cls"] + weights.lambda3 * parts["sem_cls"]
    )


def detection_loss_parts(proposals, votes, gt_instances, size_templates, weights=LossWeights(),
                         pos_radius=0.3, neg_radius=0.6):
    """Evaluate every detection loss term for deterministic proposals.

    Size classes coincide with semantic classes, so the class confidences
    double as size-class probabilities. Ignored proposals feed no term.
    """
    gt_centers = [g.center for g in gt_instances]
    assign = assign_proposals(proposals, gt_centers, pos_radius, neg_radius)
    _, nearest = _center_dists(proposals, gt_centers)
    pos = np.nonzero(assign == POSITIVE)[0]
    C = max(size_templates)
    templates = np.array([size_templates.get(c, np.ones(3)) for c in range(1, C + 1)], dtype=np.float64)

    probs = np.array([np.clip(proposals[i].class_conf, PROB_EPS, 1.0) for i in pos]).reshape(-1, C)
    probs = probs / probs.sum(axis=1, keepdims=True) if len(probs) else probs
    residuals = np.zeros((len(pos), C, 3))
    for r, i in enumerate(pos):
        residuals[r, :] = proposals[i].size - templates
    gts = [gt_instances[nearest[i]] for i in pos]
    gt_cls = np.array([g.class_id - 1 for g in gts], np.int64)
    target = BoxTarget(
        center=np.array([g.center for g in gts], dtype=np.float64).reshape(-1, 3),
        size_class=gt_cls,
        size_residual=(np.array([g.size for g in gts], dtype=np.float64).reshape(-1, 3)
                       - templates[gt_cls] if len(gts) else np.zeros((0, 3))),
    )
    pred = BoxPrediction(
        center=np.array([proposals[i].center for i in pos]).reshape(-1, 3),
        size_probs=probs,
        size_residuals=residuals,
    )
    obj = np.clip([p.objectness for p in proposals], PROB_EPS, 1 - PROB_EPS)
    return {
        "loc_reg": loss_loc_reg(votes) if votes is not None and votes.gt_offsets is not None else 0.0,
        "box": loss_box(pred, target, weights.lambda1),
        "obj_cls": loss_obj_cls(obj, assign),
        "sem_cls": loss_sem_cls(probs, gt_cls),
    }
