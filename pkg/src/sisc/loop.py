"""The scene -> instance -> scene refinement loop.

``run_loop`` executes S0 and then ``iterations`` rounds of proposal
generation, instance completion, merge into the projected semantic input and
scene completion. The same completer objects serve every round.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import classes as K
from .errors import CompleterError, EmptySceneError, InvalidInputError, NoPriorError
from .instances import (
    OracleInstanceCompleter,
    PassthroughCompleter,
    ShapePriorCompleter,
    complete_instance_grid,
)
from .metrics import eval_detection, eval_sc, eval_ssc
from .pointgrid import CanonicalFrame, PointCloud, canonicalize
from .proposals import (
    SelectionConfig,
    cluster_votes,
    compute_gt_offsets,
    fit_proposals,
    nms3d,
    predict_votes,
    sample_scene_points,
)
from .scene import build_patch, make_scene_completer, merge_instances
from .volumes import GridSpec, argmax_labels

INSTANCE_COMPLETERS = ("shape-prior", "passthrough", "oracle")


@dataclass(frozen=True)
class LoopConfig:
    iterations: int = 2
    scene_completer: str = "heuristic"
    instance_completer: str = "shape-prior"
    votes: str = "meanshift"
    selection: SelectionConfig = SelectionConfig()
    grid: GridSpec = GridSpec()
    seed: int = 0
    num_samples: int = 2048
    num_pool: int = 1024
    num_recon: int = 2048
    instance_dims: tuple = (32, 32, 32)
    pool_margin: float = 1.25
    min_cluster_points: int = 4
    carve_free: bool = True
    free_space: bool = True
    merge_min_objectness: float = 0.3
    carve_margin: int = 3
    free_margin: float = 2.0
    diffusion_steps: int = 3
    early_stop: bool = False
    early_stop_frac: float = 0.001
    keep_all: bool = True

    def __post_init__(self):
        if self.iterations < 0:
            raise InvalidInputError("iteration count must be >= 0")

    def to_dict(self):
        d = asdict(self)
        d["grid"] = self.grid.to_dict()
        d["instance_dims"] = list(self.instance_dims)
        return d

    def fingerprint(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass(eq=False)
class Stage:
    index: int
    sem_input: object  # V_S fed to the scene completer (None once dropped)
    sem_output: object  # completed scene S_i
    proposals: list = field(default_factory=list)  # proposals that produced this stage's input
    instances: list = field(default_factory=list)
    patch_size: int = 0
    metrics: dict = field(default_factory=dict)
    completer_fingerprint: str = ""


@dataclass(eq=False)
class LoopTrace:
    tsdf: object
    config: LoopConfig
    stages: list = field(default_factory=list)
    stopped_early: bool = False

    @property
    def final(self):
        return self.stages[-1].sem_output


def _template_stats(library, voxel_size):
    sizes, counts = {}, {}
    for c in library.classes:
        es = [e for e in library.by_class(c) if e.size is not None]
        if not es:
            continue
        sizes[c] = np.mean([e.size for e in es], axis=0)
        counts[c] = float(np.mean([min(len(e.points), np.prod(np.asarray(e.size) / voxel_size))
                                   for e in es]))
    return sizes, counts


def propose(sem_out, cfg, library, seed, gt_instances=None):
    """Proposals on a completed scene: sample, vote, cluster, fit, NMS."""
    labels = argmax_labels(sem_out)
    try:
        sample = sample_scene_points(sem_out, labels, cfg.num_samples, seed)
    except EmptySceneError:
        return []
    sizes, counts = _template_stats(library, cfg.grid.voxel_size)
    if cfg.votes == "oracle":
        if gt_instances is None:
            raise InvalidInputError("oracle votes need ground-truth instances")
        votes = compute_gt_offsets(sample, gt_instances)
    else:
        votes = predict_votes(sample, sizes)
    clusters = cluster_votes(sample, votes, cfg.selection.cluster_radius)
    n_occ = int(np.isin(labels.labels, K.INSTANCE_CLASSES).sum())
    rate = cfg.num_samples / max(n_occ, 1)
    expected = {c: rate * n for c, n in counts.items()}
    props = fit_proposals(clusters, sample, votes, sizes, expected,
                          voxel_size=cfg.grid.voxel_size, min_points=cfg.min_cluster_points)
    return nms3d(props, cfg.selection.nms_iou)


def pool_points(sem_out, tsdf, proposal, margin, n_max, seed):
    """World centers of proposal-class voxels inside the enlarged box.

    Surface voxels are preferred; the completed interior is used only when
    fewer than three surface voxels fall inside.
    """
    spec = sem_out.spec
    cls = proposal.class_id
    half = proposal.size / 2 * margin
    lo = np.clip(spec.index_of(proposal.center - half), 0, np.asarray(spec.dims) - 1)
    hi = np.clip(spec.index_of(proposal.center + half), 0, np.asarray(spec.dims) - 1)
    sl = tuple(slice(lo[a], hi[a] + 1) for a in range(3))
    sub = np.argmax(sem_out.conf[sl], axis=-1) == cls
    surf = sub & tsdf.surface[sl]
    pick = surf if surf.sum() >= 3 else sub
    vox = np.argwhere(pick) + lo
    pts = spec.center_of(vox)
    inside = np.all(np.abs(pts - proposal.center) <= half, axis=1)
    pts = pts[inside]
    if len(pts) > n_max:
        rng = np.random.default_rng(seed)
        pts = pts[np.sort(rng.choice(len(pts), n_max, replace=False))]
    return pts


def free_points(tsdf, frame, margin=2.0):
    """Canonical coordinates of visible free voxels near ``frame``.

    Covers ``margin`` times the frame so that shifted candidates are checked
    too.
    """
    spec = tsdf.spec
    half = np.asarray(frame.half_extents) * margin
    c = np.asarray(frame.center)
    lo = np.clip(spec.index_of(c - half), 0, np.asarray(spec.dims) - 1)
    hi = np.clip(spec.index_of(c + half), 0, np.asarray(spec.dims) - 1)
    sl = tuple(slice(lo[a], hi[a] + 1) for a in range(3))
    vox = np.argwhere(tsdf.free[sl]) + lo
    return frame.to_canonical(spec.center_of(vox))


def make_instance_completer(name, library=None, num_points=2048, seed=0, gt_instances=None):
    if name == "shape-prior":
        if library is None:
            raise InvalidInputError("shape-prior completer needs a shape library")
        return ShapePriorCompleter(library, num_points, seed)
    if name == "passthrough":
        return PassthroughCompleter()
    if name == "oracle":
        if gt_instances is None:
            raise InvalidInputError("oracle instance completer needs ground-truth instances")
        return OracleInstanceCompleter(gt_instances)
    raise InvalidInputError(f"unknown instance completer {name!r}")


def complete_instances(proposals, sem_out, tsdf, cfg, completer, seed):
    out = []
    for k, prop in enumerate(proposals):
        if prop.objectness < cfg.merge_min_objectness:
            continue  # would be dropped at the merge anyway
        pts = pool_points(sem_out, tsdf, prop, cfg.pool_margin, cfg.num_pool, seed + k)
        if len(pts) == 0:
            continue
        frame = CanonicalFrame(prop.center, prop.size / 2 * cfg.pool_margin)
        partial, frame, _ = canonicalize(PointCloud(pts), frame)
        if len(partial) == 0:
            continue
        free = free_points(tsdf, frame, cfg.free_margin) if cfg.free_space else None
        try:
            inst = complete_instance_grid(partial, prop.class_conf, completer,
                                          cfg.instance_dims, frame, free_points=free)
        except NoPriorError:
            continue
        out.append(replace(inst, source_id=k, objectness=prop.objectness))
    return out


def _stage_metrics(sem_out, gt, gt_instances, proposals):
    if gt is None:
        return {}
    pred = argmax_labels(sem_out)
    sc, ssc = eval_sc(pred, gt), eval_ssc(pred, gt, sem_out.num_classes)
    m = {"sc_iou": sc.iou, "sc_precision": sc.precision, "sc_recall": sc.recall,
         "ssc_miou": ssc.mean_iou}
    if gt_instances is not None and proposals:
        det = eval_detection(proposals, gt_instances)
        m.update({"det_recall": det.recall, "det_map": det.map})
    return m


def run_loop(tsdf, vs0, cfg=LoopConfig(), library=None, gt=None, gt_instances=None,
             scene_completer=None, instance_completer=None):
    """Run S0 then ``cfg.iterations`` scene-instance-scene rounds.

    Each round merges the completed instances into the projected input
    ``vs0`` (not into the previous round's merge), so stale instances never
    accumulate. ``gt``/``gt_instances`` enable oracle completers and
    per-stage metrics.
    """
    if tsdf.spec != vs0.spec:
        raise InvalidInputError("TSDF and semantic volumes have different grids")
    if library is None:
        from .synth import build_shape_library

        library = build_shape_library(vs0.spec.voxel_size)
    scene_c = scene_completer or make_scene_completer(
        cfg.scene_completer, gt=gt, num_classes=vs0.num_classes,
        **({"max_steps": cfg.diffusion_steps} if cfg.scene_completer == "heuristic" else {}))
    inst_c = instance_completer or make_instance_completer(
        cfg.instance_completer, library, cfg.num_recon, cfg.seed, gt_instances)
    fp = f"{scene_c.fingerprint()}|{inst_c.fingerprint()}"
    trace = LoopTrace(tsdf, cfg)

    try:
        out = scene_c.complete(tsdf, vs0)
    except Exception as exc:
        raise CompleterError(f"S0 failed: {exc}", trace) from exc
    trace.stages.append(Stage(0, vs0, out, metrics=_stage_metrics(out, gt, gt_instances, None),
                              completer_fingerprint=fp))

    for i in range(1, cfg.iterations + 1):
        prev = trace.stages[-1].sem_output
        try:
            props = propose(prev, cfg, library, cfg.seed * 1000 + i, gt_instances)
            insts = complete_instances(props, prev, tsdf, cfg, inst_c, cfg.seed * 1000 + i)
            shell = np.isin(argmax_labels(prev).labels, K.SHELL_CLASSES)
            patch = build_patch(insts, vs0.spec, cfg.carve_free, base=vs0,
                                carve_margin=cfg.carve_margin, protect=shell)
            vs_i = merge_instances(vs0, patch)
            out = scene_c.complete(tsdf, vs_i)
        except Exception as exc:
            raise CompleterError(f"iteration {i} failed: {exc}", trace) from exc
        metrics = _stage_metrics(out, gt, gt_instances, props)
        trace.stages.append(Stage(i, vs_i, out, props, insts, len(patch.resolved()), metrics, fp))
        if not cfg.keep_all:
            trace.stages[-2].sem_input = trace.stages[-2].sem_output = None
        if cfg.early_stop:
            changed = np.mean(np.argmax(out.conf, -1) != np.argmax(prev.conf, -1))
            if changed < cfg.early_stop_frac:
                trace.stopped_early = True
                break
    return trace


@dataclass(frozen=True)
class StageSample:
    trace_id: int
    iteration: int
    volume: object


@dataclass(eq=False)
class StageDataset:
    scene: list = field(default_factory=list)  # enhanced (merged) volumes
    instance: list = field(default_factory=list)  # completed scenes that feed proposals


def collect_stage_data(traces):
    """Training inputs accumulated across iterations.

    Scene stage: every merged volume V_S1..V_SN. Instance stage: the
    completed scenes S0..S(N-1); a loop with no rounds still contributes S0.
    """
    ds = StageDataset()
    for t, trace in enumerate(traces):
        n = len(trace.stages) - 1
        for st in trace.stages[1:]:
            ds.scene.append(StageSample(t, st.index, st.sem_input))
        for st in trace.stages[: max(n, 1)]:
            ds.instance.append(StageSample(t, st.index, st.sem_output))
    return ds


def write_trace(trace, directory, extra=None):
    """``s0.sisv``, ``i1/`` (proposals + instance PLYs), ``s1.sisv``, ... and ``trace.json``."""
    from .io import save_semantic, write_ply, write_proposals

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    stages = []
    for st in trace.stages:
        entry = {"index": st.index, "metrics": st.metrics, "patch_size": st.patch_size,
                 "completer_fingerprint": st.completer_fingerprint}
        if st.index > 0:
            sub = d / f"i{st.index}"
            sub.mkdir(exist_ok=True)
            write_proposals(sub / "proposals.txt", st.proposals)
            for k, inst in enumerate(st.instances):
                write_ply(sub / f"instance_{k:03d}.ply",
                          PointCloud(inst.world_points(),
                                     labels=np.full(len(inst.points), inst.class_id)))
            entry["instances"] = [
                {"class_id": inst.class_id, "source_id": inst.source_id,
                 "objectness": inst.objectness, "center": list(inst.frame.center),
                 "half_extents": list(inst.frame.half_extents),
                 "template": inst.meta.get("template"),
                 "roundtrip_ok": inst.meta.get("roundtrip_ok")}
                for inst in st.instances
            ]
        if st.sem_output is not None:
            save_semantic(d / f"s{st.index}.sisv", st.sem_output)
        stages.append(entry)
    manifest = {
        "config": trace.config.to_dict(),
        "config_fingerprint": trace.config.fingerprint(),
        "stopped_early": trace.stopped_early,
        "stages": stages,
    }
    if extra:
        manifest.update(extra)
    (d / "trace.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d
