import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_diff
from sisc.errors import InvalidInputError
from sisc.instances import CompletedInstance
from sisc.pointgrid import CanonicalFrame, PointCloud
from sisc.scene import (
    MergePatch,
    build_patch,
    complete_scene_heuristic,
    loss_scene,
    make_scene_completer,
    merge_instances,
)
from sisc.volumes import GridSpec, LabelVolume, SemanticVolume, TsdfVolume, Visibility, argmax_labels

C = 11
F, S, O = Visibility.FREE, Visibility.SURFACE, Visibility.OCCLUDED


def tiny(vis, labels):
    spec = GridSpec(np.shape(vis), 0.1)
    vis = np.asarray(vis, np.uint8)
    d = np.where(vis == O, -0.1, np.where(vis == S, 0.0, 0.1))
    return TsdfVolume(spec, d, vis), SemanticVolume.from_labels(np.asarray(labels), spec, C)


def bare(labels):
    """Semantic volume whose label-0 voxels carry no evidence at all."""
    labels = np.asarray(labels)
    sem = SemanticVolume.from_labels(labels, GridSpec(labels.shape, 0.1), C)
    conf = np.array(sem.conf)
    conf[labels == 0] = 0
    return SemanticVolume(sem.spec, conf)


# --- heuristic completer -------------------------------------------------------------


def test_no_occluded_voxels_keeps_labels():
    vis = np.full((3, 3, 3), F, np.uint8)
    lab = np.zeros((3, 3, 3), int)
    vis[1, :, 2] = S
    lab[1, :, 2] = [3, 5, 5]
    tsdf, _ = tiny(vis, lab)
    out = complete_scene_heuristic(tsdf, bare(lab))
    assert np.array_equal(argmax_labels(out).labels, lab)


def test_occluded_neighbour_inherits_label():
    vis = np.array([[[S, O]]], np.uint8)
    lab = np.array([[[7, 0]]])
    tsdf, _ = tiny(vis, lab)
    out = complete_scene_heuristic(tsdf, bare(lab), max_steps=1)
    assert argmax_labels(out).labels[0, 0, 1] == 7


def test_free_voxel_is_empty_regardless_of_neighbours():
    vis = np.array([[[S, F, S]]], np.uint8)
    lab = np.array([[[4, 4, 4]]])  # the free voxel even carries evidence
    tsdf, sem = tiny(vis, lab)
    out = complete_scene_heuristic(tsdf, sem)
    assert argmax_labels(out).labels[0, 0].tolist() == [4, 0, 4]


def test_spec_mismatch_rejected():
    tsdf, _ = tiny(np.full((2, 2, 2), F), np.zeros((2, 2, 2), int))
    _, sem = tiny(np.full((2, 2, 3), F), np.zeros((2, 2, 3), int))
    with pytest.raises(InvalidInputError):
        complete_scene_heuristic(tsdf, sem)


@pytest.mark.parametrize("seed", [1, 6])
def test_heuristic_dense_and_idempotent(get_scene, seed):
    tsdf, vs0 = get_scene(seed).inputs
    out = complete_scene_heuristic(tsdf, vs0)
    assert out.spec == vs0.spec
    np.testing.assert_allclose(out.conf.sum(-1), 1.0, atol=1e-6)
    again = complete_scene_heuristic(tsdf, out)
    assert np.array_equal(again.conf, out.conf)


def test_completer_factory():
    assert make_scene_completer("heuristic").name == "heuristic"
    assert make_scene_completer("passthrough").name == "passthrough"
    with pytest.raises(InvalidInputError):
        make_scene_completer("oracle")
    with pytest.raises(InvalidInputError):
        make_scene_completer("neural")


def test_passthrough_scene_completer_dense():
    vis = np.full((2, 2, 2), O, np.uint8)
    tsdf, _ = tiny(vis, np.zeros((2, 2, 2), int))
    lab = np.zeros((2, 2, 2), int)
    lab[0, 0, 0] = 6
    out = make_scene_completer("passthrough").complete(tsdf, bare(lab))
    np.testing.assert_allclose(out.conf.sum(-1), 1.0)
    assert argmax_labels(out).labels[0, 0, 0] == 6


# --- merge ---------------------------------------------------------------------------


def _patch(entries):
    idx = np.array([e[0] for e in entries]).reshape(-1, 3)
    return MergePatch(idx, np.array([e[1] for e in entries]), np.array([e[2] for e in entries], float),
                      np.arange(len(entries)))


def _vol(seed=0, dims=(5, 6, 7)):
    rng = np.random.default_rng(seed)
    conf = rng.random(dims + (C + 1,))
    return SemanticVolume(GridSpec(dims, 0.1), conf / conf.sum(-1, keepdims=True))


def test_empty_patch_is_identity():
    v = _vol()
    out = merge_instances(v, MergePatch.empty())
    assert out.conf.tobytes() == v.conf.tobytes()


def test_single_entry_changes_one_voxel():
    v = _vol()
    out = merge_instances(v, _patch([((3, 4, 5), 5, 0.8)]))
    diff = np.any(out.conf != v.conf, axis=-1)
    assert np.argwhere(diff).tolist() == [[3, 4, 5]]
    expect = np.zeros(C + 1)
    expect[5] = 1
    np.testing.assert_array_equal(out.conf[3, 4, 5], expect)


def test_higher_objectness_wins_conflict():
    v = _vol()
    for order in ([(0.9, 6), (0.7, 8)], [(0.7, 8), (0.9, 6)]):
        p = _patch([((1, 1, 1), c, o) for o, c in order])
        assert argmax_labels(merge_instances(v, p)).labels[1, 1, 1] == 6


def test_occupied_entry_beats_free_entry():
    v = _vol()
    p = _patch([((1, 1, 1), 0, 0.99), ((1, 1, 1), 9, 0.4)])
    assert argmax_labels(merge_instances(v, p)).labels[1, 1, 1] == 9


def test_merge_leaves_input_untouched_and_validates():
    v = _vol()
    before = v.conf.copy()
    merge_instances(v, _patch([((0, 0, 0), 5, 0.5)]))
    assert np.array_equal(v.conf, before)
    with pytest.raises(InvalidInputError):
        merge_instances(v, _patch([((9, 0, 0), 5, 0.5)]))
    with pytest.raises(InvalidInputError):
        merge_instances(v, _patch([((0, 0, 0), 12, 0.5)]))


@given(st.lists(st.tuples(st.tuples(st.integers(0, 4), st.integers(0, 5), st.integers(0, 6)),
                          st.integers(0, C), st.floats(0, 1)), max_size=25))
def test_merge_touches_exactly_the_patch_support(entries):
    v = _vol(1)
    p = _patch(entries) if entries else MergePatch.empty()
    out = merge_instances(v, p)
    diff = {tuple(x) for x in np.argwhere(np.any(out.conf != v.conf, -1)).tolist()}
    support = {e[0] for e in entries}
    # random input never already holds a one-hot, so every patched voxel changes
    assert diff == support
    r = p.resolved()
    assert len(r) == len(support)
    for (i, j, k), c in zip(r.indices.tolist(), r.classes.tolist()):
        assert out.conf[i, j, k, c] == 1.0 and out.conf[i, j, k].sum() == 1.0


def _inst(center, half, pts, cls=5, obj=0.9):
    frame = CanonicalFrame(center, half)
    return CompletedInstance(PointCloud(frame.to_canonical(np.asarray(pts, float))), frame, cls,
                             objectness=obj)


def test_build_patch_occupancy_and_carving():
    spec = GridSpec((8, 8, 8), 0.125)
    pts = spec.center_of(np.array([[3, 3, 3], [4, 3, 3]]))
    inst = _inst((0.5, 0.4375, 0.4375), (0.25, 0.125, 0.125), pts)
    p = build_patch([inst], spec)
    assert sorted(map(tuple, p.indices.tolist())) == [(3, 3, 3), (4, 3, 3)]
    carved = build_patch([inst], spec, carve_free=True)
    free = {tuple(x) for x, c in zip(carved.indices.tolist(), carved.classes) if c == 0}
    occ = {tuple(x) for x, c in zip(carved.indices.tolist(), carved.classes) if c != 0}
    assert occ == {(3, 3, 3), (4, 3, 3)} and free and not (free & occ)
    protect = np.zeros(spec.dims, bool)
    protect[tuple(np.array(sorted(free)).T)] = True
    guarded = build_patch([inst], spec, carve_free=True, protect=protect)
    assert np.all(guarded.classes != 0)
    wider = build_patch([inst], spec, carve_free=True, carve_margin=1)
    assert np.sum(wider.classes == 0) > len(free)


# --- loss ----------------------------------------------------------------------------


def _gt(seed=0, dims=(3, 4, 2)):
    rng = np.random.default_rng(seed)
    lab = rng.integers(0, C + 1, dims)
    vis = rng.choice([0, 1, 2, 3], dims)
    return LabelVolume(GridSpec(dims, 0.1), lab, vis)


def test_scene_loss_examples():
    gt = _gt()
    assert loss_scene(SemanticVolume.from_labels(gt.labels, gt.spec, C), gt) == 0.0
    uni = SemanticVolume(gt.spec, np.full(gt.spec.dims + (C + 1,), 1 / (C + 1)))
    assert loss_scene(uni, gt) == pytest.approx(math.log(C + 1), rel=1e-6)
    masked = LabelVolume(gt.spec, gt.labels, np.zeros(gt.spec.dims))
    assert loss_scene(uni, masked) == 0.0


def test_scene_loss_ignores_masked_voxels():
    gt = _gt(2)
    v = _vol(3, gt.spec.dims)
    out = np.argwhere(gt.visibility == Visibility.OUTSIDE)[0]
    conf = np.array(v.conf)
    conf[tuple(out)] = np.roll(conf[tuple(out)], 3)
    assert loss_scene(SemanticVolume(v.spec, conf), gt) == loss_scene(v, gt)


@pytest.mark.parametrize("seed", range(5))
def test_scene_loss_gradient(seed):
    gt = _gt(seed)
    x = np.random.default_rng(seed + 10).uniform(0.05, 1, gt.spec.dims + (C + 1,))
    f = lambda c: loss_scene(c, gt)
    val, g = loss_scene(x, gt, return_grad=True)
    assert val >= 0
    np.testing.assert_allclose(g, central_diff(f, x), rtol=1e-3, atol=1e-6)
