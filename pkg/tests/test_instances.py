import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import chamfer_brute
from sisc.errors import NoPriorError, UndefinedInputError
from sisc.instances import (
    PassthroughCompleter,
    ShapeLibrary,
    ShapePriorCompleter,
    TemplateEntry,
    chamfer,
    chamfer_one_sided,
    complete_instance_grid,
    complete_shape_prior,
    loss_instance,
)
from sisc.pointgrid import CanonicalFrame, PointCloud, regridding, gridding
from sisc.proposals import loss_det

C = 11


def onehot(c):
    v = np.zeros(C)
    v[c - 1] = 1
    return v


cloud = arrays(np.float64, st.tuples(st.integers(1, 20), st.just(3)), elements=st.floats(-5, 5))


# --- chamfer -------------------------------------------------------------------------


def test_chamfer_examples():
    P = np.random.default_rng(0).normal(size=(7, 3))
    assert chamfer(P, P) == 0.0
    assert chamfer([[0, 0, 0]], [[1, 0, 0]]) == 2.0
    assert chamfer([[0, 0, 0], [2, 0, 0]], [[0, 0, 0]]) == 2.0
    assert chamfer([[0, 0, 0]], [[0, 0, 0], [2, 0, 0]]) == 2.0


def test_chamfer_is_not_assumed_symmetric():
    T = [[0, 0, 0], [2, 0, 0], [3, 0, 0]]
    R = [[0, 0, 0]]
    assert chamfer(T, R) == pytest.approx(chamfer_brute(T, R))
    assert chamfer(T, [[0, 0, 0], [0, 0, 0.5]]) != pytest.approx(chamfer([[0, 0, 0], [0, 0, 0.5]], T[:2]))


def test_chamfer_empty_is_undefined():
    with pytest.raises(UndefinedInputError):
        chamfer(np.zeros((0, 3)), [[0, 0, 0]])
    with pytest.raises(UndefinedInputError):
        chamfer([[0, 0, 0]], np.zeros((0, 3)))


@given(cloud, cloud)
def test_chamfer_matches_brute_force(T, R):
    assert abs(chamfer(T, R) - chamfer_brute(T, R)) <= 1e-9 * max(1.0, chamfer_brute(T, R))


@given(cloud, cloud, arrays(np.float64, 3, elements=st.floats(-10, 10)))
def test_chamfer_translation_invariant(T, R, v):
    assert chamfer(T + v, R + v) == pytest.approx(chamfer(T, R), rel=1e-9, abs=1e-9)


@given(cloud, cloud)
def test_chamfer_zero_iff_same_set(T, R):
    same = {tuple(p) for p in T.tolist()} == {tuple(p) for p in R.tolist()}
    assert (chamfer(T, R) <= 1e-9) == same or not same and chamfer_brute(T, R) <= 1e-9


def test_instance_loss():
    assert loss_instance(0, 0) == 0
    assert loss_instance(1.5, 2.0) == 3.5
    parts = {"loc_reg": 0.3, "box": 0.2, "obj_cls": 0.7, "sem_cls": 1.1}
    cd = chamfer([[0, 0, 0], [2, 0, 0]], [[0, 0, 0]])
    assert loss_instance(loss_det(parts), cd) == loss_det(parts) + cd


# --- retrieval -----------------------------------------------------------------------


def test_self_retrieval_on_library(library):
    for e in library:
        partial = e.points[e.points[:, 0] <= np.median(e.points[:, 0])]
        inst = complete_shape_prior(partial, onehot(e.class_id), library)
        world = inst.frame.to_world(inst.points.points)
        assert inst.meta["cost"] == pytest.approx(0.0, abs=1e-12)
        assert chamfer_one_sided(partial, world) == pytest.approx(0.0, abs=1e-12)
        assert inst.class_id == e.class_id
        full = complete_shape_prior(e.points, onehot(e.class_id), library)
        assert full.meta["template"] == e.name


def test_nearer_of_two_templates_wins():
    rng = np.random.default_rng(3)
    A = rng.uniform(-1, 1, (40, 3))
    B = np.clip(A * 0.6 + 0.3, -1, 1)
    lib = ShapeLibrary([TemplateEntry(5, "a", A), TemplateEntry(5, "b", B)])
    partial = A[:15] + rng.normal(scale=0.01, size=(15, 3))
    assert chamfer_one_sided(partial, A) < chamfer_one_sided(partial, B)
    assert complete_shape_prior(partial, onehot(5), lib, align=False).meta["template"] == "a"


@pytest.mark.parametrize("seed", range(5))
def test_retrieval_is_exact_argmin_over_library(seed):
    rng = np.random.default_rng(seed)
    entries = [TemplateEntry(int(rng.integers(5, 8)), f"t{i}",
                             np.clip(rng.normal(scale=0.5, size=(int(rng.integers(5, 30)), 3)), -1, 1))
               for i in range(100)]
    lib = ShapeLibrary(entries)
    partial = rng.uniform(-0.8, 0.8, (12, 3))
    for cls in (5, 6, 7):
        cands = [e for e in entries if e.class_id == cls]
        costs = [sum(min(((p - q) ** 2).sum() for q in e.points) for p in partial) / len(partial)
                 for e in cands]
        want = cands[int(np.argmin(costs))].name
        inst = complete_shape_prior(partial, onehot(cls), lib, align=False)
        assert inst.meta["template"] == want
        assert inst.meta["cost"] == pytest.approx(min(costs), rel=1e-9)


def test_missing_class_and_empty_confidence(library):
    lib = ShapeLibrary([e for e in library if e.class_id != 9])
    with pytest.raises(NoPriorError):
        complete_shape_prior([[0, 0, 0]], onehot(9), lib)
    with pytest.raises(UndefinedInputError):
        complete_shape_prior([[0, 0, 0]], np.zeros(C), library)
    with pytest.raises(UndefinedInputError):
        complete_shape_prior(np.zeros((0, 3)), onehot(5), library)


def test_completer_is_deterministic_and_in_range(library):
    e = library.by_class(6)[1]
    comp = ShapePriorCompleter(library, num_points=500, seed=4)
    a = comp.complete(e.points[::3], onehot(6))
    b = comp.complete(e.points[::3], onehot(6))
    assert np.array_equal(a.points.points, b.points.points)
    assert len(a.points) == 500 and a.meta["seed"] == 4
    assert np.all(np.abs(a.points.points) <= 1)


def test_library_invariants(library):
    assert set(library.classes) == set(range(5, 12))
    for e in library:
        assert np.all(np.abs(e.points) <= 1)


def test_library_directory_round_trip(library, tmp_path):
    library.save(tmp_path)
    back = ShapeLibrary.load(tmp_path)
    assert sorted(e.name for e in back) == sorted(e.name for e in library)
    by_name = {e.name: e for e in library}
    for e in back:
        np.testing.assert_allclose(e.points, by_name[e.name].points, atol=1e-6)
        assert e.class_id == by_name[e.name].class_id


def test_free_space_penalty_moves_fit_off_observed_free_space():
    # an L-shaped template; the partial sees only the shared bar, the free
    # points rule out the mirrored placement of the foot
    bar = np.array([[x, 0.0, 0.0] for x in np.linspace(-0.5, 0.5, 6)])
    foot = np.array([[0.5, y, 0.0] for y in np.linspace(0.2, 0.6, 3)])
    mirror = foot * [-1, 1, 1]
    lib = ShapeLibrary([TemplateEntry(5, "right", np.vstack([bar, foot])),
                        TemplateEntry(5, "left", np.vstack([bar, mirror]))])
    inst = complete_shape_prior(bar, onehot(5), lib, free_points=foot)
    assert inst.meta["template"] == "left"
    inst = complete_shape_prior(bar, onehot(5), lib, free_points=mirror)
    assert inst.meta["template"] == "right"


# --- grid pipeline -------------------------------------------------------------------


def test_passthrough_is_identity():
    pts = np.random.default_rng(0).uniform(-1, 1, (50, 3))
    inst = complete_instance_grid(PointCloud(pts), onehot(5), PassthroughCompleter())
    np.testing.assert_array_equal(inst.points.points, pts)


def test_grid_dims_follow_configuration(library):
    e = library.by_class(8)[0]
    inst = complete_instance_grid(PointCloud(e.points), onehot(8), ShapePriorCompleter(library),
                                  dims=(24, 16, 20))
    assert inst.grid.dims == (24, 16, 20)
    assert inst.meta["grid_dims"] == [24, 16, 20]


def test_round_trip_preserves_point_count(library):
    comp = ShapePriorCompleter(library)
    for e in (library.by_class(c)[0] for c in library.classes):
        for frame in (None, CanonicalFrame((0, 0, 0), (1.25, 1.25, 1.25))):
            pts = e.points if frame is None else e.points / 1.25
            inst = complete_instance_grid(PointCloud(pts), onehot(e.class_id), comp, frame=frame)
            n = len(inst.points)
            assert abs(inst.meta["roundtrip_points"] - n) <= 0.1 * n
            assert inst.meta["roundtrip_ok"]


@given(arrays(np.float64, st.tuples(st.integers(1, 200), st.just(3)), elements=st.floats(-1, 1)))
def test_conserving_regrid_returns_input_size(pts):
    back = regridding(gridding(PointCloud(pts), (9, 9, 9)), conserve=True)
    assert len(back) == len(pts)
