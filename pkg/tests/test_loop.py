import json

import numpy as np
import pytest

from sisc.errors import CompleterError, InvalidInputError
from sisc.io import load_semantic
from sisc.loop import LoopConfig, collect_stage_data, run_loop, write_trace
from sisc.scene import OracleSceneCompleter
from sisc.volumes import argmax_labels


def _run(sc, library, **kw):
    tsdf, vs0 = sc.inputs
    return run_loop(tsdf, vs0, LoopConfig(**kw), library=library, gt=sc.gt, gt_instances=sc.instances)


def test_config_defaults_and_validation():
    assert LoopConfig().iterations == 2
    with pytest.raises(InvalidInputError):
        LoopConfig(iterations=-1)
    assert LoopConfig().fingerprint() == LoopConfig().fingerprint()
    assert LoopConfig(seed=1).fingerprint() != LoopConfig().fingerprint()


def test_zero_iterations_gives_s0_only(get_scene, library):
    tr = _run(get_scene(0), library, iterations=0)
    assert len(tr.stages) == 1 and tr.stages[0].index == 0
    assert tr.stages[0].proposals == [] and tr.stages[0].instances == []


def test_default_loop_shape_and_invariants(get_scene, library):
    sc = get_scene(3)
    tsdf, vs0 = sc.inputs
    d0, v0 = tsdf.d.tobytes(), tsdf.visibility.tobytes()
    tr = _run(sc, library)
    assert [s.index for s in tr.stages] == [0, 1, 2]
    assert tsdf.d.tobytes() == d0 and tsdf.visibility.tobytes() == v0
    assert tr.tsdf is tsdf
    assert len({s.completer_fingerprint for s in tr.stages}) == 1
    for st in tr.stages:
        assert st.sem_output.spec == vs0.spec
        np.testing.assert_allclose(st.sem_output.conf.sum(-1), 1.0, atol=1e-5)
        assert {"sc_iou", "ssc_miou"} <= set(st.metrics)
    assert tr.stages[1].instances and tr.stages[1].patch_size > 0


def test_loop_is_deterministic(get_scene, library):
    a, b = _run(get_scene(4), library), _run(get_scene(4), library)
    for x, y in zip(a.stages, b.stages):
        assert x.sem_output.conf.tobytes() == y.sem_output.conf.tobytes()
        assert x.metrics == y.metrics


@pytest.mark.parametrize("seed", [0, 5])
def test_oracle_scene_completer_fixed_point(get_scene, library, seed):
    tr = _run(get_scene(seed), library, scene_completer="oracle", iterations=3)
    assert tr.stages[1].metrics["ssc_miou"] == 1.0
    first = tr.stages[1].sem_output.conf.tobytes()
    assert all(s.sem_output.conf.tobytes() == first for s in tr.stages[2:])


def test_oracle_instance_completer_never_lowers_mean_ssc(get_scene, library):
    s0, s1 = [], []
    for seed in range(50):
        tr = _run(get_scene(seed), library, instance_completer="oracle", iterations=1)
        s0.append(tr.stages[0].metrics["ssc_miou"])
        s1.append(tr.stages[1].metrics["ssc_miou"])
    assert np.mean(s1) >= np.mean(s0)


def test_low_memory_mode_keeps_last(get_scene, library):
    tr = _run(get_scene(2), library, keep_all=False)
    assert tr.stages[0].sem_output is None and tr.stages[1].sem_output is None
    assert tr.final is not None


def test_mismatched_specs_rejected(get_scene, library):
    tsdf, _ = get_scene(0).inputs
    from sisc.synth import SceneRecipe, generate

    _, other = generate(SceneRecipe(seed=0, dims=(40, 36, 60))).inputs
    with pytest.raises(InvalidInputError):
        run_loop(tsdf, other, library=library)


def test_completer_error_carries_partial_trace(get_scene, library):
    sc = get_scene(1)
    tsdf, vs0 = sc.inputs

    class Flaky:
        name = "flaky"

        def __init__(self):
            self.calls = 0

        def complete(self, tsdf, sem):
            self.calls += 1
            if self.calls > 1:
                raise RuntimeError("boom")
            return OracleSceneCompleter(sc.gt, vs0.num_classes).complete(tsdf, sem)

        def fingerprint(self):
            return "flaky"

    with pytest.raises(CompleterError) as err:
        run_loop(tsdf, vs0, LoopConfig(), library=library, scene_completer=Flaky())
    assert [s.index for s in err.value.trace.stages] == [0]
    assert "iteration 1" in str(err.value)


def test_early_stop_on_oracle_fixed_point(get_scene, library):
    tr = _run(get_scene(0), library, scene_completer="oracle", iterations=5, early_stop=True)
    assert tr.stopped_early and len(tr.stages) < 6


# --- stage data ----------------------------------------------------------------------


def test_stage_data_counts(get_scene, library):
    two = _run(get_scene(0), library)
    zero = _run(get_scene(0), library, iterations=0)
    ds = collect_stage_data([two])
    assert len(ds.scene) == 2 and len(ds.instance) == 2
    assert [s.iteration for s in ds.scene] == [1, 2]
    assert [s.iteration for s in ds.instance] == [0, 1]
    assert ds.instance[1].volume is two.stages[1].sem_output
    ds = collect_stage_data([zero])
    assert len(ds.scene) == 0 and len(ds.instance) == 1
    ds = collect_stage_data([two, two, zero])
    assert len(ds.scene) == 4 and len(ds.instance) == 5
    for t in (0, 1):
        its = [s.iteration for s in ds.scene if s.trace_id == t]
        assert its == sorted(set(its))


# --- serialization -------------------------------------------------------------------


def test_write_trace_layout(get_scene, library, tmp_path):
    tr = _run(get_scene(3), library)
    write_trace(tr, tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["i1", "i2", "s0.sisv", "s1.sisv", "s2.sisv", "trace.json"]
    m = json.loads((tmp_path / "trace.json").read_text())
    assert m["config_fingerprint"] == tr.config.fingerprint()
    assert [s["index"] for s in m["stages"]] == [0, 1, 2]
    assert m["stages"][2]["metrics"] == tr.stages[2].metrics
    sub = tmp_path / "i1"
    assert (sub / "proposals.txt").exists()
    assert len(list(sub.glob("instance_*.ply"))) == len(tr.stages[1].instances)
    back = load_semantic(tmp_path / "s2.sisv")
    assert np.array_equal(argmax_labels(back).labels, argmax_labels(tr.final).labels)
