import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from sisc import cli
from sisc.cli import main
from sisc.io import save_labels
from sisc.volumes import GridSpec, LabelVolume


def tree_digest(root):
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "scenes"
    assert main(["generate", str(out), "--seed", "7", "--count", "1"]) == 0
    return out / "scene_00007"


def test_generate_is_deterministic_and_listed(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["generate", str(a), "--seed", "7", "--count", "3"]) == 0
    assert main(["generate", str(b), "--seed", "7", "--count", "3", "--jobs", "2"]) == 0
    assert tree_digest(a) == tree_digest(b)
    m = json.loads((a / "manifest.json").read_text())
    assert [x["seed"] for x in m["bundles"]] == [7, 8, 9]
    assert len(m["bundles"]) == 3 == len([p for p in a.iterdir() if p.is_dir()])
    assert m["config"]["loop"]["iterations"] == 2
    printed = capsys.readouterr().out.split()
    assert len(printed) == 6 and all(p.endswith("manifest.json") for p in printed)


def test_generate_count_zero_warns(tmp_path, capsys):
    assert main(["generate", str(tmp_path / "z"), "--count", "0"]) == 0
    err = capsys.readouterr().err
    assert "warning" in err
    m = json.loads((tmp_path / "z" / "manifest.json").read_text())
    assert m["bundles"] == []


def test_placement_failure_exit_code(tmp_path, monkeypatch, capsys):
    from sisc import synth
    from sisc.errors import PlacementError

    def fail(recipe):
        raise PlacementError(f"recipe seed={recipe.seed}: no free spot")

    monkeypatch.setattr(synth, "generate", fail)
    assert main(["generate", str(tmp_path / "f"), "--seed", "3"]) == 2
    assert "seed=3" in capsys.readouterr().err


def test_existing_output_needs_force(tmp_path):
    out = tmp_path / "g"
    assert main(["generate", str(out), "--count", "0"]) == 0
    assert main(["generate", str(out), "--count", "0"]) == 1
    assert main(["generate", str(out), "--count", "0", "--force"]) == 0


def test_usage_errors(tmp_path):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["generate", str(tmp_path / "x"), "--bogus"]) == 1
    assert main(["complete", str(tmp_path / "missing"), str(tmp_path / "t")]) == 1
    assert main(["complete", "b", "t", "--scene-completer", "neural"]) == 1
    assert main(["generate", str(tmp_path / "y"), "--count", "-1"]) == 1


def test_complete_zero_iterations(bundle, tmp_path, capsys):
    out = tmp_path / "t0"
    assert main(["complete", str(bundle), str(out), "--iterations", "0"]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["s0.sisv", "trace.json"]
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("iteration 0:")


def test_complete_with_oracle_prints_one(bundle, tmp_path, capsys):
    out = tmp_path / "to"
    assert main(["complete", str(bundle), str(out), "--scene-completer", "oracle"]) == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("iteration")]
    assert len(lines) == 3
    assert all("SSC mIoU 1.000" in l for l in lines[1:])
    m = json.loads((out / "trace.json").read_text())
    assert m["run"]["loop"]["scene_completer"] == "oracle"


def test_config_file_precedence(bundle, tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[loop]\niterations = 1\nscene-completer = passthrough\n[selection]\nnms_iou = 0.4\n")
    out = tmp_path / "tc"
    assert main(["complete", str(bundle), str(out), "--config", str(ini), "--iterations", "0"]) == 0
    cfg = json.loads((out / "trace.json").read_text())["config"]
    assert cfg["iterations"] == 0 and cfg["scene_completer"] == "passthrough"
    assert cfg["selection"]["nms_iou"] == 0.4
    (tmp_path / "bad.ini").write_text("[loop]\nwarp = 9\n")
    assert main(["complete", str(bundle), str(tmp_path / "tb"), "--config", str(tmp_path / "bad.ini")]) == 1


def test_corrupt_bundle_is_data_error(bundle, tmp_path, capsys):
    import shutil

    broken = tmp_path / "broken"
    shutil.copytree(bundle, broken)
    (broken / "vs0.sisv").write_bytes(b"XXXXXXXX" + (broken / "vs0.sisv").read_bytes()[8:])
    assert main(["complete", str(broken), str(tmp_path / "t")]) == 2
    err = capsys.readouterr().err
    assert "vs0.sisv" in err and "offset 0" in err


def test_evaluate_gt_against_itself(bundle, tmp_path, capsys):
    gt = bundle / "gt.sisv"
    assert main(["evaluate", str(gt), str(bundle), "--report", "json"]) == 0
    rep = json.loads(capsys.readouterr().out)[0]
    assert rep["sc"]["iou"] == rep["sc"]["precision"] == rep["sc"]["recall"] == 1.0
    assert rep["ssc"]["mean_iou"] == 1.0
    assert all(v in (None, 1.0) for v in rep["ssc"]["iou"])
    assert main(["evaluate", str(gt), str(bundle)]) == 0
    row = capsys.readouterr().out.splitlines()[1].split()
    assert all(c in ("100.0", "-") for c in row[3:])


def test_evaluate_trace_json_table_parity(bundle, tmp_path, capsys):
    out = tmp_path / "te"
    assert main(["complete", str(bundle), str(out)]) == 0
    capsys.readouterr()
    assert main(["evaluate", str(out), str(bundle), "--report", "json"]) == 0
    js = json.loads(capsys.readouterr().out)
    assert main(["evaluate", str(out), str(bundle)]) == 0
    text = capsys.readouterr().out.splitlines()
    assert [r["name"] for r in js] == ["S0", "S1", "S2"]
    assert "detection" in js[1] and "detection" not in js[0]
    for r, line in zip(js, text[1:4]):
        cells = line.split()
        assert cells[0] == r["name"]
        assert float(cells[3]) == pytest.approx(100 * r["sc"]["iou"], abs=0.05)
        assert float(cells[-1]) == pytest.approx(100 * r["ssc"]["mean_iou"], abs=0.05)
    det_lines = [l for l in text if "detection@0.25" in l]
    assert len(det_lines) == 2


def test_evaluate_spec_mismatch(bundle, tmp_path):
    other = tmp_path / "o.sisv"
    save_labels(other, LabelVolume(GridSpec((4, 4, 4), 0.08), np.zeros((4, 4, 4), np.uint8)))
    assert main(["evaluate", str(other), str(bundle)]) == 2


def test_export_mesh(bundle, tmp_path, capsys):
    out = tmp_path / "m.ply"
    assert main(["export-mesh", str(bundle / "gt.sisv"), str(out)]) == 0
    assert "vertices" in capsys.readouterr().out
    first = out.read_bytes()
    assert main(["export-mesh", str(bundle / "gt.sisv"), str(out)]) == 1
    assert main(["export-mesh", str(bundle / "gt.sisv"), str(out), "--force"]) == 0
    assert out.read_bytes() == first
    bad = tmp_path / "bad.sisv"
    bad.write_bytes(b"nope" * 20)
    assert main(["export-mesh", str(bad), str(tmp_path / "n.ply")]) == 2


def test_complete_is_idempotent_with_force(bundle, tmp_path):
    out = tmp_path / "tf"
    assert main(["complete", str(bundle), str(out), "--iterations", "1"]) == 0
    d1 = tree_digest(out)
    assert main(["complete", str(bundle), str(out), "--iterations", "1", "--force"]) == 0
    assert tree_digest(out) == d1


def test_parser_lists_all_subcommands():
    help_text = cli.build_parser().format_help()
    for name in ("generate", "complete", "evaluate", "export-mesh"):
        assert name in help_text
