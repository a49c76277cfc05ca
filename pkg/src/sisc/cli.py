"""Command line: ``generate``, ``complete``, ``evaluate``, ``export-mesh``.

Exit codes: 0 success, 1 usage error, 2 data error.

Settings resolve as flags > ``--config`` file > defaults. The config file is
INI with optional ``[loop]`` and ``[selection]`` sections whose keys are the
``LoopConfig`` / ``SelectionConfig`` field names (dashes or underscores).
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .errors import FormatError, SiscError
from .loop import INSTANCE_COMPLETERS, LoopConfig, run_loop, write_trace
from .proposals import SelectionConfig
from .scene import SCENE_COMPLETERS

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


@dataclasses.dataclass(frozen=True)
class RunConfig:
    subcommand: str
    inputs: tuple
    output: Path | None
    loop: LoopConfig
    seed: int = 0
    report: str = "table"
    jobs: int = 1
    count: int = 1
    force: bool = False

    def to_dict(self):
        return {"subcommand": self.subcommand, "loop": self.loop.to_dict(), "seed": self.seed,
                "report": self.report, "count": self.count}


# --- config resolution -------------------------------------------------------------


def _coerce(value, default):
    if isinstance(default, bool):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"not a boolean: {value!r}")
    if isinstance(default, tuple):
        return tuple(type(default[0])(x) for x in value.replace(",", " ").split())
    try:
        return type(default)(value)
    except ValueError:
        raise UsageError(f"bad value {value!r}") from None


def _section(cp, name, cls):
    if not cp.has_section(name):
        return {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    defaults = cls()
    out = {}
    for key, raw in cp.items(name):
        k = key.replace("-", "_")
        if k not in fields or k in ("selection", "grid"):
            raise UsageError(f"unknown key [{name}] {key}")
        out[k] = _coerce(raw, getattr(defaults, k))
    return out


def read_config_file(path):
    cp = configparser.ConfigParser()
    try:
        with open(path) as f:
            cp.read_file(f)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from None
    unknown = set(cp.sections()) - {"loop", "selection"}
    if unknown:
        raise UsageError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    return _section(cp, "loop", LoopConfig), _section(cp, "selection", SelectionConfig)


_FLAG_TO_LOOP = {"iterations": "iterations", "scene_completer": "scene_completer",
                 "instance_completer": "instance_completer", "seed": "seed"}
_FLAG_TO_SELECTION = {"sigma": "sigma", "beta": "beta", "max_proposals": "k", "nms_iou": "nms_iou"}


def resolve(args):
    """Merge defaults, config file and flags into a ``RunConfig``."""
    loop_kw, sel_kw = ({}, {}) if not getattr(args, "config", None) else read_config_file(args.config)
    for flag, key in _FLAG_TO_LOOP.items():
        if getattr(args, flag, None) is not None:
            loop_kw[key] = getattr(args, flag)
    for flag, key in _FLAG_TO_SELECTION.items():
        if getattr(args, flag, None) is not None:
            sel_kw[key] = getattr(args, flag)
    try:
        sel = SelectionConfig(**sel_kw)
        loop = LoopConfig(selection=sel, **loop_kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return RunConfig(
        subcommand=args.command,
        inputs=tuple(Path(p) for p in getattr(args, "inputs", ())),
        output=Path(args.output) if getattr(args, "output", None) else None,
        loop=loop,
        seed=loop.seed,
        report=getattr(args, "report", "table"),
        jobs=max(1, getattr(args, "jobs", 1) or 1),
        count=getattr(args, "count", 1) if getattr(args, "count", None) is not None else 1,
        force=bool(getattr(args, "force", False)),
    )


def _check_output(path, force, is_dir):
    if path.exists():
        if not force:
            raise UsageError(f"{path} exists (use --force to overwrite)")
        if is_dir and path.is_dir():
            shutil.rmtree(path)
        elif not is_dir:
            path.unlink()


def _check_inputs(paths):
    for p in paths:
        if not p.exists():
            raise UsageError(f"no such file or directory: {p}")


# --- subcommands -------------------------------------------------------------------


def _generate_one(seed, out):
    from .synth import SceneRecipe, generate, write_bundle

    scene = generate(SceneRecipe(seed=seed))
    return str(write_bundle(scene, out))


def cmd_generate(cfg):
    if cfg.count < 0:
        raise UsageError("--count must be >= 0")
    out = cfg.output
    _check_output(out, cfg.force, is_dir=True)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.count == 0:
        print("warning: --count 0, no bundles written", file=sys.stderr)
    seeds = [cfg.seed + i for i in range(cfg.count)]
    dirs = [out / f"scene_{s:05d}" for s in seeds]
    if cfg.jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(cfg.jobs) as ex:
            paths = list(ex.map(_generate_one, seeds, dirs))
    else:
        paths = [_generate_one(s, d) for s, d in zip(seeds, dirs)]
    manifest = {
        "config": cfg.to_dict(),
        "bundles": [{"seed": s, "path": d.name,
                     "manifest_sha256": hashlib.sha256(Path(p).read_bytes()).hexdigest()}
                    for s, d, p in zip(seeds, dirs, paths)],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    for p in paths:
        print(p)
    return EXIT_OK


def _summary_line(stage):
    m = stage.metrics
    if not m:
        return f"iteration {stage.index}: done"
    return (f"iteration {stage.index}: SC IoU {m['sc_iou']:.3f}  "
            f"SSC mIoU {m['ssc_miou']:.3f}")


def cmd_complete(cfg):
    from .synth import read_bundle

    _check_inputs(cfg.inputs)
    bundle = read_bundle(cfg.inputs[0])
    _check_output(cfg.output, cfg.force, is_dir=True)
    trace = run_loop(bundle.tsdf, bundle.vs0, cfg.loop, gt=bundle.gt,
                     gt_instances=bundle.instances)
    for st in trace.stages:
        print(_summary_line(st))
    src = hashlib.sha256((bundle.path / "manifest.json").read_bytes()).hexdigest()
    write_trace(trace, cfg.output, extra={"run": cfg.to_dict(), "bundle_sha256": src})
    print(cfg.output)
    return EXIT_OK


def _load_prediction(path):
    """``[(name, LabelVolume, proposals or None)]`` from a trace dir or a SISV file."""
    from .io import load_any, read_proposals
    from .volumes import LabelVolume, SemanticVolume, argmax_labels

    def labels_of(vol):
        if isinstance(vol, SemanticVolume):
            return argmax_labels(vol)
        if isinstance(vol, LabelVolume):
            return vol
        raise FormatError(path, 0, "a TSDF volume carries no labels to evaluate")

    if path.is_dir():
        stages = sorted(path.glob("s*.sisv"), key=lambda p: int(p.stem[1:]))
        if not stages:
            raise FormatError(path, 0, "trace directory has no stage volumes")
        rows = []
        for p in stages:
            i = int(p.stem[1:])
            prop_file = path / f"i{i}" / "proposals.txt"
            props = read_proposals(prop_file) if prop_file.exists() else None
            rows.append((f"S{i}", labels_of(load_any(p)), props))
        return rows
    return [(path.stem, labels_of(load_any(path)), None)]


def _load_gt(path):
    from .io import load_labels
    from .synth import read_bundle

    if path.is_dir():
        b = read_bundle(path)
        return b.gt, b.instances
    return load_labels(path), None


def cmd_evaluate(cfg):
    from .errors import InvalidInputError
    from .metrics import eval_detection, eval_sc, eval_ssc, format_table

    _check_inputs(cfg.inputs)
    pred_path, gt_path = cfg.inputs
    gt, gt_instances = _load_gt(gt_path)
    if gt.visibility is None or not np.any(gt.visibility):
        raise InvalidInputError(f"{gt_path}: ground truth carries no evaluation mask")
    rows, out = [], []
    for name, pred, props in _load_prediction(pred_path):
        if pred.spec != gt.spec:
            raise InvalidInputError(f"grid mismatch: {pred.spec} vs {gt.spec}")
        sc = eval_sc(pred, gt)
        ssc = eval_ssc(pred, gt, max(int(gt.labels.max()), int(pred.labels.max()), 11))
        det = eval_detection(props, gt_instances) if props is not None and gt_instances else None
        rows.append((name, sc, ssc, det))
        entry = {"name": name, "sc": sc.to_dict(), "ssc": ssc.to_dict()}
        if det is not None:
            entry["detection"] = det.to_dict()
        out.append(entry)
    if cfg.report == "json":
        print(json.dumps(out, indent=2, sort_keys=True))
    else:
        print(format_table([(n, sc, ssc) for n, sc, ssc, _ in rows]))
        for name, _, _, det in rows:
            if det is not None:
                print(f"{name} detection@{det.iou_threshold:.2f}: recall {100 * det.recall:.1f}  "
                      f"mAP {100 * det.map:.1f}")
    return EXIT_OK


def cmd_export_mesh(cfg):
    from .io import export_voxel_mesh, load_any

    _check_inputs(cfg.inputs)
    vol = load_any(cfg.inputs[0])
    _check_output(cfg.output, cfg.force, is_dir=False)
    nv, nf = export_voxel_mesh(cfg.output, vol)
    print(f"{cfg.output}: {nv} vertices, {nf} faces")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "complete": cmd_complete,
            "evaluate": cmd_evaluate, "export-mesh": cmd_export_mesh}


def build_parser():
    p = _Parser(prog="sisc", description="Scene-instance-scene completion toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="INI file with [loop] / [selection] sections")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")

    g = sub.add_parser("generate", help="write synthetic scene bundles")
    g.add_argument("output", help="output directory")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--jobs", type=int, default=1)
    common(g)

    c = sub.add_parser("complete", help="run the refinement loop on a bundle")
    c.add_argument("inputs", nargs=1, metavar="bundle")
    c.add_argument("output", help="trace directory")
    c.add_argument("--iterations", type=int, default=None)
    c.add_argument("--scene-completer", choices=SCENE_COMPLETERS, default=None)
    c.add_argument("--instance-completer", choices=INSTANCE_COMPLETERS, default=None)
    c.add_argument("--seed", type=int, default=None)
    c.add_argument("--sigma", type=float, default=None)
    c.add_argument("--beta", type=float, default=None)
    c.add_argument("--max-proposals", type=int, default=None)
    c.add_argument("--nms-iou", type=float, default=None)
    common(c)

    e = sub.add_parser("evaluate", help="SC / SSC / detection report")
    e.add_argument("inputs", nargs=2, metavar=("prediction", "gt"),
                   help="trace dir or SISV volume; bundle dir or label SISV")
    e.add_argument("--report", choices=("json", "table"), default="table")
    common(e)

    m = sub.add_parser("export-mesh", help="coloured voxel mesh PLY from a SISV volume")
    m.add_argument("inputs", nargs=1, metavar="volume")
    m.add_argument("output", help="PLY path")
    common(m)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"sisc {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"sisc {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SiscError, ValueError, OSError) as exc:
        print(f"sisc {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
