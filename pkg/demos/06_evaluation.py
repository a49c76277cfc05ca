"""
Evaluating completions
======================

SC and SSC on the occluded and surface voxels, printed in the usual
results-table layout, for the raw input and the loop output.
"""

import json

from sisc.loop import LoopConfig, run_loop
from sisc.metrics import eval_sc, eval_ssc, format_table, report_json
from sisc.synth import SceneRecipe, build_shape_library, generate
from sisc.volumes import argmax_labels

library = build_shape_library()
rows = []
sc_tot = ssc_tot = None
for seed in range(5):
    scene = generate(SceneRecipe(seed=seed))
    tsdf, vs0 = scene.inputs
    trace = run_loop(tsdf, vs0, LoopConfig(), library=library, gt=scene.gt)
    pred = argmax_labels(trace.final)
    sc, ssc = eval_sc(pred, scene.gt), eval_ssc(pred, scene.gt)
    rows.append((f"scene {seed}", sc, ssc))
    sc_tot = sc if sc_tot is None else sc_tot + sc
    ssc_tot = ssc if ssc_tot is None else ssc_tot + ssc

rows.append(("pooled", sc_tot, ssc_tot))
print(format_table(rows))
print(json.dumps(json.loads(report_json(sc_tot, ssc_tot))["sc"], indent=1))
