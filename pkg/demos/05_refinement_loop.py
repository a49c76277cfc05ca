"""
Scene, instance, scene
======================

Run two refinement rounds with the diffusion scene completer and the
shape-prior instance completer, then write the trace to disk.
"""

import tempfile
from pathlib import Path

from sisc.loop import LoopConfig, collect_stage_data, run_loop, write_trace
from sisc.synth import SceneRecipe, build_shape_library, generate

library = build_shape_library()
scene = generate(SceneRecipe(seed=5))
tsdf, vs0 = scene.inputs

trace = run_loop(tsdf, vs0, LoopConfig(iterations=2), library=library,
                 gt=scene.gt, gt_instances=scene.instances)
for st in trace.stages:
    m = st.metrics
    print(f"S{st.index}: SC IoU {m['sc_iou']:.3f}  SSC mIoU {m['ssc_miou']:.3f}  "
          f"instances {len(st.instances)}  patched voxels {st.patch_size}")

# every round feeds the training sets of both stages
data = collect_stage_data([trace])
print("scene-stage samples", [s.iteration for s in data.scene],
      "instance-stage samples", [s.iteration for s in data.instance])

out = Path(tempfile.mkdtemp()) / "trace"
write_trace(trace, out)
print(sorted(p.name for p in out.iterdir()))
