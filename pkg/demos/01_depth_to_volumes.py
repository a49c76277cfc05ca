"""
From a depth image to TSDF and semantic volumes
===============================================

Render a synthetic room, back-project its depth map and build the two
network inputs: the signed-distance volume and the projected class
confidences.
"""

import numpy as np

from sisc import classes as K
from sisc.synth import SceneRecipe, generate
from sisc.volumes import Visibility, argmax_labels, build_tsdf, depth_to_points, project_semantics

scene = generate(SceneRecipe(seed=3))
print("grid", scene.spec.dims, "voxel", scene.spec.voxel_size, "m")
print("instances:", [K.CLASS_NAMES[i.class_id] for i in scene.instances])

# valid pixels become world points
pts = depth_to_points(scene.depth, scene.cam)
print(f"{len(pts)} surface points from a {scene.depth.values.shape} depth map")

tsdf = build_tsdf(pts, scene.cam, scene.spec)
for v in Visibility:
    print(f"  {v.name:<8} {np.sum(tsdf.visibility == v):6d} voxels")
print("d range", tsdf.d.min(), tsdf.d.max())

# class confidences land in the voxel under each pixel
sem = project_semantics(scene.seg2d, scene.depth, scene.cam, scene.spec)
lab = argmax_labels(sem).labels
seen = np.bincount(lab.ravel(), minlength=K.NUM_CLASSES + 1)
for c in range(1, K.NUM_CLASSES + 1):
    if seen[c]:
        print(f"  {K.CLASS_NAMES[c]:<10} {seen[c]:5d} visible voxels")
