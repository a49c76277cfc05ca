"""
Canonical frames, gridding and re-gridding
==========================================

An instance is normalized into its box, splatted trilinearly onto a dense
grid and read back as points.
"""

import numpy as np

from sisc.pointgrid import (
    CanonicalFrame,
    PointCloud,
    canonicalize,
    decanonicalize,
    gridding,
    regridding,
)

rng = np.random.default_rng(0)
world = rng.uniform([1.0, 0.0, 2.0], [1.8, 0.9, 2.6], (400, 3))
box = CanonicalFrame(center=(1.4, 0.45, 2.3), half_extents=(0.4, 0.45, 0.3))

canon, frame, dropped = canonicalize(PointCloud(world), box)
print("canonical range", canon.points.min(0).round(3), canon.points.max(0).round(3), "dropped", dropped)
err = np.abs(decanonicalize(canon, frame).points - world).max()
print("round trip error", err)

# every point spreads unit mass over its 8 neighbouring vertices
grid = gridding(canon, (32, 32, 32))
print("grid mass", grid.values.sum(), "for", len(canon), "points")

# thresholded read-back versus the count-preserving mode
print("threshold 0.5 ->", len(regridding(grid, 0.5)), "points")
print("conserving    ->", len(regridding(grid, conserve=True)), "points")
