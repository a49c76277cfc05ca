"""Axis-aligned 3D box helpers. Boxes are (center, size) with full sizes."""

import numpy as np


def box_corners(center, size):
    c = np.asarray(center, dtype=np.float64)
    h = np.asarray(size, dtype=np.float64) / 2
    return c - h, c + h


def box_iou(center_a, size_a, center_b, size_b):
    """IoU between box sets, broadcasting over leading dims."""
    lo_a, hi_a = box_corners(center_a, size_a)
    lo_b, hi_b = box_corners(center_b, size_b)
    inter = np.clip(np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b), 0, None).prod(-1)
    vol_a = np.prod(np.asarray(size_a, dtype=np.float64), axis=-1)
    vol_b = np.prod(np.asarray(size_b, dtype=np.float64), axis=-1)
    union = vol_a + vol_b - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def pairwise_iou(centers_a, sizes_a, centers_b, sizes_b):
    ca, sa = np.asarray(centers_a).reshape(-1, 3), np.asarray(sizes_a).reshape(-1, 3)
    cb, sb = np.asarray(centers_b).reshape(-1, 3), np.asarray(sizes_b).reshape(-1, 3)
    return box_iou(ca[:, None], sa[:, None], cb[None], sb[None])
