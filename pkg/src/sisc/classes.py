"""Semantic class palette shared by the generator, metrics and exporters.

Label 0 is always "empty". Class ids 1..11 follow the NYU 11-class layout
used by the SSC result tables.
"""

EMPTY = 0

CLASS_NAMES = (
    "empty",
    "ceiling",
    "floor",
    "wall",
    "window",
    "chair",
    "bed",
    "sofa",
    "table",
    "tvs",
    "furniture",
    "objects",
)

# abbreviations in table column order
TABLE_COLUMNS = (
    "ceil.",
    "floor",
    "wall",
    "win.",
    "chair",
    "bed",
    "sofa",
    "table",
    "tvs",
    "furn.",
    "objs.",
)

NUM_CLASSES = len(CLASS_NAMES) - 1

CEILING, FLOOR, WALL, WINDOW, CHAIR, BED, SOFA, TABLE, TVS, FURNITURE, OBJECTS = range(1, 12)

SHELL_CLASSES = (CEILING, FLOOR, WALL, WINDOW)
INSTANCE_CLASSES = (CHAIR, BED, SOFA, TABLE, TVS, FURNITURE, OBJECTS)

# RGB per label id, used by the voxel mesh exporter
PALETTE = (
    (0, 0, 0),
    (214, 38, 40),
    (43, 160, 4),
    (158, 216, 229),
    (114, 158, 206),
    (204, 204, 91),
    (255, 186, 119),
    (147, 102, 188),
    (30, 119, 181),
    (188, 188, 33),
    (255, 127, 12),
    (196, 175, 214),
)
