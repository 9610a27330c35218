"""Relational two-stage U-Net for volumetric lobe segmentation."""

__version__ = "0.1.0"

LABELS = (0, 1, 2, 3, 4, 5)
LOBE_NAMES = {1: "lul", 2: "lll", 3: "rul", 4: "rll", 5: "rml"}
