"""Two-stage organ segmentation bench: forest VOI localization plus 2D/3D U-Nets."""

__version__ = "0.1.0"

ORGANS = ("liver", "kidney_left", "kidney_right", "spleen", "pancreas")
