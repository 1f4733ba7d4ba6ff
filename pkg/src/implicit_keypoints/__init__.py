"""Keypoints represented as implicit fields of small spheres.

Keypoints become sphere centers, a sinusoidal MLP learns the signed
distance field of the sphere union, and the centers are recovered from the
field's zero level set with Marching Cubes and a known-radius Hough vote.
A stacked unsigned distance field carries one channel per semantic label.
"""

from .extraction import ExtractionConfig, best_sphere_center, extract_keypoints
from .geometry import KeypointSet, SphereField, TriangleMesh, label_of, sphere_sdf, stacked_udf
from .isosurface import eval_grid, marching_cubes, split_components
from .metrics import bhd, cd, miou_curve, topk_accuracy

__version__ = "0.1.0"

__all__ = [
    "ExtractionConfig",
    "KeypointSet",
    "SphereField",
    "TriangleMesh",
    "bhd",
    "best_sphere_center",
    "cd",
    "eval_grid",
    "extract_keypoints",
    "label_of",
    "marching_cubes",
    "miou_curve",
    "sphere_sdf",
    "split_components",
    "stacked_udf",
    "topk_accuracy",
]
