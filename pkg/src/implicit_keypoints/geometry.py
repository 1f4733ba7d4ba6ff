"""Keypoint spheres as analytic distance fields.

A set of keypoints with a shared radius defines the union of balls
``B(c_i, r)``; its signed distance is ``min_i ||p - c_i|| - r``. The
stacked unsigned distance keeps one channel per semantic label.

All functions accept a single point of shape ``(3,)`` or a batch of shape
``(N, 3)`` and return results of the matching rank.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

DEFAULT_RADIUS = 0.08
NONEXISTENT_LABEL_DISTANCE = 1.0
_SINGULAR_EPS = 1e-12


class GeometryError(ValueError):
    pass


def _as_points(p) -> tuple[np.ndarray, bool]:
    arr = np.asarray(p, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[-1] != 3:
        raise GeometryError(f"expected points with 3 coordinates, got shape {arr.shape}")
    return arr, single


@dataclass(frozen=True)
class KeypointSet:
    """Ordered keypoints with optional semantic labels in ``[0, label_count)``."""

    points: np.ndarray
    labels: Optional[np.ndarray] = None
    label_count: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise GeometryError("keypoint coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(labels) != len(pts):
                raise GeometryError("labels must align with points")
            k = self.label_count or (int(labels.max()) + 1 if len(labels) else 0)
            if len(labels) and (labels.min() < 0 or labels.max() >= k):
                raise GeometryError(f"labels must lie in [0, {k})")
            object.__setattr__(self, "labels", labels)
            object.__setattr__(self, "label_count", int(k))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def translated(self, t) -> "KeypointSet":
        return KeypointSet(self.points + np.asarray(t, dtype=np.float64), self.labels, self.label_count)


@dataclass(frozen=True)
class SphereField:
    keypoints: KeypointSet
    radius: float = DEFAULT_RADIUS

    def __post_init__(self):
        if not self.radius > 0:
            raise GeometryError("radius must be positive")

    @classmethod
    def from_points(cls, points, radius: float = DEFAULT_RADIUS) -> "SphereField":
        return cls(KeypointSet(np.asarray(points, dtype=np.float64)), float(radius))

    @property
    def centers(self) -> np.ndarray:
        return self.keypoints.points

    def __call__(self, p) -> np.ndarray:
        return sphere_sdf(p, self)

    def gradient(self, p) -> np.ndarray:
        return sphere_sdf_gradient(p, self)


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise GeometryError("triangle index out of range")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.vertices):
                raise GeometryError("one normal per vertex required")

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def translated(self, t) -> "TriangleMesh":
        return TriangleMesh(self.vertices + np.asarray(t, dtype=np.float64), self.triangles.copy(),
                            None if self.normals is None else self.normals.copy())


def _distance_to(p: np.ndarray, c: np.ndarray) -> np.ndarray:
    diff = p - c
    return np.sqrt(np.einsum("nc,nc->n", diff, diff))


def _nearest_center(p: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # strict "<" keeps the lowest index on ties
    best = _distance_to(p, centers[0])
    idx = np.zeros(len(p), dtype=np.int64)
    for j in range(1, len(centers)):
        d = _distance_to(p, centers[j])
        closer = d < best
        best = np.where(closer, d, best)
        idx[closer] = j
    return best, idx


def sphere_sdf(p, field: SphereField) -> np.ndarray | float:
    """Signed distance to the boundary of the union of keypoint spheres."""
    centers = field.centers
    if len(centers) == 0:
        raise GeometryError("empty field")
    pts, single = _as_points(p)
    d = _nearest_center(pts, centers)[0] - field.radius
    return float(d[0]) if single else d


def sphere_sdf_gradient(p, field: SphereField) -> np.ndarray:
    """Unit direction from the nearest center; ties go to the lowest index."""
    centers = field.centers
    if len(centers) == 0:
        raise GeometryError("empty field")
    pts, single = _as_points(p)
    dmin, nearest = _nearest_center(pts, centers)
    if np.any(dmin < _SINGULAR_EPS):
        raise GeometryError("singular gradient")
    grad = (pts - centers[nearest]) / dmin[:, None]
    return grad[0] if single else grad


def stacked_udf(p, keypoints: KeypointSet) -> np.ndarray:
    """Per-label distance to the keypoint carrying that label.

    Channels of labels absent from ``keypoints`` hold exactly 1.0; a label
    shared by several keypoints takes the smallest distance.
    """
    if not keypoints.labeled:
        raise GeometryError("unlabeled keypoints")
    pts, single = _as_points(p)
    k = keypoints.label_count
    out = np.full((len(pts), k), np.inf)
    for c, label in zip(keypoints.points, keypoints.labels):
        np.minimum(out[:, label], _distance_to(pts, c), out=out[:, label])
    out[np.isinf(out)] = NONEXISTENT_LABEL_DISTANCE
    return out[0] if single else out


def label_of(udf_values) -> np.ndarray | int:
    """Argmin channel; ``np.argmin`` already resolves ties to the lowest index."""
    vals = np.asarray(udf_values, dtype=np.float64)
    if vals.shape[-1] == 0:
        raise GeometryError("empty udf vector")
    if vals.ndim == 1:
        return int(np.argmin(vals))
    return np.argmin(vals, axis=-1)
