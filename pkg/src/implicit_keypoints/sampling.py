"""Synthetic ground truth and supervision samples for keypoint-sphere fields."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import (
    DEFAULT_RADIUS,
    KeypointSet,
    SphereField,
    TriangleMesh,
    sphere_sdf,
    stacked_udf,
)

SAMPLES_MAGIC = b"IKPS"
SAMPLES_VERSION = 1
_INSIDE_TOL = 1e-6


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Box:
    lo: tuple = (-1.0, -1.0, -1.0)
    hi: tuple = (1.0, 1.0, 1.0)

    @classmethod
    def cube(cls, half: float) -> "Box":
        return cls((-half,) * 3, (half,) * 3)

    @property
    def lo_arr(self) -> np.ndarray:
        return np.asarray(self.lo, dtype=np.float64)

    @property
    def hi_arr(self) -> np.ndarray:
        return np.asarray(self.hi, dtype=np.float64)

    def uniform(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lo_arr, self.hi_arr, size=(n, 3))

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.all((pts >= self.lo_arr) & (pts <= self.hi_arr), axis=1)


@dataclass(frozen=True)
class SampleConfig:
    n_volume: int = 10_000
    n_surface: int = 10_000
    bounds: Box = field(default_factory=Box)
    icosphere_level: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.n_volume < 0 or self.n_surface < 0:
            raise ValueError("sample counts must be nonnegative")
        if not 0 <= self.icosphere_level <= 6:
            raise ValueError("icosphere_level must lie in [0, 6]")


@dataclass
class TrainingSet:
    """Struct-of-arrays batch of supervision samples.

    Volume samples come first, surface samples last. Normals are zero rows
    for volume samples; ``surface`` flags the rows that carry a normal.
    """

    points: np.ndarray
    sdf: np.ndarray
    normals: np.ndarray
    surface: np.ndarray
    udf: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.points)

    @property
    def n_surface(self) -> int:
        return int(self.surface.sum())

    @property
    def n_volume(self) -> int:
        return len(self) - self.n_surface

    def subset(self, idx) -> "TrainingSet":
        return TrainingSet(self.points[idx], self.sdf[idx], self.normals[idx], self.surface[idx],
                           None if self.udf is None else self.udf[idx])


_PHI = (1.0 + 5.0 ** 0.5) / 2.0
_ICO_VERTS = np.array([
    [-1, _PHI, 0], [1, _PHI, 0], [-1, -_PHI, 0], [1, -_PHI, 0],
    [0, -1, _PHI], [0, 1, _PHI], [0, -1, -_PHI], [0, 1, -_PHI],
    [_PHI, 0, -1], [_PHI, 0, 1], [-_PHI, 0, -1], [-_PHI, 0, 1],
], dtype=np.float64)
_ICO_FACES = np.array([
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
    [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
], dtype=np.int64)


def _unit_icosphere(level: int) -> tuple[np.ndarray, np.ndarray]:
    verts = [v / np.linalg.norm(v) for v in _ICO_VERTS]
    faces = _ICO_FACES
    for _ in range(level):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = np.asarray(new_faces, dtype=np.int64)
    return np.asarray(verts), faces


_UNIT_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def icosphere(center, radius: float, level: int) -> TriangleMesh:
    """Subdivided icosahedron with ``10 * 4**level + 2`` vertices on the sphere."""
    if radius <= 0 or level < 0:
        raise ValueError("icosphere needs radius > 0 and level >= 0")
    if level not in _UNIT_CACHE:
        _UNIT_CACHE[level] = _unit_icosphere(level)
    unit, faces = _UNIT_CACHE[level]
    center = np.asarray(center, dtype=np.float64)
    return TriangleMesh(center + radius * unit, faces.copy(), unit.copy())


def random_keypoint_set(k: int, min_separation: float, bounds: Box = Box(), seed=0,
                        label_count: Optional[int] = None) -> KeypointSet:
    """Rejection-sample ``k`` points in ``bounds`` at least ``min_separation`` apart.

    With ``label_count`` set, the points receive distinct labels drawn from
    ``range(label_count)``.
    """
    if k < 1 or min_separation < 0:
        raise ValueError("need k >= 1 and min_separation >= 0")
    rng = np.random.default_rng(seed)
    pts: list[np.ndarray] = []
    attempts = 0
    cap = 10_000 * k
    while len(pts) < k:
        if attempts >= cap:
            raise SamplingError("packing failed")
        attempts += 1
        cand = bounds.uniform(rng, 1)[0]
        if pts and np.min(np.linalg.norm(np.asarray(pts) - cand, axis=1)) < min_separation:
            continue
        pts.append(cand)
    points = np.asarray(pts)
    if label_count is None:
        return KeypointSet(points)
    if label_count < k:
        raise ValueError("label_count must be at least k for distinct labels")
    labels = np.sort(rng.choice(label_count, size=k, replace=False))
    return KeypointSet(points, labels, label_count)


def surface_pool(field_: SphereField, level: int) -> tuple[np.ndarray, np.ndarray]:
    """Icosphere vertices of every keypoint that lie on the union's boundary."""
    unit, _ = _UNIT_CACHE.get(level) or _UNIT_CACHE.setdefault(level, _unit_icosphere(level))
    centers = field_.centers
    pts = (centers[:, None, :] + field_.radius * unit[None, :, :]).reshape(-1, 3)
    normals = np.broadcast_to(unit, (len(centers),) + unit.shape).reshape(-1, 3).copy()
    keep = sphere_sdf(pts, field_) >= -_INSIDE_TOL
    return pts[keep], normals[keep]


def make_training_set(field_: SphereField, cfg: SampleConfig) -> TrainingSet:
    rng = np.random.default_rng(cfg.seed)
    volume = cfg.bounds.uniform(rng, cfg.n_volume)
    pool_pts, pool_normals = surface_pool(field_, cfg.icosphere_level)
    if len(pool_pts) >= cfg.n_surface:
        pick = rng.choice(len(pool_pts), size=cfg.n_surface, replace=False)
        surf_pts, surf_normals = pool_pts[pick], pool_normals[pick]
    else:
        surf_pts, surf_normals = pool_pts, pool_normals
        volume = np.vstack([volume, cfg.bounds.uniform(rng, cfg.n_surface - len(pool_pts))])
    points = np.vstack([volume, surf_pts])
    sdf = np.concatenate([sphere_sdf(volume, field_) if len(volume) else np.zeros(0),
                          np.zeros(len(surf_pts))])
    normals = np.vstack([np.zeros_like(volume), surf_normals])
    surface = np.concatenate([np.zeros(len(volume), bool), np.ones(len(surf_pts), bool)])
    return TrainingSet(points, sdf, normals, surface)


def make_udf_training_set(keypoints: KeypointSet, cfg: SampleConfig,
                          radius: float = DEFAULT_RADIUS) -> TrainingSet:
    """Same sample locations as the SDF set, with stacked-UDF targets attached."""
    if not keypoints.labeled:
        raise SamplingError("unlabeled keypoints")
    ts = make_training_set(SphereField(keypoints, radius), cfg)
    ts.udf = stacked_udf(ts.points, keypoints)
    return ts


def write_samples(path, ts: TrainingSet) -> None:
    """Binary sample file: ``IKPS`` header then little-endian f32 records.

    Header: magic, version u32, n_volume u32, n_surface u32, K u32.
    Volume records are ``x y z sdf [udf*K]``; surface records insert the
    normal after ``sdf``: ``x y z sdf nx ny nz [udf*K]``.
    """
    k = 0 if ts.udf is None else ts.udf.shape[1]
    vol, surf = ~ts.surface, ts.surface
    head = struct.pack("<4sIIII", SAMPLES_MAGIC, SAMPLES_VERSION, int(vol.sum()), int(surf.sum()), k)
    vcols = [ts.points[vol], ts.sdf[vol, None]]
    scols = [ts.points[surf], ts.sdf[surf, None], ts.normals[surf]]
    if k:
        vcols.append(ts.udf[vol])
        scols.append(ts.udf[surf])
    with open(path, "wb") as f:
        f.write(head)
        f.write(np.hstack(vcols).astype("<f4").tobytes())
        f.write(np.hstack(scols).astype("<f4").tobytes())


def read_samples(path) -> TrainingSet:
    raw = Path(path).read_bytes()
    magic, version, n_vol, n_surf, k = struct.unpack_from("<4sIIII", raw, 0)
    if magic != SAMPLES_MAGIC or version != SAMPLES_VERSION:
        raise SamplingError(f"{path}: not an IKPS v{SAMPLES_VERSION} file")
    off = struct.calcsize("<4sIIII")
    vw, sw = 4 + k, 7 + k
    vol = np.frombuffer(raw, "<f4", n_vol * vw, off).reshape(n_vol, vw).astype(np.float64)
    off += 4 * n_vol * vw
    surf = np.frombuffer(raw, "<f4", n_surf * sw, off).reshape(n_surf, sw).astype(np.float64)
    points = np.vstack([vol[:, :3], surf[:, :3]])
    sdf = np.concatenate([vol[:, 3], surf[:, 3]])
    normals = np.vstack([np.zeros((n_vol, 3)), surf[:, 4:7]])
    surface = np.concatenate([np.zeros(n_vol, bool), np.ones(n_surf, bool)])
    udf = np.vstack([vol[:, 4:], surf[:, 7:]]) if k else None
    return TrainingSet(points, sdf, normals, surface, udf)
