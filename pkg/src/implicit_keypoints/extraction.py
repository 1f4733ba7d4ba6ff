"""Recover keypoints (sphere centers of a known radius) from sphere-mesh vertices.

Per connected component:

1. every vertex votes for the bins lying on a shell of the known radius
   around it (Hough transform for spheres of known radius);
2. bins above the vote threshold are grouped 26-connectedly and each group
   contributes its best bin as a candidate center;
3. vertices are assigned to their nearest candidate and each candidate is
   refitted with the closed-form minimum-variance sphere center, until the
   centers stop moving;
4. candidates closer than the radius are merged into their centroid and
   step 3 is repeated.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .geometry import DEFAULT_RADIUS, KeypointSet, TriangleMesh
from .isosurface import split_components

log = logging.getLogger(__name__)

ICOSPHERE_VERTICES = 2562


class DegeneratePointSet(ValueError):
    pass


class ExtractionError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExtractionConfig:
    grid_size: float = 1.0 / 32.0
    radius: float = DEFAULT_RADIUS
    epsilon: float = 0.01
    n_vote: int = 80
    n_max: int = 10
    max_merge_rounds: int = 10
    # "annulus" votes for bins on the radius shell, "literal" for bins near the point
    voting: str = "annulus"
    # scale n_vote by component vertex count / 2562
    density_normalize: bool = False
    # also seed candidates at strong secondary peaks inside one vote cluster
    split_peaks: bool = True
    peak_ratio: float = 0.5

    def __post_init__(self):
        if min(self.grid_size, self.radius, self.epsilon) <= 0 or min(self.n_vote, self.n_max) < 1:
            raise ValueError("extraction parameters must be positive")
        if self.voting not in ("annulus", "literal"):
            raise ValueError(f"unknown voting rule {self.voting!r}")


@dataclass
class VoteGrid:
    origin: np.ndarray
    grid_size: float
    counts: np.ndarray

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.counts.shape

    def center(self, idx) -> np.ndarray:
        return self.origin + (np.asarray(idx, dtype=np.float64) + 0.5) * self.grid_size


def _vote_offsets(reach: int) -> np.ndarray:
    r = np.arange(-reach, reach + 1)
    return np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)


def hough_vote(points, cfg: ExtractionConfig = ExtractionConfig(), chunk: int = 256) -> VoteGrid:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ExtractionError("no points to vote with")
    d, r = cfg.grid_size, cfg.radius
    origin = pts.min(axis=0) - r
    extent = pts.max(axis=0) + r - origin
    shape = np.maximum(np.ceil(extent / d).astype(np.int64), 1)
    if cfg.voting == "annulus":
        reach = int(np.ceil((r + d / 2) / d)) + 1
    else:
        reach = 1
    offsets = _vote_offsets(reach)
    counts = np.zeros(int(np.prod(shape)), dtype=np.int64)
    for s in range(0, len(pts), chunk):
        p = pts[s:s + chunk]
        base = np.floor((p - origin) / d).astype(np.int64)
        idx = base[:, None, :] + offsets[None, :, :]
        inside = np.all((idx >= 0) & (idx < shape), axis=2)
        centers = origin + (idx + 0.5) * d
        dist = np.linalg.norm(centers - p[:, None, :], axis=2)
        if cfg.voting == "annulus":
            hit = inside & (np.abs(dist - r) <= d / 2)
        else:
            hit = inside & (dist <= d / 2)
        sel = idx[hit]
        flat = sel[:, 0] * shape[1] * shape[2] + sel[:, 1] * shape[2] + sel[:, 2]
        counts += np.bincount(flat, minlength=len(counts))
    return VoteGrid(origin, d, counts.reshape(tuple(shape)))


def cluster_candidates(votes: VoteGrid, cfg: ExtractionConfig = ExtractionConfig(),
                       n_vote: Optional[float] = None) -> list[np.ndarray]:
    """One candidate per 26-connected cluster of bins with more than ``n_vote`` votes.

    The candidate is the cluster's highest bin (ties: smallest bin index).
    With ``cfg.split_peaks``, further local maxima of the cluster reaching
    ``peak_ratio`` of its highest count and lying more than one radius from
    every accepted candidate are added, so spheres that intersect and share
    one vote cluster still get a candidate each.
    """
    threshold = cfg.n_vote if n_vote is None else n_vote
    counts = votes.counts
    labels, n_clusters = ndimage.label(counts > threshold, structure=np.ones((3, 3, 3)))
    if n_clusters == 0:
        return []
    local_max = counts == ndimage.maximum_filter(counts, size=3, mode="constant", cval=-1)
    flat = np.flatnonzero(labels)
    flat = flat[np.argsort(labels.ravel()[flat], kind="stable")]
    groups = np.split(flat, np.cumsum(np.bincount(labels.ravel()[flat])[1:])[:-1])
    out = []
    for group in groups:
        members = np.stack(np.unravel_index(group, counts.shape), axis=1)
        vals = counts.ravel()[group]
        # descending votes, then lexicographic index (argwhere is already lexicographic)
        order = np.lexsort((np.arange(len(vals)), -vals))
        best = members[order[0]]
        accepted = [votes.center(best)]
        if cfg.split_peaks:
            floor = cfg.peak_ratio * vals[order[0]]
            peaks = [i for i in order[1:] if vals[i] >= floor and local_max[tuple(members[i])]]
            for c in votes.center(members[peaks]) if peaks else []:
                if np.min(np.linalg.norm(np.asarray(accepted) - c, axis=1)) > cfg.radius:
                    accepted.append(c)
        out.extend(accepted)
    return out


_MAX_CONDITION = 1e8


def best_sphere_center(points) -> np.ndarray:
    """Closed-form center minimizing the variance of squared radii.

    ``c = mean + 0.5 * Cov^-1 * gamma`` with ``Cov`` the (biased) covariance
    and ``gamma = mean((x - mean) * ||x - mean||^2)``.
    """
    x = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(x) < 4:
        raise DegeneratePointSet("degenerate point set")
    mean = x.mean(axis=0)
    y = x - mean
    cov = y.T @ y / len(x)
    if not np.all(np.isfinite(cov)) or np.linalg.cond(cov) > _MAX_CONDITION:
        raise DegeneratePointSet("degenerate point set")
    gamma = (y * np.einsum("nc,nc->n", y, y)[:, None]).mean(axis=0)
    return mean + 0.5 * np.linalg.solve(cov, gamma)


def _partition(points: np.ndarray, centers: np.ndarray) -> list[np.ndarray]:
    """Points grouped by their nearest center (one array per center)."""
    owner = cKDTree(centers).query(points)[1]
    order = np.argsort(owner, kind="stable")
    bounds = np.cumsum(np.bincount(owner, minlength=len(centers)))[:-1]
    return np.split(points[order], bounds)


def refine_centers(points, candidates, cfg: ExtractionConfig = ExtractionConfig(),
                   notes: Optional[list] = None) -> list[np.ndarray]:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    centers = [np.asarray(c, dtype=np.float64) for c in candidates]
    if not centers:
        raise ExtractionError("no valid centers")
    for _ in range(cfg.n_max):
        parts = _partition(pts, np.asarray(centers))
        moved, new = [], []
        for c, part in zip(centers, parts):
            try:
                c_new = best_sphere_center(part)
            except DegeneratePointSet:
                _note(notes, f"dropped candidate {np.round(c, 4).tolist()}: degenerate partition")
                continue
            new.append(c_new)
            moved.append(np.linalg.norm(c_new - c))
        if not new:
            raise ExtractionError("no valid centers")
        dropped = len(new) != len(centers)
        centers = new
        if not dropped and max(moved) < cfg.epsilon:
            break
    return centers


def merge_close(centers, cfg: ExtractionConfig = ExtractionConfig()) -> tuple[list[np.ndarray], bool]:
    """Replace every group of centers chained by gaps below the radius with its centroid."""
    c = [np.asarray(x, dtype=np.float64) for x in centers]
    n = len(c)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    pairs = sorted(cKDTree(np.asarray(c)).query_pairs(cfg.radius)) if n > 1 else []
    for i, j in pairs:
        if np.linalg.norm(c[i] - c[j]) < cfg.radius:
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[max(ri, rj)] = min(ri, rj)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    merged = [np.mean([c[i] for i in members], axis=0) for members in groups.values()]
    return merged, len(merged) != n


def _note(notes: Optional[list], msg: str) -> None:
    log.info(msg)
    if notes is not None:
        notes.append(msg)


def extract_component(points, cfg: ExtractionConfig = ExtractionConfig(),
                      notes: Optional[list] = None) -> list[np.ndarray]:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    threshold = cfg.n_vote * (len(pts) / ICOSPHERE_VERTICES if cfg.density_normalize else 1.0)
    candidates = []
    # a vertex votes at most once per bin, so small components cannot pass either threshold
    if len(pts) > threshold / 2:
        votes = hough_vote(pts, cfg)
        candidates = cluster_candidates(votes, cfg, threshold)
        if not candidates:
            candidates = cluster_candidates(votes, cfg, threshold / 2)
    if not candidates:
        _note(notes, f"component with {len(pts)} vertices produced no vote cluster")
        return []
    try:
        centers = refine_centers(pts, candidates, cfg, notes)
        for _ in range(cfg.max_merge_rounds):
            centers, merged = merge_close(centers, cfg)
            if not merged:
                break
            centers = refine_centers(pts, centers, cfg, notes)
        else:
            centers, merged = merge_close(centers, cfg)
            if merged:
                _note(notes, "merge/refine alternation hit max_merge_rounds")
    except ExtractionError as exc:
        _note(notes, f"component with {len(pts)} vertices: {exc}")
        return []
    return centers


def extract_keypoints(mesh: TriangleMesh, cfg: ExtractionConfig = ExtractionConfig(),
                      notes: Optional[list] = None) -> KeypointSet:
    if mesh.is_empty:
        return KeypointSet(np.zeros((0, 3)))
    centers, local = [], []
    for comp in split_components(mesh):
        centers.extend(extract_component(comp.vertices, cfg, local))
    if local:
        log.warning("extraction recorded %d warnings (first: %s)", len(local), local[0])
        if notes is not None:
            notes.extend(local)
    return KeypointSet(np.asarray(centers).reshape(-1, 3))
