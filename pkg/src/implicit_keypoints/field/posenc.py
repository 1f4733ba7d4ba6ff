"""Fourier-feature lift of 3D coordinates.

Layout of the output vector: ``[x y z]`` (optional), then for each band
``b = 0..N-1`` the block ``[sin(2^b pi x) .. z, cos(2^b pi x) .. z]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PosEncConfig:
    bands: int = 6
    include_raw: bool = True

    def __post_init__(self):
        if self.bands < 0:
            raise ValueError("bands must be nonnegative")

    @property
    def dim(self) -> int:
        return 3 * int(self.include_raw) + 6 * self.bands

    def coord_index(self) -> np.ndarray:
        """Which input coordinate each output feature depends on."""
        return np.tile(np.arange(3), self.dim // 3)


def posenc(p, cfg: PosEncConfig = PosEncConfig()) -> np.ndarray:
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    feats, _ = posenc_with_derivative(np.atleast_2d(pts), cfg)
    return feats[0] if single else feats


def posenc_with_derivative(pts: np.ndarray, cfg: PosEncConfig) -> tuple[np.ndarray, np.ndarray]:
    """Features and their derivative w.r.t. the coordinate each one reads.

    Every feature depends on exactly one coordinate, so the full
    ``(N, D, 3)`` Jacobian collapses to an ``(N, D)`` array paired with
    ``cfg.coord_index()``.
    """
    feats, derivs = [], []
    if cfg.include_raw:
        feats.append(pts)
        derivs.append(np.ones_like(pts))
    for b in range(cfg.bands):
        freq = (2.0 ** b) * np.pi
        s, c = np.sin(freq * pts), np.cos(freq * pts)
        feats += [s, c]
        derivs += [freq * c, -freq * s]
    if not feats:
        empty = np.zeros((len(pts), 0))
        return empty, empty
    return np.concatenate(feats, axis=1), np.concatenate(derivs, axis=1)
