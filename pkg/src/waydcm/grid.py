"""Dynamic radial grid of candidate intermediate goals."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# seconds-based longitudinal extent multiplier: maxl = GRID_SPEED_FACTOR * v * horizon
GRID_SPEED_FACTOR = 1.5


@dataclass(frozen=True)
class GridSpec:
    k_sectors: int = 5
    k_rings: int = 3
    angular_span: float = math.pi
    min_maxl: float = 2.0

    def __post_init__(self):
        if self.k_sectors < 1 or self.k_rings < 1 or self.k_sectors * self.k_rings < 2:
            raise ValueError("grid needs at least two alternatives")
        if not 0 < self.angular_span <= 2 * math.pi:
            raise ValueError("angular_span must be in (0, 2*pi]")
        if self.min_maxl <= 0:
            raise ValueError("min_maxl must be positive")

    @property
    def K(self) -> int:
        return self.k_sectors * self.k_rings


@dataclass(frozen=True)
class Alternative:
    index: int
    center: tuple[float, float]
    direction: float
    d_l: float
    d_r: float
    ring_radius: float
    sector: int
    ring: int


@dataclass(frozen=True, eq=False)
class RadialGrid:
    maxl: float
    alternatives: tuple[Alternative, ...]
    spec: GridSpec

    def __post_init__(self):
        alts = self.alternatives
        centers = np.array([a.center for a in alts], dtype=float)
        for name, arr in (
            ("centers", centers),
            ("directions", np.array([a.direction for a in alts])),
            ("d_l", np.array([a.d_l for a in alts])),
            ("d_r", np.array([a.d_r for a in alts])),
            ("sectors", np.array([a.sector for a in alts])),
        ):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def K(self) -> int:
        return len(self.alternatives)


def grid_extent(v_obs: float, horizon: float, min_maxl: float) -> float:
    return max(GRID_SPEED_FACTOR * v_obs * horizon, min_maxl)


def build_grid(v_obs: float, t_f: float, spec: GridSpec = GridSpec()) -> RadialGrid:
    """Build the fan of ``spec.K`` alternatives sized by the target speed.

    ``t_f`` is the prediction horizon in seconds.  Alternatives are ordered
    sector-major (sectors from the right-most to the left-most cone), then by
    ring from the inside out.
    """
    if v_obs < 0 or t_f <= 0:
        raise ValueError("need v_obs >= 0 and t_f > 0")
    maxl = grid_extent(v_obs, t_f, spec.min_maxl)
    width = spec.angular_span / spec.k_sectors
    alts = []
    for s in range(spec.k_sectors):
        d_r = -spec.angular_span / 2 + s * width
        d_l = d_r + width
        direction = d_r + width / 2
        for r in range(spec.k_rings):
            radius = maxl * (r + 1) / spec.k_rings
            center = (radius * math.cos(direction), radius * math.sin(direction))
            alts.append(Alternative(len(alts), center, direction, d_l, d_r, radius, s, r))
    return RadialGrid(maxl, tuple(alts), spec)


def label_ground_truth(grid: RadialGrid, future, tol: float = 1e-9) -> int:
    """Index of the alternative centre closest to the trajectory endpoint.

    Distances within ``tol`` metres of the minimum count as ties; the lowest
    index wins.
    """
    future = np.asarray(future, dtype=float)
    if future.size == 0:
        raise ValueError("future must be non-empty")
    end = future.reshape(-1, 2)[-1]
    dist = np.hypot(grid.centers[:, 0] - end[0], grid.centers[:, 1] - end[1])
    return int(np.flatnonzero(dist <= dist.min() + tol)[0])


def goal_embedding_inputs(grid: RadialGrid) -> np.ndarray:
    """Alternative centres, shape ``(K, 2)``, in alternative order."""
    return np.array(grid.centers)
