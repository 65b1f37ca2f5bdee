"""Explanatory variables of the goal utility, one row per alternative.

Columns, in order: ``dir`` (deg), ``occ``, ``coll``, ``dangle`` (deg),
``ddist`` (m).  All functions expect a normalized scene, i.e. the target sits
at the origin at t_obs.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from .grid import RadialGrid
from .scene import Scene

log = logging.getLogger(__name__)

FEATURES = ("dir", "occ", "coll", "dangle", "ddist")

VARIANT_FEATURES = {
    "TrajDCM": ("dir", "occ", "coll"),
    "WayDCM1": ("dir", "occ", "coll", "dangle"),
    "WayDCM2": FEATURES,
}


def feature_columns(names) -> list[int]:
    return [FEATURES.index(n) for n in names]


@dataclass(frozen=True)
class ColliderParams:
    alpha: float = 1.0
    rho: float = -0.1

    def __post_init__(self):
        if self.rho >= 0:
            raise ValueError("rho must be negative so the collision weight decays with distance")


def angle_diff_deg(a, b):
    """Absolute angular difference in degrees, wrapped to [0, 180]."""
    d = np.abs(np.mod(np.asarray(a, dtype=float) - np.asarray(b, dtype=float) + np.pi, 2 * np.pi) - np.pi)
    return np.degrees(d)


def _abs_angle_rad(a, b):
    return np.abs(np.mod(np.asarray(a) - np.asarray(b) + np.pi, 2 * np.pi) - np.pi)


def keep_direction(grid: RadialGrid, heading: float = 0.0) -> np.ndarray:
    return angle_diff_deg(grid.directions, heading)


def occupancy(grid: RadialGrid, positions, maxl: float | None = None) -> np.ndarray:
    """occ_k = sum_i 1[dist_ik < maxl/3] * exp(-dist_ik)."""
    maxl = grid.maxl if maxl is None else maxl
    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    if len(pos) == 0:
        return np.zeros(grid.K)
    dist = np.hypot(pos[:, None, 0] - grid.centers[None, :, 0], pos[:, None, 1] - grid.centers[None, :, 1])
    return np.sum(np.where(dist < maxl / 3.0, np.exp(-dist), 0.0), axis=0)


def collision_avoidance(
    grid: RadialGrid, positions, headings, maxl: float | None = None, params: ColliderParams = ColliderParams()
) -> np.ndarray:
    """Per-cone collider penalty ``alpha * exp(rho * D_C)``.

    Candidates in a cone lie strictly between its bounding directions,
    strictly within (0, 2*maxl) of the target and move against the cone's
    mid-direction by more than 90 degrees.  The collider is the candidate
    with the largest heading difference; alternatives of one sector share it.
    """
    maxl = grid.maxl if maxl is None else maxl
    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    head = np.asarray(headings, dtype=float).reshape(-1)
    coll = np.zeros(grid.K)
    if len(pos) == 0:
        return coll
    d_i = np.arctan2(pos[:, 1], pos[:, 0])
    dist = np.hypot(pos[:, 0], pos[:, 1])
    for k in range(grid.K):
        dtheta = _abs_angle_rad(head, grid.directions[k])
        cand = (
            (grid.d_r[k] < d_i) & (d_i < grid.d_l[k])
            & (dist > 0) & (dist < 2 * maxl)
            & (dtheta > np.pi / 2) & (dtheta < np.pi)
        )
        if cand.any():
            idx = np.flatnonzero(cand)
            c = idx[np.argmax(dtheta[idx])]
            coll[k] = params.alpha * math.exp(params.rho * dist[c])
    return coll


def waypoint_angle(grid: RadialGrid, waypoint) -> np.ndarray:
    wp = np.asarray(waypoint, dtype=float)
    if math.hypot(wp[0], wp[1]) < 1e-9:
        log.warning("waypoint coincides with the target position; dangle set to 0")
        return np.zeros(grid.K)
    return angle_diff_deg(np.arctan2(grid.centers[:, 1], grid.centers[:, 0]), math.atan2(wp[1], wp[0]))


def waypoint_distance(grid: RadialGrid, waypoint) -> np.ndarray:
    wp = np.asarray(waypoint, dtype=float)
    return np.hypot(grid.centers[:, 0] - wp[0], grid.centers[:, 1] - wp[1])


def raw_features(scene: Scene, grid: RadialGrid, params: ColliderParams = ColliderParams()) -> np.ndarray:
    """Unscaled ``(K, 5)`` feature table for a prepared scene."""
    if not scene.normalized:
        raise ValueError(f"scene {scene.id} is not normalized")
    if scene.neighbors:
        last = np.array([nb.states[-1] for nb in scene.neighbors])
        pos, head = last[:, :2], last[:, 3]
    else:
        pos, head = np.zeros((0, 2)), np.zeros(0)
    return np.column_stack(
        [
            keep_direction(grid, float(scene.target.states[-1, 3])),
            occupancy(grid, pos),
            collision_avoidance(grid, pos, head, params=params),
            waypoint_angle(grid, scene.waypoint),
            waypoint_distance(grid, scene.waypoint),
        ]
    )


@dataclass(frozen=True)
class FeatureScaler:
    """Column-wise z-scoring; ``mode='raw'`` is the identity."""

    mean: tuple[float, ...] = (0.0,) * len(FEATURES)
    std: tuple[float, ...] = (1.0,) * len(FEATURES)
    mode: str = "standardize"

    @classmethod
    def fit(cls, rows, mode: str = "standardize") -> "FeatureScaler":
        if mode == "raw":
            return cls(mode="raw")
        if mode != "standardize":
            raise ValueError(f"unknown scaling mode {mode!r}")
        rows = np.asarray(rows, dtype=float).reshape(-1, len(FEATURES))
        mean = rows.mean(axis=0)
        std = rows.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return cls(tuple(float(m) for m in mean), tuple(float(s) for s in std), mode)

    def transform(self, feats) -> np.ndarray:
        feats = np.asarray(feats, dtype=float)
        if self.mode == "raw":
            return feats.copy()
        return (feats - np.asarray(self.mean)) / np.asarray(self.std)

    def inverse(self, feats) -> np.ndarray:
        feats = np.asarray(feats, dtype=float)
        if self.mode == "raw":
            return feats.copy()
        return feats * np.asarray(self.std) + np.asarray(self.mean)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureScaler":
        return cls(tuple(d["mean"]), tuple(d["std"]), d.get("mode", "standardize"))


def feature_matrix(
    scene: Scene, grid: RadialGrid, params: ColliderParams = ColliderParams(), scaler: FeatureScaler | None = None
) -> tuple[np.ndarray, FeatureScaler]:
    """Scaled feature table and the scaler used.

    Without a scaler one is fitted on this scene alone; pipelines pass the
    scaler fitted on the training corpus instead.
    """
    raw = raw_features(scene, grid, params)
    if scaler is None:
        scaler = FeatureScaler.fit(raw)
    return scaler.transform(raw), scaler


def write_feature_csv(path, raw: np.ndarray, scaled: np.ndarray | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["k", *FEATURES]
        if scaled is not None:
            header += [f"{n}_std" for n in FEATURES]
        w.writerow(header)
        for k, row in enumerate(raw):
            out = [k, *(repr(float(v)) for v in row)]
            if scaled is not None:
                out += [repr(float(v)) for v in scaled[k]]
            w.writerow(out)
