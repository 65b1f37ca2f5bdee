"""Synthetic scenes whose targets pick goals from a known logit model.

Each scene is generated independently from a seed derived from
``(config.seed, scene index)``, so corpora are reproducible and scenes can be
generated in any order.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .choice import REFERENCE_BETA, BetaVector, softmax, utility
from .features import FEATURES, ColliderParams, FeatureScaler, raw_features
from .grid import GridSpec, build_grid, grid_extent, label_ground_truth
from .scene import AgentTrack, InteractionSpace, Scene, prepare_scene, write_scenes

_CORPUS_STREAM = 0
_PILOT_STREAM = 1


@dataclass(frozen=True)
class GenConfig:
    true_beta: BetaVector = REFERENCE_BETA
    n_scenes: int = 5000
    n_neighbors: tuple[int, int] = (0, 3)
    speed: tuple[float, float] = (2.0, 14.0)
    waypoint_distance: tuple[float, float] = (5.0, 800.0)
    waypoint_half_angle: float = math.pi / 2
    neighbor_speed: tuple[float, float] = (0.0, 12.0)
    # neighbors placed around alternative centres near the waypoint bearing
    near_goal_fraction: float = 1.0
    # neighbors heading back toward the target (collider candidates)
    oncoming_fraction: float = 0.5
    # waypoints straight behind make the two edge sectors compete
    uturn_fraction: float = 0.5
    uturn_jitter: float = 0.03
    noise_sigma: float = 0.05
    heading_jitter: float = 0.02
    seed: int = 0
    dt: float = 0.1
    t_obs: int = 10
    t_f: int = 30
    pilot_size: int = 500
    grid: GridSpec = GridSpec()
    collider: ColliderParams = ColliderParams()
    box: InteractionSpace = InteractionSpace()

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        for name in ("n_neighbors", "speed", "waypoint_distance", "neighbor_speed"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty range {lo} > {hi}")
        if self.speed[0] <= 0:
            raise ValueError("target speed must be positive to define a heading")
        if self.n_neighbors[0] < 0 or self.n_scenes < 0:
            raise ValueError("counts must be non-negative")
        if set(self.true_beta.names) != set(FEATURES):
            raise ValueError("true_beta must define all five coefficients")

    @property
    def horizon(self) -> float:
        return self.t_f * self.dt

    def to_dict(self) -> dict:
        d = asdict(self)
        d["true_beta"] = self.true_beta.to_dict()
        return d


@dataclass
class Corpus:
    scenes: list[Scene]
    drawn: list[int]
    scaler: FeatureScaler
    config: GenConfig
    meta: dict = field(default_factory=dict)

    def metadata(self) -> dict:
        return {
            "true_beta": self.config.true_beta.to_dict(),
            "scaler": self.scaler.to_dict(),
            "drawn_k": self.drawn,
            "config": self.config.to_dict(),
            **self.meta,
        }

    def write(self, path, meta_path=None) -> None:
        write_scenes(self.scenes, path)
        meta_path = meta_path or sidecar_path(path)
        with open(meta_path, "w", encoding="utf-8") as fh:
            json.dump(self.metadata(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def sidecar_path(path) -> str:
    path = str(path)
    return (path[: -len(".jsonl")] if path.endswith(".jsonl") else path) + ".meta.json"


def _rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, index]))


def _track_back(agent_id: str, end, heading: float, speed: float, cfg: GenConfig, rng, jitter: float) -> np.ndarray:
    """Constant-speed past ending at ``end`` with the given final heading."""
    t_obs = cfg.t_obs
    states = np.zeros((t_obs, 4))
    states[-1] = (end[0], end[1], speed, heading)
    for t in range(t_obs - 2, -1, -1):
        h_next = states[t + 1, 3]
        x = states[t + 1, 0] - speed * cfg.dt * math.cos(h_next)
        y = states[t + 1, 1] - speed * cfg.dt * math.sin(h_next)
        h = heading + (rng.normal(0.0, jitter) if jitter > 0 else 0.0)
        states[t] = (x, y, speed, math.atan2(math.sin(h), math.cos(h)))
    return states


def sample_context(cfg: GenConfig, rng: np.random.Generator, scene_id: str) -> Scene:
    """World-frame scene without a future: target, neighbors, waypoint."""
    origin = rng.uniform(-500.0, 500.0, size=2)
    yaw = rng.uniform(-math.pi, math.pi)
    c, s = math.cos(yaw), math.sin(yaw)

    def world(p):
        return (origin[0] + c * p[0] - s * p[1], origin[1] + s * p[0] + c * p[1])

    def world_heading(h):
        return math.atan2(math.sin(h + yaw), math.cos(h + yaw))

    v = rng.uniform(*cfg.speed)
    target_states = _track_back("target", world((0.0, 0.0)), yaw, v, cfg, rng, cfg.heading_jitter)
    target = AgentTrack("target", target_states, np.ones(cfg.t_obs, dtype=bool))

    dist = rng.uniform(*cfg.waypoint_distance)
    if rng.random() < cfg.uturn_fraction:
        wp_ang = math.pi + rng.normal(0.0, cfg.uturn_jitter)
    else:
        wp_ang = rng.uniform(-cfg.waypoint_half_angle, cfg.waypoint_half_angle)
    waypoint = world((dist * math.cos(wp_ang), dist * math.sin(wp_ang)))
    n = int(rng.integers(cfg.n_neighbors[0], cfg.n_neighbors[1] + 1))
    box = cfg.box
    margin = 1e-3
    neighbors = []
    maxl = grid_extent(v, cfg.horizon, cfg.grid.min_maxl)
    for i in range(n):
        if rng.random() < cfg.near_goal_fraction:
            # scatter around a random alternative centre to activate occupancy
            width = cfg.grid.angular_span / cfg.grid.k_sectors
            rel = math.atan2(math.sin(wp_ang), math.cos(wp_ang))
            if abs(rel) > cfg.grid.angular_span / 2:
                # waypoint outside the fan: either edge sector is plausible
                rel = math.copysign(cfg.grid.angular_span / 2, rel if rng.random() < 0.5 else -rel)
            near = math.floor((rel + cfg.grid.angular_span / 2) / width + rng.normal(0, 0.7))
            sector = min(max(near, 0), cfg.grid.k_sectors - 1)
            ring = rng.integers(cfg.grid.k_rings)
            width = cfg.grid.angular_span / cfg.grid.k_sectors
            ang = -cfg.grid.angular_span / 2 + (sector + 0.5) * width
            rad = maxl * (ring + 1) / cfg.grid.k_rings
            spread = maxl / 6.0
            p = (rad * math.cos(ang) + rng.normal(0, spread), rad * math.sin(ang) + rng.normal(0, spread))
            p = (min(max(p[0], -box.behind + margin), box.ahead - margin), min(max(p[1], -box.side + margin), box.side - margin))
        else:
            p = (
                rng.uniform(-box.behind + margin, box.ahead - margin),
                rng.uniform(-box.side + margin, box.side - margin),
            )
        if rng.random() < cfg.oncoming_fraction:
            h = math.atan2(-p[1], -p[0]) + rng.normal(0.0, 0.3)
        else:
            h = rng.uniform(-math.pi, math.pi)
        nv = rng.uniform(*cfg.neighbor_speed)
        states = _track_back(f"n{i}", world(p), world_heading(h), nv, cfg, rng, 0.0)
        neighbors.append(AgentTrack(f"n{i}", states, np.ones(cfg.t_obs, dtype=bool)))

    return Scene(scene_id, target, tuple(neighbors), np.array(waypoint), None, cfg.dt, cfg.t_f)


def arc_path(goal, steps: int) -> np.ndarray:
    """Constant-speed circular arc from the origin (heading +x) to ``goal``.

    The arc is tangent to the x-axis at the origin; the final point is set
    to ``goal`` exactly.
    """
    gx, gy = float(goal[0]), float(goal[1])
    chord = math.hypot(gx, gy)
    alpha = math.atan2(gy, gx)
    frac = np.arange(1, steps + 1) / steps
    if abs(math.sin(alpha)) < 1e-9 or chord == 0.0:
        pts = np.column_stack([frac * gx, frac * gy])
    else:
        radius = chord / (2.0 * math.sin(alpha))
        phi = 2.0 * alpha * frac
        pts = np.column_stack([radius * np.sin(phi), radius * (1.0 - np.cos(phi))])
    pts[-1] = (gx, gy)
    return pts


def scene_features(scene: Scene, cfg: GenConfig):
    prepared = prepare_scene(scene, cfg.box)
    grid = build_grid(float(prepared.target.states[-1, 2]), cfg.horizon, cfg.grid)
    return prepared, grid, raw_features(prepared, grid, cfg.collider)


def fit_pilot_scaler(cfg: GenConfig) -> FeatureScaler:
    rows = []
    for i in range(cfg.pilot_size):
        ctx = sample_context(cfg, _rng(cfg.seed, _PILOT_STREAM, i), f"pilot-{i}")
        rows.append(scene_features(ctx, cfg)[2])
    if not rows:
        return FeatureScaler()
    return FeatureScaler.fit(np.concatenate(rows))


def draw_choice(probs, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(probs) - 1))


def generate_scene(cfg: GenConfig, index: int, scaler: FeatureScaler) -> tuple[Scene, int]:
    rng = _rng(cfg.seed, _CORPUS_STREAM, index)
    ctx = sample_context(cfg, rng, f"s{cfg.seed}-{index:06d}")
    prepared, grid, raw = scene_features(ctx, cfg)
    probs = softmax(utility(scaler.transform(raw), cfg.true_beta.values(FEATURES)))
    k = draw_choice(probs, rng)
    local = arc_path(grid.centers[k], cfg.t_f)
    if cfg.noise_sigma > 0:
        local = local + rng.normal(0.0, cfg.noise_sigma, size=local.shape)
    future = prepared.frame.to_world(local)
    return Scene(ctx.id, ctx.target, ctx.neighbors, ctx.waypoint, future, cfg.dt, cfg.t_f), k


def generate(cfg: GenConfig, scaler: FeatureScaler | None = None) -> Corpus:
    scaler = scaler or fit_pilot_scaler(cfg)
    scenes, drawn = [], []
    for i in range(cfg.n_scenes):
        scene, k = generate_scene(cfg, i, scaler)
        scenes.append(scene)
        drawn.append(k)
    return Corpus(scenes, drawn, scaler, cfg)


def sample_choices(scaled_features, beta, n: int, seed: int = 0) -> np.ndarray:
    """Repeated goal draws for one fixed feature context."""
    probs = softmax(utility(scaled_features, beta))
    rng = np.random.default_rng(seed)
    return np.array([draw_choice(probs, rng) for _ in range(n)])


@dataclass
class FrequencyTable:
    counts: np.ndarray
    freqs: np.ndarray
    probs: np.ndarray
    chi2: float
    max_z: float  # largest |observed - expected| in multinomial standard deviations


def empirical_choice_frequencies(draws, probs) -> FrequencyTable:
    probs = np.asarray(probs, dtype=float)
    draws = np.asarray(draws, dtype=int)
    n = len(draws)
    counts = np.bincount(draws, minlength=len(probs)).astype(float)
    expected = n * probs
    pos = expected > 0
    chi2 = float(np.sum((counts[pos] - expected[pos]) ** 2 / expected[pos]))
    sd = np.sqrt(n * probs * (1 - probs))
    z = np.where(sd > 0, np.abs(counts - expected) / np.where(sd > 0, sd, 1.0), np.where(counts == expected, 0.0, np.inf))
    return FrequencyTable(counts.astype(int), counts / max(n, 1), probs, chi2, float(z.max()) if len(z) else 0.0)


def relabel(corpus: Corpus) -> list[int]:
    """Ground-truth labels recomputed from the stored futures."""
    cfg = corpus.config
    out = []
    for scene in corpus.scenes:
        prepared, grid, _ = scene_features(scene, cfg)
        out.append(label_ground_truth(grid, prepared.future))
    return out
