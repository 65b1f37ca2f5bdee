"""Turn scenes into model-ready examples and padded batches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import ColliderParams, FeatureScaler, feature_columns, raw_features
from .grid import GridSpec, build_grid, label_ground_truth
from .model import Batch, ModelConfig, social_cells
from .scene import InteractionSpace, Scene, prepare_scene


@dataclass(frozen=True)
class PipelineSpec:
    """Geometry shared by feature extraction and the model."""

    grid: GridSpec = GridSpec()
    collider: ColliderParams = ColliderParams()
    box: InteractionSpace = InteractionSpace()
    cells_long: int = 13
    cells_lat: int = 3


@dataclass(eq=False)
class Example:
    scene_id: str
    agents: np.ndarray  # (1 + n, T, 4) target-frame states, target first
    cell_owner: np.ndarray  # (C,) agent slot 1..n, or -1
    goals: np.ndarray  # (K, 2) metres
    raw_features: np.ndarray  # (K, 5)
    k_star: int | None
    future: np.ndarray | None  # (t_f, 2) metres, target frame
    maxl: float
    scene: Scene


def build_example(scene: Scene, spec: PipelineSpec = PipelineSpec()) -> Example:
    prepared = prepare_scene(scene, spec.box)
    if prepared.t_f is None:
        raise ValueError(f"scene {scene.id}: t_f unknown")
    v = float(prepared.target.states[-1, 2])
    grid = build_grid(v, prepared.t_f * prepared.dt, spec.grid)
    agents = np.stack([prepared.target.states, *[nb.states for nb in prepared.neighbors]])
    owner = social_cells(agents[1:, -1, :2], spec.box, spec.cells_long, spec.cells_lat)
    owner = np.where(owner >= 0, owner + 1, -1)
    k_star = None if prepared.future is None else label_ground_truth(grid, prepared.future)
    return Example(
        scene.id,
        agents,
        owner,
        np.array(grid.centers),
        raw_features(prepared, grid, spec.collider),
        k_star,
        None if prepared.future is None else np.array(prepared.future),
        grid.maxl,
        prepared,
    )


def fit_scaler(examples, mode: str = "standardize") -> FeatureScaler:
    if not examples:
        return FeatureScaler(mode=mode) if mode == "raw" else FeatureScaler()
    return FeatureScaler.fit(np.concatenate([ex.raw_features for ex in examples]), mode)


def collate(examples, cfg: ModelConfig, scaler: FeatureScaler) -> Batch:
    B = len(examples)
    T = examples[0].agents.shape[1]
    A = max(ex.agents.shape[0] for ex in examples)
    agents = np.zeros((B, A, T, 4))
    owner = np.full((B, cfg.n_cells), -1, dtype=int)
    cols = feature_columns(cfg.features)
    K = examples[0].goals.shape[0]
    goals = np.zeros((B, K, 2))
    feats = np.zeros((B, K, len(cols)))
    for b, ex in enumerate(examples):
        n = ex.agents.shape[0]
        agents[b, :n] = ex.agents
        owner[b] = ex.cell_owner
        goals[b] = ex.goals / cfg.pos_scale
        feats[b] = scaler.transform(ex.raw_features)[:, cols]
    agents[..., :2] /= cfg.pos_scale
    agents[..., 2] /= cfg.speed_scale
    have_future = all(ex.future is not None for ex in examples)
    return Batch(
        agents,
        owner,
        goals,
        feats,
        np.array([ex.k_star for ex in examples]) if have_future else None,
        np.stack([ex.future for ex in examples]) if have_future else None,
    )


def split_indices(n: int, seed: int, val_fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle split into (train, val) index arrays; ``val_fraction=0`` keeps every scene for training."""
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError("val_fraction must be in [0, 1)")
    perm = np.random.default_rng(np.random.SeedSequence([seed, 7])).permutation(n)
    n_val = int(round(n * val_fraction))
    if n > 1 and val_fraction > 0:
        n_val = min(max(n_val, 1), n - 1)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])
