"""One JSON document configuring every stage, validated before any work."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace

from .choice import REFERENCE_BETA, BetaVector
from .data import PipelineSpec
from .features import FEATURES, ColliderParams
from .grid import GridSpec
from .model import ModelConfig
from .scene import InteractionSpace
from .synth import GenConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SocialConfig:
    cells_long: int = 13
    cells_lat: int = 3


@dataclass(frozen=True)
class ModelSizes:
    embed: int = 16
    enc_hidden: int = 32
    attn_dim: int = 32
    dec_hidden: int = 32
    goal_embed: int = 16
    n_modes: int = 6


@dataclass(frozen=True)
class TrainSection:
    variant: str = "WayDCM2"
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 20
    val_fraction: float = 0.1
    loss_weights: tuple = (1.0, 1.0, 1.0)
    eval_batch: int = 256
    scaling: str = "standardize"
    beta_init: str = "mnl"


@dataclass(frozen=True)
class GenerateSection:
    n_scenes: int = 5000
    n_neighbors: tuple = (0, 3)
    speed: tuple = (2.0, 14.0)
    waypoint_distance: tuple = (5.0, 800.0)
    waypoint_half_angle: float = 1.5707963267948966
    neighbor_speed: tuple = (0.0, 12.0)
    near_goal_fraction: float = 1.0
    oncoming_fraction: float = 0.5
    uturn_fraction: float = 0.5
    uturn_jitter: float = 0.03
    noise_sigma: float = 0.05
    heading_jitter: float = 0.02
    dt: float = 0.1
    t_obs: int = 10
    t_f: int = 30
    pilot_size: int = 500
    true_beta: dict = field(default_factory=lambda: REFERENCE_BETA.to_dict())


@dataclass(frozen=True)
class FitSection:
    tol: float = 1e-6
    max_iter: int = 20000
    l2: float = 0.0


@dataclass(frozen=True)
class PathsSection:
    scenes: str | None = None
    out: str = "out"
    checkpoint: str | None = None


SECTIONS = {
    "grid": GridSpec,
    "collider": ColliderParams,
    "box": InteractionSpace,
    "social": SocialConfig,
    "model": ModelSizes,
    "train": TrainSection,
    "generate": GenerateSection,
    "fit": FitSection,
    "paths": PathsSection,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    grid: GridSpec = GridSpec()
    collider: ColliderParams = ColliderParams()
    box: InteractionSpace = InteractionSpace()
    social: SocialConfig = SocialConfig()
    model: ModelSizes = ModelSizes()
    train: TrainSection = TrainSection()
    generate: GenerateSection = GenerateSection()
    fit: FitSection = FitSection()
    paths: PathsSection = PathsSection()

    # --- views used by the pipeline ---

    @property
    def pipeline(self) -> PipelineSpec:
        return PipelineSpec(self.grid, self.collider, self.box, self.social.cells_long, self.social.cells_lat)

    def gen_config(self) -> GenConfig:
        g = self.generate
        kw = {f.name: getattr(g, f.name) for f in fields(g) if f.name != "true_beta"}
        return GenConfig(
            true_beta=BetaVector.from_values([g.true_beta[n] for n in FEATURES]),
            seed=self.seed,
            grid=self.grid,
            collider=self.collider,
            box=self.box,
            **{k: tuple(v) if isinstance(v, list) else v for k, v in kw.items()},
        )

    def train_config(self, variant: str | None = None) -> TrainConfig:
        t = self.train
        kw = {f.name: getattr(t, f.name) for f in fields(t)}
        kw["loss_weights"] = tuple(kw["loss_weights"])
        if variant:
            kw["variant"] = variant
        return TrainConfig(seed=self.seed, **kw)

    def model_base(self) -> ModelConfig:
        m = self.model
        return ModelConfig(
            variant=self.train.variant,
            embed=m.embed,
            enc_hidden=m.enc_hidden,
            attn_dim=m.attn_dim,
            dec_hidden=m.dec_hidden,
            goal_embed=m.goal_embed,
            n_modes=m.n_modes,
            n_goals=self.grid.K,
            t_f=self.generate.t_f,
            cells_long=self.social.cells_long,
            cells_lat=self.social.cells_lat,
        )

    # --- serialization ---

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in SECTIONS:
            sec = getattr(self, name)
            out[name] = {f.name: _plain(getattr(sec, f.name)) for f in fields(sec)}
        return out

    def hash(self) -> str:
        """Short digest of every setting except file locations."""
        doc = self.to_dict()
        del doc["paths"]
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def with_overrides(self, **kw) -> "RunConfig":
        """Flag overrides: seed, variant, scenes, out, checkpoint (None means unset)."""
        cfg = self
        if kw.get("seed") is not None:
            cfg = replace(cfg, seed=_check_int("seed", kw["seed"]))
        if kw.get("variant") is not None:
            cfg = replace(cfg, train=replace(cfg.train, variant=kw["variant"]))
        paths = {k: kw[k] for k in ("scenes", "out", "checkpoint") if kw.get(k) is not None}
        if paths:
            cfg = replace(cfg, paths=replace(cfg.paths, **paths))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            self.gen_config()
            self.train_config()
            self.model_base()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def _plain(v):
    if isinstance(v, tuple):
        return list(v)
    if isinstance(v, dict):
        return dict(v)
    return v


def _check_int(name, v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{name}: expected an integer, got {v!r}")
    return v


def _coerce(section: str, name: str, default, value):
    where = f"{section}.{name}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean")
        return value
    if isinstance(default, int):
        return _check_int(where, value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) or (default is None and name in ("scenes", "checkpoint")):
        if value is None and default is None:
            return None
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list) or len(value) != len(default):
            raise ConfigError(f"{where}: expected a list of {len(default)} numbers")
        return tuple(_coerce(section, f"{name}[{i}]", d, v) for i, (d, v) in enumerate(zip(default, value)))
    if isinstance(default, dict):  # true_beta
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        unknown = set(value) - set(FEATURES)
        if unknown:
            raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
        missing = set(FEATURES) - set(value)
        if missing:
            raise ConfigError(f"{where}: missing keys {sorted(missing)}")
        return {k: _coerce(where, k, 0.0, value[k]) for k in FEATURES}
    raise ConfigError(f"{where}: unsupported setting")


def from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - {"seed", *SECTIONS}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kw = {}
    if "seed" in doc:
        kw["seed"] = _check_int("seed", doc["seed"])
    for name, cls in SECTIONS.items():
        if name not in doc:
            continue
        body = doc[name]
        if not isinstance(body, dict):
            raise ConfigError(f"{name}: expected an object")
        defaults = cls()
        allowed = {f.name for f in fields(cls)}
        bad = set(body) - allowed
        if bad:
            raise ConfigError(f"{name}: unknown keys {sorted(bad)}")
        values = {k: _coerce(name, k, getattr(defaults, k), v) for k, v in body.items()}
        try:
            kw[name] = replace(defaults, **values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: {exc}") from exc
    cfg = RunConfig(**kw)
    cfg.validate()
    return cfg


def load(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return from_dict(doc)
