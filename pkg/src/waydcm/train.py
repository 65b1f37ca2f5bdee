"""Losses, the Adam training loop, evaluation and the variant comparison."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .choice import BetaVector, fit_mnl
from .data import Example, PipelineSpec, collate, fit_scaler, split_indices
from .features import FeatureScaler, feature_columns
from .metrics import MetricReport, min_displacement
from .model import VARIANTS, Batch, ModelConfig, forward, init_params

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


# --- per-scene losses (numpy) ---------------------------------------------------


@dataclass(eq=False)
class MixtureTrajectory:
    mu: np.ndarray  # (L, T, 2) metres
    sigma: np.ndarray  # (L, T, 2) metres, > 0
    rho: np.ndarray  # (L, T), |rho| < 1
    probs: np.ndarray  # (L,)

    def __post_init__(self):
        if np.any(self.sigma <= 0):
            raise ValueError("sigma must be positive")
        if np.any(np.abs(self.rho) >= 1):
            raise ValueError("|rho| must be < 1")


def gaussian_nll(mu, sigma, rho, y) -> np.ndarray:
    """Negative log density of y under N(mu, [[sx^2, r sx sy], [r sx sy, sy^2]])."""
    dx = (y[..., 0] - mu[..., 0]) / sigma[..., 0]
    dy = (y[..., 1] - mu[..., 1]) / sigma[..., 1]
    q = 1.0 - rho * rho
    return (
        math.log(2 * math.pi)
        + np.log(sigma[..., 0])
        + np.log(sigma[..., 1])
        + 0.5 * np.log(q)
        + (dx * dx + dy * dy - 2 * rho * dx * dy) / (2 * q)
    )


def mode_nll(mixture: MixtureTrajectory, truth) -> np.ndarray:
    truth = np.asarray(truth, dtype=float)
    if truth.shape != mixture.mu.shape[1:]:
        raise ValueError(f"truth shape {truth.shape} does not match {mixture.mu.shape[1:]}")
    return gaussian_nll(mixture.mu, mixture.sigma, mixture.rho, truth[None]).sum(axis=1)


def loss_reg(mixture: MixtureTrajectory, truth) -> float:
    """Winner-take-all NLL: the smallest summed NLL over modes."""
    return float(mode_nll(mixture, truth).min())


def best_mode(mixture: MixtureTrajectory, truth) -> int:
    """Mode whose final mean is closest to the final ground-truth point."""
    truth = np.asarray(truth, dtype=float)
    d = np.hypot(*(mixture.mu[:, -1] - truth[-1]).T)
    return int(np.argmin(d))


def loss_score(probs, mixture: MixtureTrajectory, truth) -> float:
    return float(-np.log(np.asarray(probs)[best_mode(mixture, truth)]))


def loss_cls(goal_probs, k_star: int) -> float:
    return float(-np.log(np.asarray(goal_probs)[k_star]))


@dataclass
class LossBreakdown:
    l_reg: float
    l_score: float
    l_cls: float
    total: float


# --- batched losses (autodiff) ----------------------------------------------------


def batch_losses(fwd, batch: Batch, cfg: ModelConfig, weights=(1.0, 1.0, 1.0)):
    """Mean per-scene losses of a batch: (total tensor, LossBreakdown)."""
    B = batch.size
    rows = np.arange(B)
    nll = ad.bivariate_nll(fwd.raw, batch.future[:, None], cfg.pos_scale)  # (B, L, T)
    per_mode = ad.tsum(nll, axis=-1)
    winner = np.argmin(per_mode.data, axis=1)
    l_reg = ad.mean(per_mode[rows, winner])

    mu_final = fwd.raw.data[:, :, -1, :2] * cfg.pos_scale
    d = np.hypot(*(mu_final - batch.future[:, None, -1]).transpose(2, 0, 1))
    l_star = np.argmin(d, axis=1)
    l_score = ad.neg(ad.mean(fwd.mode_logp[rows, l_star]))

    if fwd.goal_logp is not None:
        l_cls = ad.neg(ad.mean(fwd.goal_logp[rows, batch.k_star]))
    else:
        l_cls = ad.Tensor(0.0)
    w_reg, w_score, w_cls = weights
    total = l_reg * w_reg + l_score * w_score + l_cls * w_cls
    parts = LossBreakdown(float(l_reg.data), float(l_score.data), float(l_cls.data), 0.0)
    parts.total = parts.l_reg * w_reg + parts.l_score * w_score + parts.l_cls * w_cls
    return total, parts


# --- optimizer ----------------------------------------------------------------------


class Adam:
    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# --- training -------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "WayDCM2"
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 20
    seed: int = 0
    val_fraction: float = 0.1
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    eval_batch: int = 256
    scaling: str = "standardize"
    # "mnl": start beta at the pure logit fit on the training split; "zero": start at 0
    beta_init: str = "mnl"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.beta_init not in ("mnl", "zero"):
            raise ValueError(f"beta_init must be 'mnl' or 'zero', got {self.beta_init!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    params: dict
    model: ModelConfig
    scaler: FeatureScaler
    log: list[dict]
    best_epoch: int
    train_idx: np.ndarray
    val_idx: np.ndarray
    config: TrainConfig

    @property
    def beta(self) -> BetaVector | None:
        if "dcm.beta" not in self.params:
            return None
        return BetaVector.from_values(self.params["dcm.beta"].data, self.model.features)


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def mean_losses(params, model_cfg: ModelConfig, examples, scaler, batch_size=256, weights=(1.0, 1.0, 1.0)) -> LossBreakdown:
    """Scene-weighted mean losses without building a graph."""
    if not examples:
        return LossBreakdown(float("nan"), float("nan"), float("nan"), float("nan"))
    acc = np.zeros(4)
    with ad.no_grad():
        for sl in _batches(len(examples), batch_size):
            chunk = examples[sl]
            batch = collate(chunk, model_cfg, scaler)
            _, parts = batch_losses(forward(params, model_cfg, batch), batch, model_cfg, weights)
            acc += len(chunk) * np.array([parts.l_reg, parts.l_score, parts.l_cls, parts.total])
    acc /= len(examples)
    return LossBreakdown(*map(float, acc))


def model_config_for(train_cfg: TrainConfig, spec: PipelineSpec, t_f: int, base: ModelConfig | None = None) -> ModelConfig:
    base = base or ModelConfig()
    return replace(
        base,
        variant=train_cfg.variant,
        n_goals=spec.grid.K,
        t_f=t_f,
        cells_long=spec.cells_long,
        cells_lat=spec.cells_lat,
    )


def train(
    examples: list[Example],
    cfg: TrainConfig,
    spec: PipelineSpec = PipelineSpec(),
    model_base: ModelConfig | None = None,
    scaler: FeatureScaler | None = None,
    progress=None,
) -> TrainResult:
    if not examples:
        raise ValueError("no training examples")
    if any(ex.future is None for ex in examples):
        raise ValueError("training needs ground-truth futures")
    t_f = examples[0].future.shape[0]
    model_cfg = model_config_for(cfg, spec, t_f, model_base)
    train_idx, val_idx = split_indices(len(examples), cfg.seed, cfg.val_fraction)
    train_ex = [examples[i] for i in train_idx]
    val_ex = [examples[i] for i in val_idx]
    scaler = scaler or fit_scaler(train_ex, cfg.scaling)

    params = init_params(model_cfg, cfg.seed)
    if model_cfg.uses_dcm and cfg.beta_init == "mnl":
        params["dcm.beta"].data = warm_start_beta(train_ex, model_cfg, scaler)
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))

    def snapshot():
        return {k: ad.parameter(p.data.copy()) for k, p in params.items()}

    val0 = mean_losses(params, model_cfg, val_ex, scaler, cfg.eval_batch, cfg.loss_weights)
    tr0 = mean_losses(params, model_cfg, train_ex, scaler, cfg.eval_batch, cfg.loss_weights)
    history = [_log_row(0, tr0, val0)]
    best, best_epoch, best_val = snapshot(), 0, val0.total if val_ex else tr0.total

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_ex))
        tr = run_epoch(params, opt, model_cfg, [train_ex[i] for i in order], scaler, cfg, epoch)
        val = mean_losses(params, model_cfg, val_ex, scaler, cfg.eval_batch, cfg.loss_weights)
        history.append(_log_row(epoch, tr, val))
        if progress:
            progress(history[-1])
        # without a validation split, select on the training loss after the epoch
        score = val.total if val_ex else mean_losses(params, model_cfg, train_ex, scaler, cfg.eval_batch, cfg.loss_weights).total
        if score < best_val:
            best, best_epoch, best_val = snapshot(), epoch, score
    return TrainResult(best, model_cfg, scaler, history, best_epoch, train_idx, val_idx, cfg)


def run_epoch(params, opt: Adam, model_cfg: ModelConfig, examples, scaler, cfg: TrainConfig, epoch: int = 1) -> LossBreakdown:
    """One pass of mini-batch updates over ``examples`` in the given order."""
    acc, seen = np.zeros(4), 0
    for b, sl in enumerate(_batches(len(examples), cfg.batch_size)):
        chunk = examples[sl]
        batch = collate(chunk, model_cfg, scaler)
        total, parts = batch_losses(forward(params, model_cfg, batch), batch, model_cfg, cfg.loss_weights)
        if not math.isfinite(parts.total):
            raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
        opt.zero_grad()
        total.backward()
        opt.step()
        acc += len(chunk) * np.array([parts.l_reg, parts.l_score, parts.l_cls, parts.total])
        seen += len(chunk)
    if not seen:
        return LossBreakdown(math.nan, math.nan, math.nan, math.nan)
    return LossBreakdown(*map(float, acc / seen))


def warm_start_beta(examples, model_cfg: ModelConfig, scaler: FeatureScaler) -> np.ndarray:
    """Pure-logit coefficients on the model's feature subset."""
    cols = feature_columns(model_cfg.features)
    X = np.stack([scaler.transform(ex.raw_features)[:, cols] for ex in examples])
    y = np.array([ex.k_star for ex in examples])
    return fit_mnl(X, y, model_cfg.features).beta


def _log_row(epoch, tr: LossBreakdown, val: LossBreakdown) -> dict:
    return {
        "epoch": epoch,
        "l_reg": tr.l_reg,
        "l_score": tr.l_score,
        "l_cls": tr.l_cls,
        "total": tr.total,
        "val_total": val.total,
    }


def write_train_log(path, rows, header_lines=()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["epoch", "l_reg", "l_score", "l_cls", "total", "val_total"])
        for r in rows:
            w.writerow([r["epoch"], *(repr(float(r[k])) for k in ("l_reg", "l_score", "l_cls", "total", "val_total"))])


# --- evaluation ------------------------------------------------------------------------


@dataclass
class Predictions:
    mu: np.ndarray  # (N, L, T, 2)
    sigma: np.ndarray
    rho: np.ndarray
    mode_probs: np.ndarray  # (N, L)
    goal_probs: np.ndarray | None  # (N, K)
    top_goals: np.ndarray | None
    utilities: np.ndarray | None = None
    neural_scores: np.ndarray | None = None
    scores: np.ndarray | None = None


def eval_threads() -> int:
    try:
        return max(1, int(os.environ.get("WAYDCM_THREADS", "1")))
    except ValueError:
        return 1


def predict(params, model_cfg: ModelConfig, examples, scaler, batch_size=256, threads: int | None = None) -> Predictions:
    """Model outputs for every example; chunks may run in parallel, results keep input order."""
    chunks = [examples[sl] for sl in _batches(len(examples), batch_size)]

    def run(chunk):
        with ad.no_grad():
            fwd = forward(params, model_cfg, collate(chunk, model_cfg, scaler))
        mu, sigma, rho = ad.gaussian_params(fwd.raw.data, model_cfg.pos_scale)
        gp = None if fwd.goal_logp is None else np.exp(fwd.goal_logp.data)
        return mu, sigma, rho, np.exp(fwd.mode_logp.data), gp, fwd.top_goals, fwd.utilities, fwd.neural_scores, fwd.scores

    threads = threads or eval_threads()
    if threads > 1 and len(chunks) > 1:
        # no_grad toggles a module flag, so workers must not interleave with training
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(run, chunks))
    else:
        outs = [run(c) for c in chunks]

    def cat(i):
        if not outs or outs[0][i] is None:
            return None
        return np.concatenate([o[i] for o in outs])

    return Predictions(*(cat(i) for i in range(9)))


def evaluate(params, model_cfg: ModelConfig, examples, scaler, ks=(1, 6), batch_size=256) -> MetricReport:
    pred = predict(params, model_cfg, examples, scaler, batch_size)
    truth = np.stack([ex.future for ex in examples])
    return min_displacement(pred.mu, pred.mode_probs, truth, ks)


# --- comparison ------------------------------------------------------------------------


@dataclass
class ComparisonRow:
    variant: str
    seed: int
    report: MetricReport
    beta: BetaVector | None
    runtime_s: float
    best_epoch: int
    result: TrainResult | None = field(default=None, repr=False)


def compare_variants(
    examples, base: TrainConfig, variants=VARIANTS, spec: PipelineSpec = PipelineSpec(), model_base=None, progress=None
) -> list[ComparisonRow]:
    """Train each variant on the same split and seed; score on the validation split."""
    rows = []
    for variant in variants:
        cfg = replace(base, variant=variant)
        t0 = time.perf_counter()
        res = train(examples, cfg, spec, model_base, progress=progress)
        val = [examples[i] for i in res.val_idx] or [examples[i] for i in res.train_idx]
        report = evaluate(res.params, res.model, val, res.scaler)
        rows.append(ComparisonRow(variant, cfg.seed, report, res.beta, time.perf_counter() - t0, res.best_epoch, res))
        log.info("%s: %s", variant, report.row())
    return rows
