"""Multinomial logit over radial-grid alternatives.

Utilities are linear in the (scaled) features; L-MNL scores add a neural
term on top before the softmax.  :func:`fit_mnl` estimates the coefficients
of the pure logit by maximum likelihood.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .features import FEATURES

log = logging.getLogger(__name__)

# Reported coefficients of the full waypoint model, in FEATURES order.
REFERENCE_BETA_VALUES = (-2.64, -0.06, -0.05, -10.83, -20.86)


@dataclass(frozen=True)
class BetaVector:
    """Utility coefficients; ``None`` marks a feature absent from the model."""

    beta_dir: float | None = None
    beta_occ: float | None = None
    beta_coll: float | None = None
    beta_dangle: float | None = None
    beta_ddist: float | None = None

    def __post_init__(self):
        for n in FEATURES:
            v = getattr(self, f"beta_{n}")
            if v is not None and not math.isfinite(v):
                raise ValueError(f"beta_{n} is not finite")

    @classmethod
    def from_values(cls, values, names=FEATURES) -> "BetaVector":
        values = [float(v) for v in values]
        if len(values) != len(names):
            raise ValueError("values and names differ in length")
        return cls(**{f"beta_{n}": v for n, v in zip(names, values)})

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n in FEATURES if getattr(self, f"beta_{n}") is not None)

    def values(self, names=None) -> np.ndarray:
        names = self.names if names is None else names
        return np.array([getattr(self, f"beta_{n}") for n in names], dtype=float)

    def to_dict(self) -> dict:
        return {n: getattr(self, f"beta_{n}") for n in self.names}


REFERENCE_BETA = BetaVector.from_values(REFERENCE_BETA_VALUES)


@dataclass(frozen=True, eq=False)
class GoalDistribution:
    probs: np.ndarray
    utilities: np.ndarray
    scores: np.ndarray


def utility(features, beta) -> np.ndarray:
    """Linear utility ``features @ beta`` over the trailing feature axis."""
    if isinstance(beta, BetaVector):
        beta = beta.values()
    return np.asarray(features, dtype=float) @ np.asarray(beta, dtype=float)


def softmax(scores, axis: int = -1) -> np.ndarray:
    s = np.asarray(scores, dtype=float)
    e = np.exp(s - s.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(scores, axis: int = -1) -> np.ndarray:
    s = np.asarray(scores, dtype=float)
    m = s.max(axis=axis, keepdims=True)
    return s - m - np.log(np.exp(s - m).sum(axis=axis, keepdims=True))


def goal_probabilities(utilities, neural_scores=None) -> GoalDistribution:
    u = np.asarray(utilities, dtype=float)
    z = np.zeros_like(u) if neural_scores is None else np.asarray(neural_scores, dtype=float)
    if u.shape != z.shape:
        raise ValueError(f"utility shape {u.shape} != neural score shape {z.shape}")
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(z))):
        raise ValueError("non-finite utilities or neural scores")
    s = u + z
    return GoalDistribution(softmax(s), u, s)


# --- estimation -----------------------------------------------------------


def mnl_nll(beta, X, labels, l2: float = 0.0) -> float:
    """Mean cross-entropy of labels under MNL(beta); X is (N, K, F)."""
    lp = log_softmax(X @ beta)
    nll = -np.mean(lp[np.arange(len(labels)), labels])
    return float(nll + 0.5 * l2 * beta @ beta)


def mnl_gradient(beta, X, labels, l2: float = 0.0) -> np.ndarray:
    p = softmax(X @ beta)
    p[np.arange(len(labels)), labels] -= 1.0
    return np.einsum("nk,nkf->f", p, X) / len(labels) + l2 * beta


@dataclass
class FitReport:
    names: tuple[str, ...]
    beta: np.ndarray
    nll: float
    iterations: int
    converged: bool
    grad_norm: float
    nll_trace: list[float] = field(default_factory=list)

    @property
    def beta_vector(self) -> BetaVector:
        return BetaVector.from_values(self.beta, self.names)

    def to_dict(self) -> dict:
        return {
            "features": list(self.names),
            "beta": {n: float(b) for n, b in zip(self.names, self.beta)},
            "nll": self.nll,
            "iterations": self.iterations,
            "converged": self.converged,
            "warning": None if self.converged else "max_iter reached before gradient tolerance",
            "grad_inf_norm": self.grad_norm,
            "nll_trace": self.nll_trace,
        }


def fit_mnl(
    X,
    labels,
    names=FEATURES,
    init_beta=None,
    tol: float = 1e-6,
    max_iter: int = 20000,
    l2: float = 0.0,
    trace_every: int = 10,
) -> FitReport:
    """Maximum-likelihood logit coefficients by full-batch gradient descent.

    Step sizes start from the Barzilai-Borwein estimate and are shrunk by
    Armijo backtracking, so every accepted step decreases the objective.
    Stops when the gradient infinity-norm drops below ``tol``.
    """
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if X.ndim != 3 or len(X) == 0:
        raise ValueError("X must be (N, K, F) with N >= 1")
    if X.shape[2] != len(names):
        raise ValueError(f"{X.shape[2]} feature columns but {len(names)} names")
    beta = np.zeros(X.shape[2]) if init_beta is None else np.array(init_beta, dtype=float)
    f = mnl_nll(beta, X, labels, l2)
    g = mnl_gradient(beta, X, labels, l2)
    trace = [f]
    step = 1.0
    it = 0
    converged = bool(np.max(np.abs(g)) < tol)
    while not converged and it < max_iter:
        it += 1
        gg = float(g @ g)
        while True:
            cand = beta - step * g
            fc = mnl_nll(cand, X, labels, l2)
            if fc <= f - 1e-4 * step * gg or step < 1e-16:
                break
            step *= 0.5
        gc = mnl_gradient(cand, X, labels, l2)
        s, y = cand - beta, gc - g
        beta, f, g = cand, fc, gc
        sy = float(s @ y)
        step = float(s @ s) / sy if sy > 0 else step * 2.0
        converged = bool(np.max(np.abs(g)) < tol)
        if it % trace_every == 0 or converged:
            trace.append(f)
    if not converged:
        log.warning("fit_mnl stopped after %d iterations, |grad|_inf=%.3g", it, np.max(np.abs(g)))
    return FitReport(tuple(names), beta, f, it, converged, float(np.max(np.abs(g))), trace)


# --- interpretability -----------------------------------------------------


@dataclass
class InterpretabilityRow:
    model: str
    beta: BetaVector
    sign_violations: tuple[str, ...]
    ranking: tuple[str, ...]


def interpretability_report(beta_sets: dict) -> list[InterpretabilityRow]:
    """Coefficient table per model, with positive-sign flags and |beta| ranking."""
    rows = []
    for model, beta in beta_sets.items():
        names = beta.names
        vals = beta.values()
        flags = tuple(n for n, v in zip(names, vals) if v >= 0)
        order = sorted(range(len(names)), key=lambda i: (-abs(vals[i]), i))
        rows.append(InterpretabilityRow(model, beta, flags, tuple(names[i] for i in order)))
    return rows


def write_beta_table(path, rows: list[InterpretabilityRow], header_lines=()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["model", *(f"beta_{n}" for n in FEATURES), "sign_violations", "ranking"])
        for r in rows:
            cells = []
            for n in FEATURES:
                v = getattr(r.beta, f"beta_{n}")
                cells.append("-" if v is None else f"{v:.6f}")
            w.writerow([r.model, *cells, ";".join(r.sign_violations), ";".join(r.ranking)])
