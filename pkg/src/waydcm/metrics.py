"""minADE_k / minFDE_k over the k most likely modes."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


@dataclass
class MetricReport:
    min_ade: dict[int, float]
    min_fde: dict[int, float]
    n_scenes: int
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        out = {"n_scenes": self.n_scenes}
        for k in sorted(self.min_ade):
            out[f"minADE_{k}"] = self.min_ade[k]
            out[f"minFDE_{k}"] = self.min_fde[k]
        return out


def mode_ranking(probs: np.ndarray) -> np.ndarray:
    """Mode indices by decreasing probability; ties keep the lower index first."""
    return np.argsort(-np.asarray(probs), axis=-1, kind="stable")


def displacement_errors(mu: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-mode ADE and FDE, each (N, L).

    The time average accumulates step by step so the reduction order is
    fixed and independent of array layout.
    """
    diff = mu - truth[:, None]
    dist = np.sqrt(diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1])  # (N, L, T)
    T = dist.shape[-1]
    acc = np.zeros(dist.shape[:2])
    for t in range(T):
        acc = acc + dist[..., t]
    return acc / T, dist[..., -1]


def min_displacement(mu, probs, truth, ks=(1, 6)) -> MetricReport:
    """``mu`` (N, L, T, 2), ``probs`` (N, L), ``truth`` (N, T, 2)."""
    mu = np.asarray(mu, dtype=float)
    truth = np.asarray(truth, dtype=float)
    n = mu.shape[0]
    ade, fde = displacement_errors(mu, truth)
    order = mode_ranking(probs)
    ades, fdes = {}, {}
    for k in ks:
        top = order[:, : min(k, mu.shape[1])]
        best_ade = np.take_along_axis(ade, top, axis=1).min(axis=1)
        best_fde = np.take_along_axis(fde, top, axis=1).min(axis=1)
        sa = sf = 0.0
        for i in range(n):
            sa += float(best_ade[i])
            sf += float(best_fde[i])
        ades[k] = sa / n if n else 0.0
        fdes[k] = sf / n if n else 0.0
    return MetricReport(ades, fdes, n)


def write_metric_csv(path, rows: list[dict], header_lines=()) -> None:
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        cols = list(rows[0])
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({c: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for c, v in r.items()})
