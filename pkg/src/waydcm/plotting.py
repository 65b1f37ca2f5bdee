"""Report figures written next to the CSV outputs (Agg backend, PNG)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .features import FEATURES  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "savefig.dpi": 110,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
}
# PNG metadata carries the matplotlib version only; drop it so files depend on data alone
_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return path


def beta_bars(path, betas: dict, truth=None):
    """Grouped bars of fitted coefficients per model; ``truth`` overlays markers."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.2))
        n = max(len(betas), 1)
        width = 0.8 / n
        x = np.arange(len(FEATURES))
        for i, (name, beta) in enumerate(betas.items()):
            vals = [getattr(beta, f"beta_{f}") for f in FEATURES]
            ys = [np.nan if v is None else v for v in vals]
            ax.bar(x + (i - (n - 1) / 2) * width, ys, width, label=name)
        if truth is not None:
            ax.scatter(x, truth.values(FEATURES), marker="_", s=300, color="k", label="generating", zorder=3)
        ax.axhline(0.0, color="0.4", lw=0.8)
        ax.set_xticks(x, [f"β_{f}" for f in FEATURES])
        ax.set_ylabel("coefficient")
        ax.set_yscale("symlog", linthresh=0.1)
        ax.legend(fontsize=8)
        return _save(fig, path)


def training_curve(path, rows, title=""):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ep = [r["epoch"] for r in rows]
        ax.plot(ep, [r["total"] for r in rows], "o-", ms=3, label="train total")
        ax.plot(ep, [r["val_total"] for r in rows], "s--", ms=3, label="val total")
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        if title:
            ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def comparison_bars(path, rows):
    """minADE_6 / minFDE_6 per variant from comparison rows (dicts)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        names = [r["variant"] for r in rows]
        x = np.arange(len(names))
        ax.bar(x - 0.2, [r["minADE_6"] for r in rows], 0.4, label="minADE_6")
        ax.bar(x + 0.2, [r["minFDE_6"] for r in rows], 0.4, label="minFDE_6")
        ax.set_xticks(x, names)
        ax.set_ylabel("metres")
        ax.legend()
        return _save(fig, path)


def scene_explanation(path, example, probs, top, mu=None, mode_probs=None, title=""):
    """Target-frame view: alternatives shaded by choice probability, neighbors, waypoint, truth."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 5))
        g = example.goals
        sc = ax.scatter(g[:, 0], g[:, 1], c=probs, cmap="RdYlGn", vmin=0, vmax=max(float(np.max(probs)), 1e-9), s=60, edgecolors="k", zorder=3)
        fig.colorbar(sc, ax=ax, label="π_k")
        for k, (x, y) in enumerate(g):
            ax.annotate(str(k), (x, y), textcoords="offset points", xytext=(4, 4), fontsize=7)
        ax.scatter(g[top, 0], g[top, 1], s=160, facecolors="none", edgecolors="b", lw=1.2, label="top-L", zorder=4)
        past = example.agents[0, :, :2]
        ax.plot(past[:, 0], past[:, 1], "k-", lw=2, label="target past")
        for nb in example.agents[1:]:
            ax.plot(nb[:, 0], nb[:, 1], "-", color="0.5", lw=1)
            last = nb[-1]
            ax.arrow(last[0], last[1], np.cos(last[3]), np.sin(last[3]), head_width=0.4, color="0.4")
        if example.future is not None:
            ax.plot(example.future[:, 0], example.future[:, 1], "g--", lw=1.5, label="ground truth")
        if mu is not None:
            for i, m in enumerate(mu):
                alpha = 0.3 + 0.7 * float(mode_probs[i]) if mode_probs is not None else 0.6
                ax.plot(m[:, 0], m[:, 1], "-", color="tab:purple", alpha=min(alpha, 1.0), lw=1)
        wp = example.scene.waypoint
        if wp is not None:
            w = np.asarray(wp, dtype=float)
            r = float(np.hypot(*w))
            lim = max(example.maxl * 1.2, 5.0)
            if r > lim:
                w = w / r * lim
            ax.annotate("", xy=w, xytext=(0, 0), arrowprops={"arrowstyle": "->", "color": "tab:orange"})
            ax.plot([], [], color="tab:orange", label="waypoint bearing")
        ax.set_aspect("equal")
        ax.set_xlabel("x (m)")
        ax.set_ylabel("y (m)")
        if title:
            ax.set_title(title)
        ax.legend(fontsize=7, loc="lower left")
        return _save(fig, path)
