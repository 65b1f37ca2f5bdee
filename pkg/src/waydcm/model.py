"""Waypoint-aware goal-conditioned trajectory model.

Pipeline per scene batch:

1. every agent's observed states are embedded and run through one shared
   LSTM encoder;
2. neighbors' final hidden states are binned into a social tensor over the
   interaction space;
3. ``K + L`` attention heads query the social tensor with the target state;
4. heads ``1..K`` give neural goal scores ``z_k`` which are added to the
   logit utilities ``u_k`` of the radial-grid alternatives;
5. the ``L`` best-scored goals are embedded and decoded, together with the
   context of heads ``K+1..K+L``, into ``L`` Gaussian trajectories.

The ``LSTM`` variant drops steps 2-4 and decodes from the target encoding
plus a learned per-mode embedding.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .features import VARIANT_FEATURES
from .scene import InteractionSpace

VARIANTS = ("LSTM", "TrajDCM", "WayDCM1", "WayDCM2")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "WayDCM2"
    embed: int = 16
    enc_hidden: int = 32
    attn_dim: int = 32
    dec_hidden: int = 32
    goal_embed: int = 16
    n_goals: int = 15
    n_modes: int = 6
    t_f: int = 30
    cells_long: int = 13
    cells_lat: int = 3
    pos_scale: float = 10.0
    speed_scale: float = 10.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.n_modes > self.n_goals and self.uses_dcm:
            raise ValueError("cannot decode more modes than there are goals")

    @property
    def uses_dcm(self) -> bool:
        return self.variant != "LSTM"

    @property
    def features(self) -> tuple[str, ...]:
        return VARIANT_FEATURES.get(self.variant, ())

    @property
    def n_cells(self) -> int:
        return self.cells_long * self.cells_lat

    @property
    def n_heads(self) -> int:
        return self.n_goals + self.n_modes

    def to_dict(self) -> dict:
        return asdict(self)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, ad.Tensor]:
    """Parameters in a fixed, documented order (the checkpoint order)."""
    rng = np.random.default_rng(seed)
    E, H, D, Hd, G = cfg.embed, cfg.enc_hidden, cfg.attn_dim, cfg.dec_hidden, cfg.goal_embed
    K, L, nh = cfg.n_goals, cfg.n_modes, cfg.n_heads
    p = {}
    p["enc.embed.w"] = _uniform(rng, 4, (4, E))
    p["enc.embed.b"] = _uniform(rng, 4, (E,))
    p["enc.lstm.wx"] = _uniform(rng, H, (E, 4 * H))
    p["enc.lstm.wh"] = _uniform(rng, H, (H, 4 * H))
    b = _uniform(rng, H, (4 * H,))
    b[H : 2 * H] += 1.0  # forget-gate bias
    p["enc.lstm.b"] = b
    if cfg.uses_dcm:
        p["attn.wq"] = _uniform(rng, H, (H, nh * D))
        p["attn.wk"] = _uniform(rng, H, (H, nh * D))
        p["attn.wv"] = _uniform(rng, H, (H, nh * D))
        p["zhead.w"] = _uniform(rng, H + D, (K, H + D))
        p["zhead.b"] = np.zeros(K)
        p["dcm.beta"] = np.zeros(len(cfg.features))
        p["goal.w"] = _uniform(rng, 2, (2, G))
        p["goal.b"] = _uniform(rng, 2, (G,))
        ctx = H + D + G
    else:
        p["mode.embed"] = rng.normal(0.0, 1.0, size=(L, G))
        ctx = H + G
    p["dec.lstm.wx"] = _uniform(rng, Hd, (ctx, 4 * Hd))
    p["dec.lstm.wh"] = _uniform(rng, Hd, (Hd, 4 * Hd))
    b = _uniform(rng, Hd, (4 * Hd,))
    b[Hd : 2 * Hd] += 1.0
    p["dec.lstm.b"] = b
    p["dec.out.w"] = _uniform(rng, Hd, (Hd, 5))
    p["dec.out.b"] = np.zeros(5)
    # no mode bias: a shared offset cancels in the mode softmax
    p["mode.w"] = _uniform(rng, ctx, (ctx, 1))
    return {k: ad.parameter(v) for k, v in p.items()}


# --- social tensor -----------------------------------------------------------------


def social_cells(positions, box: InteractionSpace, cells_long: int, cells_lat: int) -> np.ndarray:
    """Owner of each social-tensor cell: neighbor index or -1.

    Cells tile ``[-behind, ahead] x [-side, side]``, longitudinal-major.
    When several neighbors fall into one cell, the one nearest the cell
    centre wins (lowest index on exact ties).
    """
    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    owner = np.full(cells_long * cells_lat, -1, dtype=int)
    if len(pos) == 0:
        return owner
    cw = (box.ahead + box.behind) / cells_long
    ch = 2 * box.side / cells_lat
    ix = np.floor((pos[:, 0] + box.behind) / cw).astype(int)
    iy = np.floor((pos[:, 1] + box.side) / ch).astype(int)
    ix = np.clip(ix, 0, cells_long - 1)
    iy = np.clip(iy, 0, cells_lat - 1)
    inside = box.contains(pos)
    cx = -box.behind + (ix + 0.5) * cw
    cy = -box.side + (iy + 0.5) * ch
    d = np.hypot(pos[:, 0] - cx, pos[:, 1] - cy)
    best = np.full(len(owner), np.inf)
    for i in range(len(pos)):
        if not inside[i]:
            continue
        cell = ix[i] * cells_lat + iy[i]
        if d[i] < best[cell]:
            best[cell] = d[i]
            owner[cell] = i
    return owner


# --- batches -------------------------------------------------------------------------


@dataclass
class Batch:
    """Padded arrays for a list of prepared scenes.

    ``agents`` is (B, A, T, 4) with agent 0 the target; ``cell_owner`` holds
    agent slots (1..A-1) or -1; goals/features are (B, K, .).
    """

    agents: np.ndarray
    cell_owner: np.ndarray
    goals: np.ndarray
    features: np.ndarray
    k_star: np.ndarray | None
    future: np.ndarray | None

    @property
    def size(self) -> int:
        return self.agents.shape[0]


# --- forward ---------------------------------------------------------------------------


@dataclass
class Forward:
    raw: ad.Tensor  # (B, L, T, 5) decoder outputs
    mode_logp: ad.Tensor  # (B, L)
    goal_logp: ad.Tensor | None  # (B, K)
    utilities: np.ndarray | None
    neural_scores: np.ndarray | None
    scores: np.ndarray | None
    top_goals: np.ndarray | None  # (B, L)
    attention: np.ndarray | None  # (B, heads, cells)


def _run_lstm(xw_steps, w_h, rows, hidden):
    hc = ad.Tensor(np.zeros((rows, 2 * hidden)))
    outs = []
    for xw in xw_steps:
        hc = ad.lstm_step(xw, hc, w_h)
        outs.append(hc)
    return outs


def encode_agents(params, cfg: ModelConfig, agents: np.ndarray) -> ad.Tensor:
    """Final encoder hidden state of every agent, (B, A, H)."""
    B, A, T, _ = agents.shape
    H = cfg.enc_hidden
    x = agents.reshape(B * A * T, 4)
    e = ad.tanh(ad.matmul(x, params["enc.embed.w"]) + params["enc.embed.b"])
    xw = ad.matmul(e, params["enc.lstm.wx"]) + params["enc.lstm.b"]
    xw = ad.transpose(ad.reshape(xw, (B * A, T, 4 * H)), (1, 0, 2))
    outs = _run_lstm([xw[t] for t in range(T)], params["enc.lstm.wh"], B * A, H)
    return ad.reshape(outs[-1][:, :H], (B, A, H))


def social_tensor(h_all: ad.Tensor, cell_owner: np.ndarray) -> tuple[ad.Tensor, np.ndarray]:
    B, A, H = h_all.shape
    occupied = cell_owner >= 0
    flat = (np.arange(B)[:, None] * A + np.where(occupied, cell_owner, 0)).reshape(-1)
    gathered = ad.reshape(ad.reshape(h_all, (B * A, H))[flat], (B, cell_owner.shape[1], H))
    return gathered * occupied[..., None].astype(float), occupied


def attend(params, cfg: ModelConfig, h_t: ad.Tensor, social: ad.Tensor, occupied: np.ndarray):
    """Scaled dot-product attention, one independent projection per head."""
    B, C, H = social.shape
    nh, D = cfg.n_heads, cfg.attn_dim
    q = ad.reshape(ad.matmul(h_t, params["attn.wq"]), (B, nh, 1, D))
    k = ad.transpose(ad.reshape(ad.matmul(social, params["attn.wk"]), (B, C, nh, D)), (0, 2, 3, 1))
    v = ad.transpose(ad.reshape(ad.matmul(social, params["attn.wv"]), (B, C, nh, D)), (0, 2, 1, 3))
    scores = ad.reshape(ad.matmul(q, k), (B, nh, C)) * (1.0 / math.sqrt(D))
    w = ad.masked_softmax(scores, occupied[:, None, :], axis=-1)
    out = ad.matmul(ad.reshape(w, (B, nh, 1, C)), v)
    return ad.reshape(out, (B, nh, D)), w.data


def top_goals(scores: np.ndarray, n: int) -> np.ndarray:
    """Indices of the n highest scores per row; ties go to the lower index."""
    return np.argsort(-scores, axis=-1, kind="stable")[:, :n]


def forward(params, cfg: ModelConfig, batch: Batch) -> Forward:
    B = batch.size
    H, L, K = cfg.enc_hidden, cfg.n_modes, cfg.n_goals
    h_all = encode_agents(params, cfg, batch.agents)
    h_t = h_all[:, 0]

    goal_logp = utilities = z_scores = scores = chosen = attn = None
    if cfg.uses_dcm:
        social, occupied = social_tensor(h_all, batch.cell_owner)
        a, attn = attend(params, cfg, h_t, social, occupied)
        h_b = ad.broadcast_to(ad.reshape(h_t, (B, 1, H)), (B, K, H))
        z_ctx = ad.concat([h_b, a[:, :K]], axis=-1)
        z = ad.tsum(z_ctx * params["zhead.w"], axis=-1) + params["zhead.b"]
        u = ad.matmul(ad.Tensor(batch.features), ad.reshape(params["dcm.beta"], (-1, 1)))
        u = ad.reshape(u, (B, K))
        s = u + z
        goal_logp = ad.log_softmax(s, axis=-1)
        utilities, z_scores, scores = u.data, z.data, s.data
        chosen = top_goals(scores, L)
        emb = ad.matmul(ad.Tensor(batch.goals), params["goal.w"]) + params["goal.b"]  # (B, K, G)
        sel = emb[np.arange(B)[:, None], chosen]  # (B, L, G)
        h_l = ad.broadcast_to(ad.reshape(h_t, (B, 1, H)), (B, L, H))
        ctx = ad.concat([h_l, a[:, K:], sel], axis=-1)
    else:
        h_l = ad.broadcast_to(ad.reshape(h_t, (B, 1, H)), (B, L, H))
        modes = ad.broadcast_to(ad.reshape(params["mode.embed"], (1, L, cfg.goal_embed)), (B, L, cfg.goal_embed))
        ctx = ad.concat([h_l, modes], axis=-1)

    mode_logits = ad.reshape(ad.matmul(ctx, params["mode.w"]), (B, L))
    mode_logp = ad.log_softmax(mode_logits, axis=-1)

    Hd, T = cfg.dec_hidden, cfg.t_f
    flat_ctx = ad.reshape(ctx, (B * L, ctx.shape[-1]))
    xw = ad.matmul(flat_ctx, params["dec.lstm.wx"]) + params["dec.lstm.b"]
    outs = _run_lstm([xw] * T, params["dec.lstm.wh"], B * L, Hd)
    hs = ad.stack([o[:, :Hd] for o in outs], axis=1)  # (BL, T, Hd)
    raw = ad.matmul(hs, params["dec.out.w"]) + params["dec.out.b"]
    raw = ad.reshape(raw, (B, L, T, 5))
    return Forward(raw, mode_logp, goal_logp, utilities, z_scores, scores, chosen, attn)


def parameter_count(params) -> int:
    return int(sum(p.data.size for p in params.values()))
