import numpy as np
import pytest

from waydcm.scene import Scene, make_track


def straight_track(agent_id, end, heading, speed, t_obs=10, dt=0.1):
    """Constant-velocity track ending at ``end`` with the given heading."""
    k = np.arange(t_obs - 1, -1, -1)[:, None]
    d = np.array([np.cos(heading), np.sin(heading)])
    pos = np.asarray(end, dtype=float) - k * speed * dt * d
    states = np.column_stack([pos, np.full(t_obs, speed), np.full(t_obs, heading)])
    return make_track(agent_id, states)


def simple_scene(neighbors=(), waypoint=(50.0, 0.0), future=None, speed=10.0, scene_id="s"):
    """Target at the origin heading +x; neighbors given as (x, y, v, theta) at t_obs."""
    tracks = [straight_track(f"n{i}", (x, y), th, v) for i, (x, y, v, th) in enumerate(neighbors)]
    return Scene(scene_id, straight_track("ego", (0.0, 0.0), 0.0, speed), tuple(tracks), np.asarray(waypoint, dtype=float), future)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def toy_config(variant="WayDCM2", **kw):
    """Gradient-check sizes: hidden 8, K = 4, L = 2, t_f = 3."""
    from waydcm.model import ModelConfig

    base = dict(variant=variant, embed=5, enc_hidden=8, attn_dim=4, dec_hidden=8, goal_embed=3, n_goals=4, n_modes=2, t_f=3, cells_long=3, cells_lat=2)
    base.update(kw)
    return ModelConfig(**base)


def toy_batch(cfg, seed=0, B=3, A=3, T=4):
    from waydcm.model import Batch

    r = np.random.default_rng(seed)
    owner = np.full((B, cfg.n_cells), -1)
    for b in range(B):
        slots = r.permutation(cfg.n_cells)[: A - 1 - b % 2]
        owner[b, slots] = np.arange(1, len(slots) + 1)
    F = len(cfg.features)
    return Batch(
        r.normal(size=(B, A, T, 4)),
        owner,
        r.normal(size=(B, cfg.n_goals, 2)),
        r.normal(size=(B, cfg.n_goals, F)),
        r.integers(0, cfg.n_goals, B),
        r.normal(size=(B, cfg.t_f, 2)) * 3,
    )


# --- acceptance report -----------------------------------------------------------

ACCEPTANCE = {}


def record_criterion(number, title, passed, detail):
    ACCEPTANCE[number] = (title, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} {'PASS' if passed else 'FAIL'}: {title}; {detail}")
