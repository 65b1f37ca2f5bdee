import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from waydcm.scene import (
    Frame,
    InteractionSpace,
    Scene,
    ScenarioFormatError,
    SceneError,
    denormalize_scene,
    fill_gaps,
    filter_neighbors,
    make_track,
    normalize_scene,
    read_scenes,
    scene_to_record,
    scenes_equal,
    wrap_angle,
    write_scenes,
)
from waydcm.synth import GenConfig, generate

from .conftest import simple_scene, straight_track

DATA = Path(__file__).parent / "data"


def world_scene(origin, heading, n_nb=3, seed=0):
    rng = np.random.default_rng(seed)
    target = straight_track("ego", origin, heading, 8.0)
    nbs = []
    for i in range(n_nb):
        p = np.asarray(origin) + rng.uniform(-30, 30, 2)
        nbs.append(straight_track(f"n{i}", p, rng.uniform(-math.pi, math.pi), rng.uniform(0, 10)))
    wp = np.asarray(origin) + rng.uniform(-200, 200, 2)
    fut = np.asarray(origin) + np.cumsum(rng.normal(0, 1, (5, 2)), axis=0)
    return Scene("w", target, tuple(nbs), wp, fut)


def test_wrap_angle_range_and_passthrough():
    assert wrap_angle(math.pi) == math.pi
    assert wrap_angle(-math.pi) == math.pi
    assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)
    x = 0.1 + 0.2
    assert wrap_angle(x) == x


def test_agent_track_rejects_negative_speed():
    with pytest.raises(SceneError):
        make_track("a", [[0, 0, -1.0, 0]])


def test_normalize_known_geometry():
    target = straight_track("ego", (100.0, 50.0), math.pi / 2, 5.0)
    sc = normalize_scene(Scene("x", target, (), np.array([100.0, 60.0])))
    np.testing.assert_allclose(sc.waypoint, [10.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(sc.target.states[-1, [0, 1, 3]], [0, 0, 0], atol=1e-9)


def test_normalize_identity():
    sc = simple_scene(neighbors=[(10.0, 2.0, 3.0, 0.5)], future=np.ones((4, 2)))
    n = normalize_scene(sc)
    assert n.frame == Frame((0.0, 0.0), 0.0)
    np.testing.assert_array_equal(n.waypoint, sc.waypoint)
    np.testing.assert_array_equal(n.neighbors[0].states, sc.neighbors[0].states)
    np.testing.assert_array_equal(n.future, sc.future)


@settings(max_examples=60, deadline=None)
@given(
    ox=st.floats(-1e4, 1e4),
    oy=st.floats(-1e4, 1e4),
    heading=st.floats(-math.pi, math.pi, exclude_min=True),
    seed=st.integers(0, 10_000),
)
def test_round_trip_and_distance_preservation(ox, oy, heading, seed):
    sc = world_scene((ox, oy), heading, seed=seed)
    n = normalize_scene(sc)
    np.testing.assert_allclose(n.target.states[-1, :2], [0, 0], atol=1e-9)
    assert abs(n.target.states[-1, 3]) < 1e-9
    back = denormalize_scene(n)
    for a, b in zip([sc.target, *sc.neighbors], [back.target, *back.neighbors]):
        np.testing.assert_allclose(b.states[:, :2], a.states[:, :2], atol=1e-9, rtol=0)
        dtheta = np.abs(wrap_angle(b.states[:, 3] - a.states[:, 3]))
        assert np.all(dtheta < 1e-9)
    np.testing.assert_allclose(back.waypoint, sc.waypoint, atol=1e-9, rtol=0)
    np.testing.assert_allclose(back.future, sc.future, atol=1e-9, rtol=0)

    def pts(s):
        return np.array([s.target.states[-1, :2], *[nb.states[-1, :2] for nb in s.neighbors], s.waypoint])

    pw, pl = pts(sc), pts(n)
    dw = np.hypot(*(pw[:, None] - pw[None]).transpose(2, 0, 1))
    dl = np.hypot(*(pl[:, None] - pl[None]).transpose(2, 0, 1))
    np.testing.assert_allclose(dl, dw, atol=1e-9, rtol=0)


def test_stationary_target_uses_last_moving_heading():
    states = [[0, 0, 2.0, 0.7], [0.1, 0.1, 1.0, 0.8], [0.1, 0.1, 0.0, 2.5]]
    sc = Scene("st", make_track("ego", states), (), np.array([5.0, 5.0]))
    assert normalize_scene(sc).frame.heading == pytest.approx(0.8)


def test_never_moving_target_rejected():
    states = [[0, 0, 0.0, 0.7]] * 3
    with pytest.raises(SceneError):
        normalize_scene(Scene("st", make_track("ego", states), (), np.array([5.0, 5.0])))


def test_missing_target_state_rejected():
    tr = make_track("ego", [[0, 0, 1, 0], [0.1, 0, 1, 0]], [True, False])
    with pytest.raises(SceneError, match="t_obs"):
        normalize_scene(Scene("m", tr, (), np.array([1.0, 0.0])))


def test_filter_neighbors_box_edges():
    sc = normalize_scene(simple_scene(neighbors=[(39.0, 0.0, 1.0, 0.0), (-11.0, 0.0, 1.0, 0.0), (40.0, 25.0, 1.0, 0.0)]))
    kept = filter_neighbors(sc, InteractionSpace(40, 10, 25))
    assert [nb.agent_id for nb in kept.neighbors] == ["n0", "n2"]


def test_filter_neighbors_requires_normalized():
    with pytest.raises(SceneError):
        filter_neighbors(world_scene((5.0, 5.0), 1.0), InteractionSpace())


def test_filter_neighbors_brute_force(rng):
    pts = rng.uniform(-60, 60, (100, 2))
    sc = normalize_scene(simple_scene(neighbors=[(x, y, 1.0, 0.0) for x, y in pts]))
    box = InteractionSpace(40, 10, 25)
    kept = [nb.agent_id for nb in filter_neighbors(sc, box).neighbors]
    expect = [f"n{i}" for i, (x, y) in enumerate(pts) if -10 <= x <= 40 and -25 <= y <= 25]
    assert kept == expect


def test_fill_gaps_carries_forward_and_drops_empty():
    good = make_track("a", [[0, 0, 1, 0], [9, 9, 9, 0], [2, 0, 1, 0]], [True, False, True])
    lead = make_track("b", [[7, 7, 7, 0], [1, 1, 1, 0], [2, 2, 1, 0]], [False, True, True])
    dead = make_track("c", [[0, 0, 0, 0]] * 3, [False] * 3)
    sc = Scene("g", make_track("ego", [[0, 0, 1, 0], [0.1, 0, 1, 0], [0.2, 0, 1, 0]]), (good, lead, dead), np.zeros(2) + 3)
    out = fill_gaps(sc)
    assert [nb.agent_id for nb in out.neighbors] == ["a", "b"]
    np.testing.assert_array_equal(out.neighbors[0].states[1], [0, 0, 1, 0])
    np.testing.assert_array_equal(out.neighbors[1].states[0], [1, 1, 1, 0])
    assert out.neighbors[0].valid.all()


def test_schema_fixture():
    scenes = read_scenes(DATA / "schema_example.jsonl")
    assert len(scenes) == 1
    assert len(scenes[0].neighbors) == 2
    assert scenes[0].t_f == 2


def test_empty_file(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    assert read_scenes(p) == []


def test_round_trip_generated(tmp_path):
    corpus = generate(GenConfig(n_scenes=1000, pilot_size=50))
    p = tmp_path / "c.jsonl"
    write_scenes(corpus.scenes, p)
    back = read_scenes(p)
    assert len(back) == 1000
    assert all(scenes_equal(a, b) for a, b in zip(corpus.scenes, back))


def _bad_line(tmp_path, mutate):
    rec = json.loads((DATA / "schema_example.jsonl").read_text())
    mutate(rec)
    p = tmp_path / "bad.jsonl"
    p.write_text("\n" + json.dumps(rec) + "\n")
    return p


@pytest.mark.parametrize(
    "mutate, field",
    [
        (lambda r: r.pop("waypoint"), "waypoint"),
        (lambda r: r["target"]["states"][0].__setitem__(2, -1.0), "target.states"),
        (lambda r: r["neighbors"][1]["valid"].pop(), "neighbors[1].valid"),
        (lambda r: r.__setitem__("dt", "fast"), "dt"),
        (lambda r: r["future"].append([5.0, 0.0]), "future"),
    ],
)
def test_malformed_records_name_line_and_field(tmp_path, mutate, field):
    with pytest.raises(ScenarioFormatError) as info:
        read_scenes(_bad_line(tmp_path, mutate))
    assert info.value.line == 2
    assert info.value.field == field
    assert f"line 2: field '{field}'" in str(info.value)


def test_speed_sanity_bound(tmp_path):
    def teleport(r):
        r["target"]["states"][1][0] = 500.0

    with pytest.raises(ScenarioFormatError, match="exceeds"):
        read_scenes(_bad_line(tmp_path, teleport))


def test_record_is_world_frame():
    sc = world_scene((3.0, 4.0), 0.3)
    assert scene_to_record(normalize_scene(sc))["waypoint"] == pytest.approx(sc.waypoint.tolist(), abs=1e-9)
