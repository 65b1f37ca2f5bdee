"""Scene types, the target-centric frame, and the JSON-Lines scenario format.

A scene holds one target agent, its neighbors, a long-term waypoint and
(optionally) the ground-truth future of the target.  Scenes are stored in
the world frame; :func:`normalize_scene` moves everything into the frame
whose origin is the target position at the last observed step and whose
x-axis points along the target heading.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_DT = 0.1
DEFAULT_V_MAX = 70.0


class SceneError(ValueError):
    """Raised for scenes that violate the data contract."""


class ScenarioFormatError(SceneError):
    def __init__(self, line: int, field_name: str, message: str):
        self.line = line
        self.field = field_name
        super().__init__(f"line {line}: field '{field_name}': {message}")


def wrap_angle(theta):
    """Wrap angles to (-pi, pi]."""
    theta = np.asarray(theta, dtype=float)
    wrapped = np.mod(theta + np.pi, 2.0 * np.pi) - np.pi
    wrapped = np.where(wrapped == -np.pi, np.pi, wrapped)
    # in-range values pass through untouched so serialization round-trips bit-exactly
    wrapped = np.where((theta > -np.pi) & (theta <= np.pi), theta, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


class AgentState(NamedTuple):
    x: float
    y: float
    v: float
    theta: float


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=a.dtype if a.dtype == bool else float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class AgentTrack:
    """Observed states of one agent, shape ``(t_obs, 4)`` as (x, y, v, theta)."""

    agent_id: str
    states: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim != 2 or states.shape[1] != 4:
            raise SceneError(f"agent {self.agent_id}: states must have shape (t_obs, 4), got {states.shape}")
        valid = np.asarray(self.valid, dtype=bool)
        if valid.shape != (states.shape[0],):
            raise SceneError(f"agent {self.agent_id}: valid mask length {valid.shape} != {states.shape[0]}")
        if np.any(states[valid, 2] < 0):
            raise SceneError(f"agent {self.agent_id}: negative speed")
        states = states.copy()
        states[:, 3] = wrap_angle(states[:, 3])
        object.__setattr__(self, "states", _frozen(states))
        object.__setattr__(self, "valid", _frozen(valid))

    @property
    def t_obs(self) -> int:
        return self.states.shape[0]

    def state(self, t: int) -> AgentState:
        return AgentState(*(float(s) for s in self.states[t]))

    @property
    def last(self) -> AgentState:
        return self.state(self.t_obs - 1)

    @property
    def position(self) -> np.ndarray:
        """Position at the last observed step."""
        return self.states[-1, :2]


@dataclass(frozen=True)
class Frame:
    """Rigid transform between world and target-centric coordinates."""

    origin: tuple[float, float] = (0.0, 0.0)
    heading: float = 0.0

    def to_local(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        c, s = math.cos(self.heading), math.sin(self.heading)
        dx = pts[..., 0] - self.origin[0]
        dy = pts[..., 1] - self.origin[1]
        return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)

    def to_world(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        c, s = math.cos(self.heading), math.sin(self.heading)
        x = c * pts[..., 0] - s * pts[..., 1] + self.origin[0]
        y = s * pts[..., 0] + c * pts[..., 1] + self.origin[1]
        return np.stack([x, y], axis=-1)

    def states_to_local(self, states: np.ndarray) -> np.ndarray:
        out = np.array(states, dtype=float)
        out[:, :2] = self.to_local(states[:, :2])
        out[:, 3] = wrap_angle(states[:, 3] - self.heading)
        return out

    def states_to_world(self, states: np.ndarray) -> np.ndarray:
        out = np.array(states, dtype=float)
        out[:, :2] = self.to_world(states[:, :2])
        out[:, 3] = wrap_angle(states[:, 3] + self.heading)
        return out


@dataclass(frozen=True, eq=False)
class Scene:
    id: str
    target: AgentTrack
    neighbors: tuple[AgentTrack, ...]
    waypoint: np.ndarray
    future: np.ndarray | None = None
    dt: float = DEFAULT_DT
    t_f: int | None = None
    frame: Frame | None = None  # set once normalized; maps local -> world

    def __post_init__(self):
        object.__setattr__(self, "neighbors", tuple(self.neighbors))
        wp = np.asarray(self.waypoint, dtype=float)
        if wp.shape != (2,):
            raise SceneError(f"scene {self.id}: waypoint must be (x, y)")
        object.__setattr__(self, "waypoint", _frozen(wp))
        for nb in self.neighbors:
            if nb.t_obs != self.target.t_obs:
                raise SceneError(f"scene {self.id}: neighbor {nb.agent_id} has {nb.t_obs} steps, target has {self.target.t_obs}")
        if self.future is not None:
            fut = np.asarray(self.future, dtype=float)
            if fut.ndim != 2 or fut.shape[1] != 2 or len(fut) == 0:
                raise SceneError(f"scene {self.id}: future must have shape (t_f, 2)")
            t_f = self.t_f if self.t_f is not None else len(fut)
            if len(fut) != t_f:
                raise SceneError(f"scene {self.id}: future has {len(fut)} steps, expected t_f={t_f}")
            object.__setattr__(self, "future", _frozen(fut))
            object.__setattr__(self, "t_f", t_f)
        if self.dt <= 0:
            raise SceneError(f"scene {self.id}: dt must be positive")

    @property
    def t_obs(self) -> int:
        return self.target.t_obs

    @property
    def normalized(self) -> bool:
        return self.frame is not None


@dataclass(frozen=True)
class InteractionSpace:
    ahead: float = 40.0
    behind: float = 10.0
    side: float = 25.0

    def __post_init__(self):
        if min(self.ahead, self.behind, self.side) <= 0:
            raise ValueError("interaction space extents must be strictly positive")

    def contains(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        x, y = pts[..., 0], pts[..., 1]
        return (x >= -self.behind) & (x <= self.ahead) & (y >= -self.side) & (y <= self.side)


def _frame_heading(track: AgentTrack) -> float:
    last = track.t_obs - 1
    if track.valid[last] and track.states[last, 2] > 0:
        return float(track.states[last, 3])
    moving = np.flatnonzero(track.valid & (track.states[:, 2] > 0))
    if len(moving) == 0:
        raise SceneError(f"agent {track.agent_id}: no valid moving state to define a heading")
    return float(track.states[moving[-1], 3])


def normalize_scene(scene: Scene) -> Scene:
    """Express every coordinate in the frame centred on the target at t_obs."""
    if scene.frame is not None:
        return scene
    target = scene.target
    if not target.valid[-1]:
        raise SceneError(f"scene {scene.id}: target has no valid state at t_obs")
    frame = Frame(origin=(float(target.position[0]), float(target.position[1])), heading=_frame_heading(target))

    def local(track: AgentTrack) -> AgentTrack:
        return AgentTrack(track.agent_id, frame.states_to_local(track.states), track.valid)

    return replace(
        scene,
        target=local(target),
        neighbors=tuple(local(nb) for nb in scene.neighbors),
        waypoint=frame.to_local(scene.waypoint),
        future=None if scene.future is None else frame.to_local(scene.future),
        frame=frame,
    )


def denormalize_scene(scene: Scene) -> Scene:
    """Inverse of :func:`normalize_scene`."""
    if scene.frame is None:
        return scene
    frame = scene.frame

    def world(track: AgentTrack) -> AgentTrack:
        return AgentTrack(track.agent_id, frame.states_to_world(track.states), track.valid)

    return replace(
        scene,
        target=world(scene.target),
        neighbors=tuple(world(nb) for nb in scene.neighbors),
        waypoint=frame.to_world(scene.waypoint),
        future=None if scene.future is None else frame.to_world(scene.future),
        frame=None,
    )


def fill_gaps(scene: Scene) -> Scene:
    """Carry the last valid state forward over masked steps; drop fully invalid neighbors.

    Leading invalid steps take the first valid state.
    """

    def filled(track: AgentTrack) -> AgentTrack | None:
        if track.valid.all():
            return track
        idx = np.flatnonzero(track.valid)
        if len(idx) == 0:
            return None
        src = np.maximum.accumulate(np.where(track.valid, np.arange(track.t_obs), -1))
        src = np.where(src < 0, idx[0], src)
        return AgentTrack(track.agent_id, track.states[src], np.ones(track.t_obs, dtype=bool))

    neighbors = tuple(t for t in (filled(nb) for nb in scene.neighbors) if t is not None)
    target = filled(scene.target)
    if target is None:
        raise SceneError(f"scene {scene.id}: target track is fully invalid")
    return replace(scene, target=target, neighbors=neighbors)


def filter_neighbors(scene: Scene, box: InteractionSpace) -> Scene:
    """Keep neighbors whose position at t_obs lies inside the interaction space."""
    if not scene.normalized:
        raise SceneError(f"scene {scene.id}: filter_neighbors needs a normalized scene")
    kept = tuple(nb for nb in scene.neighbors if bool(box.contains(nb.position)))
    return replace(scene, neighbors=kept)


def prepare_scene(scene: Scene, box: InteractionSpace | None = None) -> Scene:
    """World-frame scene -> normalized, gap-filled, neighbor-filtered scene."""
    scene = fill_gaps(normalize_scene(scene))
    return filter_neighbors(scene, box or InteractionSpace())


def check_track_speed(track: AgentTrack, dt: float, v_max: float = DEFAULT_V_MAX) -> None:
    """Reject consecutive valid states further apart than ``v_max * dt``."""
    both = track.valid[1:] & track.valid[:-1]
    step = np.hypot(*np.diff(track.states[:, :2], axis=0).T)
    bad = np.flatnonzero(both & (step > v_max * dt + 1e-9))
    if len(bad):
        raise SceneError(
            f"agent {track.agent_id}: displacement {step[bad[0]]:.3f} m at step {bad[0] + 1} exceeds {v_max} m/s * {dt} s"
        )


# --- JSON Lines ---------------------------------------------------------


def _track_record(track: AgentTrack) -> dict:
    return {
        "id": track.agent_id,
        "states": track.states.tolist(),
        "valid": track.valid.tolist(),
    }


def scene_to_record(scene: Scene) -> dict:
    if scene.frame is not None:
        scene = denormalize_scene(scene)
    rec = {
        "id": scene.id,
        "dt": scene.dt,
        "t_obs": scene.t_obs,
        "t_f": scene.t_f,
        "target": _track_record(scene.target),
        "neighbors": [_track_record(nb) for nb in scene.neighbors],
        "waypoint": scene.waypoint.tolist(),
    }
    if scene.future is not None:
        rec["future"] = scene.future.tolist()
    return rec


def _parse_track(obj, line: int, where: str, t_obs: int, dt: float, v_max: float | None) -> AgentTrack:
    if not isinstance(obj, dict):
        raise ScenarioFormatError(line, where, "expected an object")
    for key in ("states", "valid"):
        if key not in obj:
            raise ScenarioFormatError(line, f"{where}.{key}", "missing")
    try:
        states = np.asarray(obj["states"], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ScenarioFormatError(line, f"{where}.states", str(exc)) from None
    if states.ndim != 2 or states.shape[1] != 4:
        raise ScenarioFormatError(line, f"{where}.states", "expected a list of [x, y, v, theta]")
    if len(states) != t_obs:
        raise ScenarioFormatError(line, f"{where}.states", f"expected {t_obs} states, got {len(states)}")
    valid = obj["valid"]
    if not isinstance(valid, list) or len(valid) != t_obs or not all(isinstance(b, bool) for b in valid):
        raise ScenarioFormatError(line, f"{where}.valid", f"expected {t_obs} booleans")
    if not np.all(np.isfinite(states)):
        raise ScenarioFormatError(line, f"{where}.states", "non-finite value")
    if np.any(states[:, 2] < 0):
        raise ScenarioFormatError(line, f"{where}.states", "negative speed v")
    try:
        track = AgentTrack(str(obj.get("id", where)), states, np.asarray(valid, dtype=bool))
        if v_max is not None:
            check_track_speed(track, dt, v_max)
    except SceneError as exc:
        raise ScenarioFormatError(line, f"{where}.states", str(exc)) from None
    return track


def record_to_scene(rec: dict, line: int = 0, v_max: float | None = DEFAULT_V_MAX) -> Scene:
    if not isinstance(rec, dict):
        raise ScenarioFormatError(line, "<record>", "expected a JSON object")
    for key in ("id", "dt", "t_obs", "target", "neighbors", "waypoint"):
        if key not in rec:
            raise ScenarioFormatError(line, key, "missing")
    dt, t_obs = rec["dt"], rec["t_obs"]
    if not isinstance(dt, (int, float)) or isinstance(dt, bool) or dt <= 0:
        raise ScenarioFormatError(line, "dt", "must be a positive number")
    if not isinstance(t_obs, int) or isinstance(t_obs, bool) or t_obs < 1:
        raise ScenarioFormatError(line, "t_obs", "must be a positive integer")
    t_f = rec.get("t_f")
    if t_f is not None and (not isinstance(t_f, int) or isinstance(t_f, bool) or t_f < 1):
        raise ScenarioFormatError(line, "t_f", "must be a positive integer")
    target = _parse_track(rec["target"], line, "target", t_obs, dt, v_max)
    if not isinstance(rec["neighbors"], list):
        raise ScenarioFormatError(line, "neighbors", "expected a list")
    neighbors = [
        _parse_track(nb, line, f"neighbors[{i}]", t_obs, dt, v_max) for i, nb in enumerate(rec["neighbors"])
    ]
    wp = rec["waypoint"]
    if not (isinstance(wp, list) and len(wp) == 2 and all(isinstance(c, (int, float)) for c in wp)):
        raise ScenarioFormatError(line, "waypoint", "expected [x, y]")
    future = rec.get("future")
    if future is not None:
        try:
            future = np.asarray(future, dtype=float)
        except (TypeError, ValueError) as exc:
            raise ScenarioFormatError(line, "future", str(exc)) from None
        if future.ndim != 2 or future.shape[1] != 2 or len(future) == 0:
            raise ScenarioFormatError(line, "future", "expected a non-empty list of [x, y]")
        if t_f is not None and len(future) != t_f:
            raise ScenarioFormatError(line, "future", f"expected {t_f} points, got {len(future)}")
    return Scene(
        id=str(rec["id"]),
        target=target,
        neighbors=tuple(neighbors),
        waypoint=np.asarray(wp, dtype=float),
        future=future,
        dt=float(dt),
        t_f=t_f,
    )


def write_scenes(scenes: Iterable[Scene], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for scene in scenes:
            fh.write(json.dumps(scene_to_record(scene), separators=(",", ":")))
            fh.write("\n")


def read_scenes(path, v_max: float | None = DEFAULT_V_MAX) -> list[Scene]:
    scenes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ScenarioFormatError(lineno, "<json>", exc.msg) from None
            scenes.append(record_to_scene(rec, lineno, v_max))
    return scenes


def scenes_equal(a: Scene, b: Scene) -> bool:
    """Structural equality (exact floats) used by round-trip checks."""

    def tracks_eq(s: AgentTrack, t: AgentTrack) -> bool:
        return s.agent_id == t.agent_id and np.array_equal(s.states, t.states) and np.array_equal(s.valid, t.valid)

    if (a.id, a.dt, a.t_f, a.frame) != (b.id, b.dt, b.t_f, b.frame):
        return False
    if not tracks_eq(a.target, b.target) or len(a.neighbors) != len(b.neighbors):
        return False
    if not all(tracks_eq(s, t) for s, t in zip(a.neighbors, b.neighbors)):
        return False
    if not np.array_equal(a.waypoint, b.waypoint):
        return False
    if (a.future is None) != (b.future is None):
        return False
    return a.future is None or np.array_equal(a.future, b.future)


def make_track(agent_id: str, states: Sequence[Sequence[float]], valid: Sequence[bool] | None = None) -> AgentTrack:
    states = np.asarray(states, dtype=float)
    if valid is None:
        valid = np.ones(len(states), dtype=bool)
    return AgentTrack(agent_id, states, np.asarray(valid, dtype=bool))
