"""Desk-scale 2D manipulation environments.

Two tasks share one 64x64 top-down camera over a 2x2 world-unit workspace
(32 px per world unit, dt = 0.1 s):

* ``wiping`` (scrub2d): a sponge end-effector clears a marker scribble.
* ``scooping`` (scoop2d): a spoon carries particles from a source bowl to a
  target bowl.

An :class:`InstanceSpec` only changes how the RGB frame is drawn. Layout,
dynamics, ground-truth masks and pseudo-depth depend on the seed alone.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidArgument
from .fusion import SemanticMaskSet
from .percept import PerceptionResult, split_prompt

IMG = 64
PX_PER_UNIT = 32.0
WORKSPACE = 2.0
DT = 0.1

TASKS = ("wiping", "scooping")
RENDER_STYLES = {
    "wiping": ("red", "green", "black"),
    "scooping": ("rice", "choco", "hearts", "mixed"),
}
STEP_LIMITS = {"wiping": 150, "scooping": 300}
DEFAULT_PROMPTS = {"wiping": "handwriting. sponge.", "scooping": "rice. bowl."}

# pseudo-depth layers, distance from the camera before normalization
DEPTH_BACKGROUND = 1.0
DEPTH_BOWL = 0.7
DEPTH_PARTICLE = 0.6
DEPTH_EE = 0.3

WIPE_RADIUS_PX = 4.0
WIPE_SUCCESS_FRACTION = 0.99
SCRIBBLE_HALF_WIDTH_PX = 1.2
SCRIBBLE_AREA = (0.6, 1.6)  # handwriting stays in the middle of the board
SPONGE_START = (0.15, 1.85)
GHOST_STROKES = 4
GHOST_ALPHA = 0.8
GHOST_STREAM = 0x6057

N_PARTICLES = 50
SPOON_CAPACITY = 8
PICKUP_RADIUS_PX = 5.0
PICKUP_TILT = 0.2
RELEASE_TILT = 0.8
BOWL_RADIUS = 0.34
BOWL_RIM_PX = 1.5
SCOOP_SUCCESS_COUNT = 3
SPOON_RADIUS_PX = 3.0

EXPERT_JITTER = 0.05

_centers = (np.arange(IMG) + 0.5) / PX_PER_UNIT
PIX_Y, PIX_X = np.meshgrid(_centers, _centers, indexing="ij")

SCRIBBLE_TERMS = {"scribble", "scribbles", "handwriting", "marker", "writing"}
SPONGE_TERMS = {"sponge", "end-effector", "end effector", "gripper"}
PARTICLE_TERMS = {"rice", "cereal", "particles", "particle", "granular material", "grains"}
BOWL_TERMS = {"bowl", "bowls"}
SPOON_TERMS = {"spoon"}

MARKER_COLORS = {"red": (200, 35, 45), "green": (40, 150, 70), "black": (35, 35, 40)}
BOARD_COLOR = (232, 232, 228)
SPONGE_COLOR = (250, 210, 80)
TABLE_COLOR = (176, 138, 98)
BOWL_FILL = (226, 226, 232)
BOWL_RIM = (140, 140, 152)
SPOON_COLOR = (110, 115, 190)
PARTICLE_COLORS = {
    "rice": [(250, 246, 228)],
    "choco": [(92, 52, 28)],
    "hearts": [(214, 68, 128)],
    "mixed": [(236, 196, 110), (92, 52, 28), (214, 68, 128), (238, 148, 40)],
}


@dataclass(frozen=True)
class InstanceSpec:
    category: str
    render_style: str
    background_seed: int = 0

    def __post_init__(self):
        if self.category not in RENDER_STYLES:
            raise InvalidArgument(f"unknown category {self.category!r}")
        if self.render_style not in RENDER_STYLES[self.category]:
            raise InvalidArgument(
                f"render style {self.render_style!r} not valid for {self.category}; "
                f"expected one of {RENDER_STYLES[self.category]}"
            )

    @property
    def prompt(self) -> str:
        """Perception prompt naming this instance's task-relevant objects."""
        if self.category == "scooping" and self.render_style != "rice":
            return "cereal. bowl."
        return DEFAULT_PROMPTS[self.category]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "InstanceSpec":
        return cls(d["category"], d["render_style"], int(d.get("background_seed", 0)))


def instance(task: str, style: str, background_seed: int = 0) -> InstanceSpec:
    return InstanceSpec(task, style, background_seed)


@dataclass
class EnvObs:
    rgb: np.ndarray
    q: np.ndarray
    step: int
    gt_perception: Callable[[str], PerceptionResult] = field(repr=False, compare=False)


@dataclass
class Scrub2DState:
    ee: np.ndarray
    scribble: np.ndarray
    initial_count: int
    step: int = 0


@dataclass
class Scoop2DState:
    ee: np.ndarray  # x, y, tilt
    particles: np.ndarray  # (N, 2)
    carried: list[int]
    source: np.ndarray  # cx, cy, r
    target: np.ndarray
    step: int = 0


def _disc(cx: float, cy: float, radius_px: float) -> np.ndarray:
    r = radius_px / PX_PER_UNIT
    return (PIX_X - cx) ** 2 + (PIX_Y - cy) ** 2 <= r * r


def _segment_distance(p0: np.ndarray, p1: np.ndarray) -> np.ndarray:
    d = p1 - p0
    dd = float(d @ d)
    if dd == 0.0:
        t = np.zeros_like(PIX_X)
    else:
        t = np.clip(((PIX_X - p0[0]) * d[0] + (PIX_Y - p0[1]) * d[1]) / dd, 0.0, 1.0)
    return np.hypot(PIX_X - (p0[0] + t * d[0]), PIX_Y - (p0[1] + t * d[1]))


def _texture(seed: int, amplitude: int = 6) -> np.ndarray:
    rng = np.random.default_rng(10_007 + seed)
    return rng.integers(-amplitude, amplitude + 1, size=(IMG, IMG, 1))


def _paint(img: np.ndarray, mask: np.ndarray, color) -> None:
    img[mask] = color


def _check_action(action, dim: int) -> np.ndarray:
    a = np.asarray(action, dtype=np.float64).reshape(-1)
    if a.shape != (dim,):
        raise InvalidArgument(f"action must have {dim} components, got shape {np.shape(action)}")
    if not np.all(np.isfinite(a)):
        raise InvalidArgument("action contains non-finite values")
    return np.clip(a, -1.0, 1.0)


def _toward(ee_xy: np.ndarray, aim: np.ndarray, gain: float) -> np.ndarray:
    v = gain * (aim - ee_xy)
    n = float(np.linalg.norm(v))
    return v / n if n > 1.0 else v


def _perception_result(masks: list[np.ndarray], labels: list[str], depth: np.ndarray) -> PerceptionResult:
    stack = np.stack(masks).astype(np.float32) if masks else np.zeros((0, IMG, IMG), np.float32)
    return PerceptionResult(
        masks=SemanticMaskSet(stack, labels, IMG, IMG),
        raw_depth=depth.astype(np.float32),
        latency_ms=0.0,
    )


class _Env:
    task: str
    action_dim: int
    proprio_dim: int

    def __init__(self, inst: InstanceSpec, step_limit: int | None = None):
        if inst.category != self.task:
            raise InvalidArgument(f"instance category {inst.category!r} does not match task {self.task!r}")
        self.instance = inst
        self.step_limit = STEP_LIMITS[self.task] if step_limit is None else int(step_limit)
        self.state = None
        self._background = None

    def _observe(self) -> EnvObs:
        snapshot = copy.deepcopy(self.state)
        return EnvObs(
            rgb=self.render_rgb(snapshot),
            q=self.proprio(snapshot),
            step=snapshot.step,
            gt_perception=lambda prompt: self.ground_truth_perception(prompt, snapshot),
        )

    def observe(self) -> EnvObs:
        return self._observe()

    def done(self) -> bool:
        return self.success() or self.state.step >= self.step_limit

    def step(self, action) -> tuple[EnvObs, bool, dict]:
        if self.state is None:
            raise InvalidArgument("step() called before reset()")
        self._advance(action)
        self.state.step += 1
        ok = self.success()
        done = ok or self.state.step >= self.step_limit
        return self._observe(), done, {"success": ok, "metric": self.metric(), "step": self.state.step}

    def ground_truth_perception(self, prompt: str, state=None) -> PerceptionResult:
        state = self.state if state is None else state
        labels = split_prompt(prompt)
        return _perception_result([self.term_mask(t, state) for t in labels], labels, self.depth(state))


class Scrub2DEnv(_Env):
    task = "wiping"
    action_dim = 2
    proprio_dim = 2

    def reset(self, seed: int) -> EnvObs:
        rng = np.random.default_rng(seed)
        scribble = self._draw_scribble(rng)
        clearance = (WIPE_RADIUS_PX + 3) / PX_PER_UNIT
        for _ in range(1000):
            ee = rng.uniform(*SPONGE_START, size=2)
            if np.hypot(PIX_X[scribble] - ee[0], PIX_Y[scribble] - ee[1]).min() > clearance:
                break
        self.state = Scrub2DState(ee=ee, scribble=scribble, initial_count=int(scribble.sum()))
        board = np.clip(np.array(BOARD_COLOR) + _texture(self.instance.background_seed), 0, 255)
        self._background = self._add_ghosts(board, np.random.default_rng([seed, GHOST_STREAM]))
        return self._observe()

    def _add_ghosts(self, board: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Old marks left by the other marker colours; the sponge cannot lift them.

        They exist only in the RGB image: not in any mask, the depth, or the state.
        """
        others = [c for name, c in MARKER_COLORS.items() if name != self.instance.render_style]
        board = board.astype(np.float64)
        for i in range(GHOST_STROKES):
            a = rng.uniform(0.2, WORKSPACE - 0.2, size=2)
            heading = rng.uniform(0, 2 * math.pi)
            b = a + rng.uniform(0.2, 0.35) * np.array([math.cos(heading), math.sin(heading)])
            mark = _segment_distance(a, np.clip(b, 0.0, WORKSPACE)) <= SCRIBBLE_HALF_WIDTH_PX / PX_PER_UNIT
            color = np.array(others[i % len(others)], dtype=np.float64)
            board[mark] = (1 - GHOST_ALPHA) * board[mark] + GHOST_ALPHA * color
        return np.rint(board).astype(np.int64)

    @staticmethod
    def _draw_scribble(rng: np.random.Generator) -> np.ndarray:
        lo, hi = SCRIBBLE_AREA
        p = rng.uniform(lo + 0.3, hi - 0.3, size=2)
        heading = rng.uniform(0, 2 * math.pi)
        pts = [p]
        for _ in range(int(rng.integers(3, 5))):
            heading += rng.uniform(-1.2, 1.2)
            length = rng.uniform(0.2, 0.35)
            nxt = np.clip(pts[-1] + length * np.array([math.cos(heading), math.sin(heading)]), lo, hi)
            pts.append(nxt)
        grid = np.zeros((IMG, IMG), dtype=bool)
        for a, b in zip(pts[:-1], pts[1:]):
            grid |= _segment_distance(a, b) <= SCRIBBLE_HALF_WIDTH_PX / PX_PER_UNIT
        return grid

    def _advance(self, action) -> None:
        v = _check_action(action, 2)
        s = self.state
        new_ee = np.clip(s.ee + DT * v, 0.0, WORKSPACE)
        near = _segment_distance(s.ee, new_ee) <= WIPE_RADIUS_PX / PX_PER_UNIT
        s.scribble &= ~near
        s.ee = new_ee

    def proprio(self, state=None) -> np.ndarray:
        state = self.state if state is None else state
        return state.ee.astype(np.float32).copy()

    def cleared_fraction(self, state=None) -> float:
        state = self.state if state is None else state
        if state.initial_count == 0:
            return 1.0
        return 1.0 - state.scribble.sum() / state.initial_count

    def metric(self, state=None) -> float:
        return float(self.cleared_fraction(state))

    def success(self, state=None) -> bool:
        return self.cleared_fraction(state) >= WIPE_SUCCESS_FRACTION

    def render_rgb(self, state=None) -> np.ndarray:
        state = self.state if state is None else state
        img = self._background.copy()
        _paint(img, state.scribble, MARKER_COLORS[self.instance.render_style])
        _paint(img, _disc(state.ee[0], state.ee[1], WIPE_RADIUS_PX), SPONGE_COLOR)
        return img.astype(np.uint8)

    def term_mask(self, term: str, state) -> np.ndarray:
        if term in SCRIBBLE_TERMS:
            return state.scribble.astype(np.float32)
        if term in SPONGE_TERMS:
            return _disc(state.ee[0], state.ee[1], WIPE_RADIUS_PX).astype(np.float32)
        return np.zeros((IMG, IMG), np.float32)

    def depth(self, state) -> np.ndarray:
        d = np.full((IMG, IMG), DEPTH_BACKGROUND, np.float32)
        d[_disc(state.ee[0], state.ee[1], WIPE_RADIUS_PX)] = DEPTH_EE
        return d

    def expert_action(self, rng: np.random.Generator | None = None, state=None) -> np.ndarray:
        """Greedy sweep toward the nearest uncleaned cell, overshooting slightly past it."""
        state = self.state if state is None else state
        if not state.scribble.any():
            return np.zeros(2)
        xs, ys = PIX_X[state.scribble], PIX_Y[state.scribble]
        d = np.hypot(xs - state.ee[0], ys - state.ee[1])
        i = int(np.argmin(d))
        target = np.array([xs[i], ys[i]])
        offset = target - state.ee
        aim = target + 0.06 * offset / max(float(d[i]), 1e-9)
        v = _toward(state.ee, aim, gain=10.0)
        if rng is not None:
            v = v + rng.normal(0.0, EXPERT_JITTER, size=2)
        return np.clip(v, -1.0, 1.0)


class Scoop2DEnv(_Env):
    task = "scooping"
    action_dim = 3
    proprio_dim = 3

    # landing / carrying offsets so carried particles stay visible around the spoon
    _OFFSETS = np.array(
        [[math.cos(2 * math.pi * i / SPOON_CAPACITY), math.sin(2 * math.pi * i / SPOON_CAPACITY)] for i in range(SPOON_CAPACITY)]
    ) * (1.5 / PX_PER_UNIT)

    def reset(self, seed: int) -> EnvObs:
        rng = np.random.default_rng(seed)
        left = np.array([0.5 + rng.uniform(-0.1, 0.1), 1.0 + rng.uniform(-0.35, 0.35), BOWL_RADIUS])
        right = np.array([1.5 + rng.uniform(-0.1, 0.1), 1.0 + rng.uniform(-0.35, 0.35), BOWL_RADIUS])
        source, target = (left, right) if rng.random() < 0.5 else (right, left)
        r = 0.22 * np.sqrt(rng.uniform(0, 1, N_PARTICLES))
        th = rng.uniform(0, 2 * math.pi, N_PARTICLES)
        particles = source[:2] + np.stack([r * np.cos(th), r * np.sin(th)], axis=1)
        ee_xy = rng.uniform(0.2, WORKSPACE - 0.2, size=2)
        self.state = Scoop2DState(
            ee=np.array([ee_xy[0], ee_xy[1], 0.5]),
            particles=particles,
            carried=[],
            source=source,
            target=target,
        )
        self._background = np.clip(np.array(TABLE_COLOR) + _texture(self.instance.background_seed), 0, 255)
        return self._observe()

    def _advance(self, action) -> None:
        a = _check_action(action, 3)
        s = self.state
        s.ee = np.array(
            [
                np.clip(s.ee[0] + DT * a[0], 0.0, WORKSPACE),
                np.clip(s.ee[1] + DT * a[1], 0.0, WORKSPACE),
                np.clip(s.ee[2] + DT * a[2], 0.0, 1.0),
            ]
        )
        xy = s.ee[:2]
        if s.ee[2] < PICKUP_TILT and len(s.carried) < SPOON_CAPACITY:
            free = np.setdiff1d(np.arange(N_PARTICLES), s.carried)
            d = np.hypot(*(s.particles[free] - xy).T)
            order = np.argsort(d, kind="stable")
            reach = [int(free[i]) for i in order if d[i] <= PICKUP_RADIUS_PX / PX_PER_UNIT]
            s.carried.extend(reach[: SPOON_CAPACITY - len(s.carried)])
        if s.ee[2] > RELEASE_TILT and s.carried:
            for slot, idx in enumerate(s.carried):
                s.particles[idx] = self._settle(xy + self._OFFSETS[slot], s)
            s.carried = []
        else:
            for slot, idx in enumerate(s.carried):
                s.particles[idx] = xy + self._OFFSETS[slot]

    @staticmethod
    def _settle(p: np.ndarray, s: Scoop2DState) -> np.ndarray:
        for bowl in (s.target, s.source):
            off = p - bowl[:2]
            dist = float(np.linalg.norm(off))
            if dist < bowl[2]:
                limit = bowl[2] - 0.04
                return bowl[:2] + off * min(1.0, limit / max(dist, 1e-9))
        return np.clip(p, 0.0, WORKSPACE)

    def _free(self, s: Scoop2DState) -> np.ndarray:
        keep = np.ones(N_PARTICLES, dtype=bool)
        keep[s.carried] = False
        return keep

    def in_target(self, state=None) -> int:
        s = self.state if state is None else state
        d = np.hypot(*(s.particles - s.target[:2]).T)
        return int(np.sum((d < s.target[2]) & self._free(s)))

    def metric(self, state=None) -> float:
        return float(self.in_target(state))

    def success(self, state=None) -> bool:
        return self.in_target(state) >= SCOOP_SUCCESS_COUNT

    def proprio(self, state=None) -> np.ndarray:
        state = self.state if state is None else state
        return state.ee.astype(np.float32).copy()

    def _particle_pixels(self, s: Scoop2DState) -> np.ndarray:
        m = np.zeros((IMG, IMG), dtype=bool)
        ij = np.clip(np.floor(s.particles * PX_PER_UNIT).astype(int), 0, IMG - 1)
        m[ij[:, 1], ij[:, 0]] = True
        return m

    def _bowl_discs(self, s: Scoop2DState) -> np.ndarray:
        return _disc(*s.source[:2], s.source[2] * PX_PER_UNIT) | _disc(*s.target[:2], s.target[2] * PX_PER_UNIT)

    def _bowl_rims(self, s: Scoop2DState) -> np.ndarray:
        rims = [_disc(*b[:2], b[2] * PX_PER_UNIT) & ~_disc(*b[:2], b[2] * PX_PER_UNIT - BOWL_RIM_PX) for b in (s.source, s.target)]
        return rims[0] | rims[1]

    def render_rgb(self, state=None) -> np.ndarray:
        s = self.state if state is None else state
        img = self._background.copy()
        for bowl in (s.source, s.target):
            _paint(img, _disc(*bowl[:2], bowl[2] * PX_PER_UNIT), BOWL_RIM)
            _paint(img, _disc(*bowl[:2], bowl[2] * PX_PER_UNIT - BOWL_RIM_PX), BOWL_FILL)
        _paint(img, _disc(s.ee[0], s.ee[1], SPOON_RADIUS_PX), SPOON_COLOR)
        palette = PARTICLE_COLORS[self.instance.render_style]
        ij = np.clip(np.floor(s.particles * PX_PER_UNIT).astype(int), 0, IMG - 1)
        for n, (j, i) in enumerate(ij):
            img[i, j] = palette[n % len(palette)]
        return img.astype(np.uint8)

    def term_mask(self, term: str, state) -> np.ndarray:
        if term in PARTICLE_TERMS:
            return self._particle_pixels(state).astype(np.float32)
        if term in BOWL_TERMS:
            return self._bowl_rims(state).astype(np.float32)
        if term in SPOON_TERMS or term in SPONGE_TERMS:
            return _disc(state.ee[0], state.ee[1], SPOON_RADIUS_PX).astype(np.float32)
        return np.zeros((IMG, IMG), np.float32)

    def depth(self, state) -> np.ndarray:
        d = np.full((IMG, IMG), DEPTH_BACKGROUND, np.float32)
        d[self._bowl_discs(state)] = DEPTH_BOWL
        d[self._particle_pixels(state)] = DEPTH_PARTICLE
        d[_disc(state.ee[0], state.ee[1], SPOON_RADIUS_PX)] = DEPTH_EE
        return d

    def expert_action(self, rng: np.random.Generator | None = None, state=None) -> np.ndarray:
        """Phase machine keyed on observable state: approach, dip, carry, tilt out."""
        s = self.state if state is None else state
        xy, tilt = s.ee[:2], s.ee[2]
        free = self._free(s)
        d_target = np.hypot(*(s.particles - s.target[:2]).T)
        loose = free & (d_target >= s.target[2])
        n_carried = len(s.carried)
        reach = 0.25

        dists = np.hypot(*(s.particles - xy).T)
        nearby = loose & (dists < reach)
        if n_carried == 0 and loose.any():
            # head for the middle of the remaining pile, dip once close
            pile = s.particles[loose]
            centre = pile.mean(axis=0)
            aim = pile[np.argmin(np.hypot(*(pile - centre).T))]
            dist = float(np.linalg.norm(aim - xy))
            tilt_goal = 0.0 if dist < 0.3 else 0.5
        elif 0 < n_carried < 6 and nearby.any():
            cand = np.where(nearby)[0]
            aim = s.particles[cand[np.argmin(dists[cand])]]
            tilt_goal = 0.0
        else:
            aim = s.target[:2]
            dist = float(np.linalg.norm(aim - xy))
            tilt_goal = 1.0 if dist < 0.08 else 0.5
        v = _toward(xy, aim, gain=8.0)
        rate = float(np.clip(5.0 * (tilt_goal - tilt), -1.0, 1.0))
        a = np.array([v[0], v[1], rate])
        if rng is not None:
            a = a + rng.normal(0.0, EXPERT_JITTER, size=3)
        return np.clip(a, -1.0, 1.0)


ENV_CLASSES = {"wiping": Scrub2DEnv, "scooping": Scoop2DEnv}


def make_env(task: str, inst: InstanceSpec, step_limit: int | None = None) -> _Env:
    if task not in ENV_CLASSES:
        raise InvalidArgument(f"unknown task {task!r}; expected one of {TASKS}")
    return ENV_CLASSES[task](inst, step_limit)


def reset(task: str, inst: InstanceSpec, seed: int, step_limit: int | None = None) -> tuple[_Env, EnvObs]:
    env = make_env(task, inst, step_limit)
    return env, env.reset(seed)


def rollout_expert(env: _Env, seed: int, rng: np.random.Generator | None = None):
    """Run the scripted expert from ``reset(seed)`` until done; returns (obs list, actions, success)."""
    obs = env.reset(seed)
    frames, actions = [obs], []
    done = False
    while not done:
        a = env.expert_action(rng)
        obs, done, _ = env.step(a)
        actions.append(a)
        frames.append(obs)
    return frames, actions, env.success()
