"""Deterministic 2D tabletop pick-and-place environment.

Everything downstream (world-model training data, ground-truth labels for
segmentation and compositing tests, benchmark outcomes) comes from here.
Coordinates are ``(row, col)`` in pixels; an action's ``dx`` moves the
gripper along rows and ``dy`` along columns.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import distance_transform_edt

H = W = 64
BACKGROUND = (0.7, 0.7, 0.7)
GRIPPER_COLOR = (0.1, 0.1, 0.1)
GRIPPER_SIZE = 8
V_MAX = 6.0
PICKUP_RADIUS = 5.0
PLAN_LENGTH = 12
DETOUR = 16.0

# Training colours all satisfy r + g == 2b, so together with the grey
# background and the gripper they span a 2D colour plane.  Novel colours
# leave that plane.
TRAINING_PALETTE = (
    (0.95, 0.35, 0.65),
    (0.35, 0.95, 0.65),
    (0.70, 0.10, 0.40),
    (0.10, 0.70, 0.40),
    (1.00, 0.75, 0.875),
    (0.75, 1.00, 0.875),
)
NOVEL_PALETTE = (
    (0.95, 0.90, 0.25),
    (0.45, 0.50, 0.95),
    (0.85, 0.60, 0.15),
    (0.55, 0.80, 0.15),
    (0.30, 0.35, 0.90),
    (0.70, 0.55, 1.00),
)
TRAINING_SHAPES = ("circle", "rect")
NOVEL_SHAPES = ("circle", "rect", "triangle")

SHAPES = ("circle", "rect", "triangle")
CATEGORIES = ("training", "novel")
ROLES = ("target", "obstacle", "distractor", "container")


class ConfigError(ValueError):
    """Scene configuration cannot be realised."""


@dataclass(frozen=True)
class ObjectSpec:
    id: int
    shape: str
    color: tuple
    center: tuple
    size: float
    depth_rank: int
    category: str
    role: str

    def moved_to(self, center) -> "ObjectSpec":
        return dataclasses.replace(self, center=(float(center[0]), float(center[1])))


@dataclass(frozen=True)
class SceneState:
    objects: tuple
    gripper: tuple
    grip: int = 0
    held: Optional[int] = None
    goal_region: tuple = (0, 0, 0, 0)  # (r0, c0, r1, c1), half-open
    rng_seed: int = 0
    tick: int = 0

    def object(self, oid: int) -> ObjectSpec:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(oid)

    def by_role(self, role: str) -> list:
        return [o for o in self.objects if o.role == role]

    @property
    def target(self) -> ObjectSpec:
        return self.by_role("target")[0]


@dataclass(frozen=True)
class Action:
    dx: float = 0.0
    dy: float = 0.0
    grip: int = 0

    def __post_init__(self):
        dx, dy = float(self.dx), float(self.dy)
        if not (np.isfinite(dx) and np.isfinite(dy)):
            raise ValueError("action components must be finite")
        object.__setattr__(self, "dx", min(1.0, max(-1.0, dx)))
        object.__setattr__(self, "dy", min(1.0, max(-1.0, dy)))
        object.__setattr__(self, "grip", 1 if self.grip else 0)

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, float(self.grip)])


@dataclass(frozen=True)
class ActionPlan:
    actions: tuple

    def __len__(self):
        return len(self.actions)

    def __iter__(self):
        return iter(self.actions)

    def as_array(self) -> np.ndarray:
        if not self.actions:
            return np.zeros((0, 3))
        return np.stack([a.as_array() for a in self.actions])

    @classmethod
    def from_array(cls, arr) -> "ActionPlan":
        arr = np.asarray(arr, dtype=float).reshape(-1, 3)
        return cls(tuple(Action(r[0], r[1], int(round(r[2]))) for r in arr))


@dataclass(frozen=True)
class TaskSpec:
    instruction_tag: str
    target_color: tuple
    goal_region: tuple

    @classmethod
    def from_state(cls, state: SceneState, tag: str = "place target in container") -> "TaskSpec":
        return cls(tag, tuple(state.target.color), tuple(state.goal_region))


@dataclass
class RenderOutput:
    frame: np.ndarray
    label_map: np.ndarray
    depth_map: np.ndarray
    gripper_mask: np.ndarray


@dataclass
class SceneConfig:
    n_training: int = 1
    n_novel: int = 0
    layout: str = "random"  # "random" | "blocking"
    goal_rect: Optional[tuple] = None
    target_size: tuple = (8, 10)
    obstacle_size: tuple = (10, 13)
    novel_size: tuple = (10, 13)
    container_size: int = 16
    min_gap: int = 8  # free-placed objects keep this many px from everything else
    carry_distance: tuple = (26.0, 32.0)  # target-to-goal distance in the blocking layout
    block_fraction: tuple = (0.45, 0.6)  # blocker position along the carry line
    block_offset: tuple = (4.0, 8.0)  # sideways shift of the blocker off that line, random side
    grip_distance: tuple = (10.0, 20.0)  # gripper start distance from the target
    training_palette: Optional[list] = None
    novel_palette: Optional[list] = None

    def __post_init__(self):
        if not 0 <= self.n_novel <= 3:
            raise ConfigError("n_novel must be in 0..3")
        if self.n_training < 0:
            raise ConfigError("n_training must be >= 0")
        if self.layout not in ("random", "blocking"):
            raise ConfigError(f"unknown layout {self.layout!r}")
        if self.layout == "blocking" and self.n_novel < 1:
            raise ConfigError("blocking layout needs at least one novel distractor")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known - {"seed"}
        if unknown:
            raise ConfigError(f"unknown scene config keys: {sorted(unknown)}")
        kw = {k: (tuple(v) if isinstance(v, list) and not k.endswith("_palette") else v)
              for k, v in d.items() if k in known}
        return cls(**kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_scene_config(path) -> tuple:
    """Read a JSON scene config; returns ``(SceneConfig, seed or None)``."""
    with open(path) as f:
        d = json.load(f)
    return SceneConfig.from_dict(d), d.get("seed")


# ---------------------------------------------------------------- geometry

_ROWS, _COLS = np.mgrid[0:H, 0:W]


def shape_mask(shape: str, center, size: float) -> np.ndarray:
    r, c = center
    half = size / 2.0
    if shape == "circle":
        return (_ROWS - r) ** 2 + (_COLS - c) ** 2 <= half * half
    if shape == "rect":
        return (_ROWS >= r - half) & (_ROWS < r + half) & (_COLS >= c - half) & (_COLS < c + half)
    if shape == "triangle":
        top = r - half
        inside_rows = (_ROWS >= top) & (_ROWS < r + half)
        return inside_rows & (np.abs(_COLS - c) <= 0.5 * (_ROWS - top) + 0.5)
    raise ValueError(f"unknown shape {shape!r}")


def object_mask(obj: ObjectSpec) -> np.ndarray:
    return shape_mask(obj.shape, obj.center, obj.size)


def gripper_mask(pos) -> np.ndarray:
    return shape_mask("rect", pos, GRIPPER_SIZE)


def _in_bounds(shape, center, size) -> bool:
    half = size / 2.0 + 1
    r, c = center
    return half <= r <= H - half and half <= c <= W - half


# ---------------------------------------------------------------- render

def render(state: SceneState) -> RenderOutput:
    """Painter's-algorithm render: objects by ascending depth rank, gripper last."""
    frame = np.empty((H, W, 3))
    frame[:] = BACKGROUND
    label = np.zeros((H, W), dtype=np.int32)
    depth = np.zeros((H, W), dtype=np.int32)
    for obj in sorted(state.objects, key=lambda o: o.depth_rank):
        m = object_mask(obj)
        frame[m] = obj.color
        label[m] = obj.id
        depth[m] = obj.depth_rank
    gm = gripper_mask(state.gripper)
    frame[gm] = GRIPPER_COLOR
    return RenderOutput(frame, label, depth, gm)


# ---------------------------------------------------------------- dynamics

def step(state: SceneState, action: Action) -> SceneState:
    """Advance one tick. Collisions are not prevented, only recorded later."""
    r, c = state.gripper
    half = GRIPPER_SIZE / 2.0
    r = min(H - half, max(half, r + action.dx * V_MAX))
    c = min(W - half, max(half, c + action.dy * V_MAX))
    objects = list(state.objects)
    held = state.held
    if held is not None:
        objects = [o.moved_to((r, c)) if o.id == held else o for o in objects]
    if action.grip and not state.grip:
        best, best_d = None, PICKUP_RADIUS
        for o in objects:
            if o.role == "container":
                continue
            d = float(np.hypot(o.center[0] - r, o.center[1] - c))
            if d <= best_d:
                best, best_d = o.id, d
        if best is not None:
            held = best
            objects = [o.moved_to((r, c)) if o.id == best else o for o in objects]
    elif not action.grip and state.grip:
        held = None
    return dataclasses.replace(
        state, objects=tuple(objects), gripper=(float(r), float(c)),
        grip=action.grip, held=held, tick=state.tick + 1,
    )


def rollout(state: SceneState, plan) -> list:
    """All states visited by executing ``plan``, starting with ``state``."""
    states = [state]
    for a in plan:
        states.append(step(states[-1], a))
    return states


def check_outcome(trajectory: Sequence[SceneState], task: Optional[TaskSpec] = None) -> dict:
    """Task success and collision flags for an executed trajectory.

    ``collision`` is raised when, at any tick, the gripper or the held object
    overlaps a static object that is neither the target nor the container.
    """
    collision = False
    for s in trajectory:
        foot = gripper_mask(s.gripper)
        if s.held is not None:
            foot = foot | object_mask(s.object(s.held))
        for o in s.objects:
            if o.role in ("target", "container") or o.id == s.held:
                continue
            if np.any(foot & object_mask(o)):
                collision = True
                break
        if collision:
            break
    final = trajectory[-1]
    goal = task.goal_region if task is not None else final.goal_region
    tgt = final.target
    r0, c0, r1, c1 = goal
    placed = final.held != tgt.id and r0 <= tgt.center[0] < r1 and c0 <= tgt.center[1] < c1
    ever_held = any(s.held == tgt.id for s in trajectory)
    return {"success": bool(placed and ever_held), "collision": bool(collision)}


# ---------------------------------------------------------------- scenes

def _palette(config: SceneConfig, novel: bool):
    if novel:
        return [tuple(c) for c in (config.novel_palette or NOVEL_PALETTE)]
    return [tuple(c) for c in (config.training_palette or TRAINING_PALETTE)]


def _overlaps(mask, occupied, margin=2) -> bool:
    """True if ``mask`` comes within ``margin`` px (Euclidean) of ``occupied``."""
    if not occupied.any():
        return False
    return bool(distance_transform_edt(~occupied)[mask].min() <= margin)


def _place(rng, make, occupied, margin, tries=100, reject=None):
    """Sample free positions via ``make(rng)`` until one clears ``occupied``."""
    dist = distance_transform_edt(~occupied) if occupied.any() else None
    for _ in range(tries):
        obj = make(rng)
        if not _in_bounds(obj.shape, obj.center, obj.size):
            continue
        m = object_mask(obj)
        if dist is not None and dist[m].min() <= margin:
            continue
        if reject is not None and reject(m):
            continue
        return obj, m
    return None, None


def init_scene(config: SceneConfig, seed: int) -> SceneState:
    """Sample a non-overlapping scene. Raises ConfigError after 1000 failed draws."""
    rng = np.random.default_rng([int(seed), 0x5CE7E])
    tpal = _palette(config, novel=False)
    npal = _palette(config, novel=True)
    for _ in range(1000):
        scene = _try_scene(config, rng, tpal, npal, seed)
        if scene is not None:
            return scene
    raise ConfigError("could not place all objects after 1000 attempts")


def _try_scene(config, rng, tpal, npal, seed):
    occupied = np.zeros((H, W), dtype=bool)
    objects = []
    cs = config.container_size
    if config.goal_rect is not None:
        r0, c0, r1, c1 = (int(v) for v in config.goal_rect)
    else:
        r0 = int(rng.integers(4, H - cs - 4))
        c0 = int(rng.integers(4, W - cs - 4))
        r1, c1 = r0 + cs, c0 + cs
    goal = (r0, c0, r1, c1)
    colors = list(rng.permutation(len(tpal)))
    container = ObjectSpec(1, "rect", tpal[colors[0]], ((r0 + r1) / 2.0, (c0 + c1) / 2.0),
                           float(r1 - r0), 1, "training", "container")
    objects.append(container)
    occupied |= object_mask(container)

    gc = np.array(container.center)
    tsize = float(rng.integers(config.target_size[0], config.target_size[1] + 1))
    lo, hi = config.carry_distance if config.layout == "blocking" else (16.0, 30.0)
    ang = rng.uniform(0, 2 * np.pi)
    dist = rng.uniform(lo, hi)
    tc = gc + dist * np.array([np.sin(ang), np.cos(ang)])
    tshape = TRAINING_SHAPES[int(rng.integers(len(TRAINING_SHAPES)))]
    if not _in_bounds(tshape, tc, tsize):
        return None
    target = ObjectSpec(2, tshape, tpal[colors[1]], (float(tc[0]), float(tc[1])), tsize, 0,
                        "training", "target")
    if _overlaps(object_mask(target), occupied):
        return None
    objects.append(target)
    occupied |= object_mask(target)

    # gripper starts on the far side of the target, as after a previous placement
    back = np.arctan2(*(tc - gc))
    gang = back + rng.uniform(-np.pi / 2, np.pi / 2)
    gdist = rng.uniform(*config.grip_distance)
    gpos = tc + gdist * np.array([np.sin(gang), np.cos(gang)])
    half = GRIPPER_SIZE / 2.0 + 1
    if not (half <= gpos[0] <= H - half and half <= gpos[1] <= W - half):
        return None
    if _overlaps(gripper_mask(gpos), occupied):
        return None
    grip_area = gripper_mask(gpos)

    next_id = 3
    for k in range(config.n_novel):
        size = float(rng.integers(config.novel_size[0], config.novel_size[1] + 1))
        shape = NOVEL_SHAPES[int(rng.integers(len(NOVEL_SHAPES)))]
        color = npal[int(rng.integers(len(npal)))]
        if config.layout == "blocking" and k == 0:
            # on the carry route; may sit close to target/container but not on them
            frac = rng.uniform(*config.block_fraction)
            d = (gc - tc) / np.linalg.norm(gc - tc)
            perp = np.array([-d[1], d[0]])
            center = tc + frac * (gc - tc) + rng.choice((-1.0, 1.0)) * rng.uniform(*config.block_offset) * perp
            obj = ObjectSpec(next_id, shape, color, (float(center[0]), float(center[1])), size,
                             0, "novel", "distractor")
            m = object_mask(obj)
            if not _in_bounds(shape, center, size) or _overlaps(m, occupied | grip_area, 1):
                return None
        else:
            def make(g, shape=shape, size=size, color=color, oid=next_id):
                c = g.uniform(size / 2 + 1, H - size / 2 - 1, size=2)
                return ObjectSpec(oid, shape, color, (float(c[0]), float(c[1])), size, 0,
                                  "novel", "distractor")
            obj, m = _place(rng, make, occupied | grip_area, config.min_gap)
            if obj is None:
                return None
        objects.append(obj)
        occupied |= m
        next_id += 1

    for _ in range(config.n_training):
        size = float(rng.integers(config.obstacle_size[0], config.obstacle_size[1] + 1))
        shape = TRAINING_SHAPES[int(rng.integers(len(TRAINING_SHAPES)))]
        color = tpal[colors[2 + int(rng.integers(len(tpal) - 2))]]

        def make(g, shape=shape, size=size, color=color, oid=next_id):
            c = g.uniform(size / 2 + 1, H - size / 2 - 1, size=2)
            return ObjectSpec(oid, shape, color, (float(c[0]), float(c[1])), size, 0,
                              "training", "obstacle")
        obj, m = _place(rng, make, occupied | grip_area, config.min_gap,
                        reject=lambda m: _blocks_route(m, tc, gc, gpos))
        if obj is None:
            return None
        objects.append(obj)
        occupied |= m
        next_id += 1

    # container lowest; remaining ranks shuffled so occlusion order varies
    others = objects[1:]
    ranks = list(rng.permutation(len(others)) + 2)
    objects = [container] + [dataclasses.replace(o, depth_rank=int(rk)) for o, rk in zip(others, ranks)]
    return SceneState(tuple(objects), (float(gpos[0]), float(gpos[1])), 0, None, goal, int(seed), 0)


def _blocks_route(mask, tc, gc, gpos, width: float = 18.0) -> bool:
    """True if ``mask`` sits on the approach leg or on any of the three carry
    corridors (direct, and ``DETOUR`` px to either side) of the scripted policy."""
    carry = gc - tc
    perp = np.array([-carry[1], carry[0]]) / max(np.linalg.norm(carry), 1e-9)
    legs = [(gpos, tc, 14.0)]
    for mode in (-1, 0, 1):
        via = tc + 0.5 * carry + mode * DETOUR * perp
        legs += [(tc, via, width), (via, gc, width)]
    band = np.zeros((H, W), dtype=bool)
    for a, b, w in legs:
        for t in np.linspace(0.0, 1.0, 16):
            band |= shape_mask("circle", a + t * (b - a), w)
    return bool(np.any(band & mask))


# ---------------------------------------------------------------- policies

def _toward(pos, goal, grip):
    """Straight-line move, as fast as the per-axis speed limit allows."""
    d = (np.asarray(goal, float) - np.asarray(pos, float)) / V_MAX
    d = d / max(1.0, float(np.max(np.abs(d))))
    return Action(d[0], d[1], grip)


def _drive(pos, waypoint, grip, actions, limit):
    """Append clamped moves toward ``waypoint`` until reached; returns new pos."""
    pos = np.asarray(pos, float)
    while len(actions) < limit:
        a = _toward(pos, waypoint, grip)
        actions.append(a)
        pos = pos + V_MAX * np.array([a.dx, a.dy])
        if np.max(np.abs(pos - waypoint)) < 1e-9:
            break
    return pos


def scripted_policy(state: SceneState, task: Optional[TaskSpec] = None, noise: float = 0.0,
                    rng=None, horizon: int = PLAN_LENGTH,
                    detour: float = DETOUR, mode: Optional[int] = None) -> ActionPlan:
    """Approach target, grip, carry to the goal centre, release, back off.

    With ``noise > 0`` the carry leg passes through a via-point whose route
    mode (straight, left or right of the direct line, ``detour`` px aside) is
    drawn uniformly, then jittered by isotropic Gaussian noise of std
    ``noise`` px.  The approach leg is never perturbed, so the first action
    does not depend on ``noise``.  The route ignores obstacles.  ``mode``
    forces the route (-1, 0 or 1) instead of drawing it.
    """
    rng = np.random.default_rng(rng)
    goal = task.goal_region if task is not None else state.goal_region
    gc = np.array([(goal[0] + goal[2]) / 2.0, (goal[1] + goal[3]) / 2.0])
    tc = np.array(state.target.center)
    pos = np.array(state.gripper, float)
    actions: list = []

    pos = _drive(pos, tc, 0, actions, horizon)
    if actions:
        last = actions[-1]
        actions[-1] = Action(last.dx, last.dy, 1)
    else:
        actions.append(Action(0, 0, 1))
    carry = gc - tc
    perp = np.array([-carry[1], carry[0]]) / max(np.linalg.norm(carry), 1e-9)
    drawn = int(rng.integers(-1, 2)) if noise > 0 else 0
    mode = drawn if mode is None else int(mode)
    offsets = rng.normal(0.0, 1.0, size=2) * noise
    via = tc + 0.5 * carry + mode * detour * perp + offsets
    half = GRIPPER_SIZE / 2.0
    via = np.clip(via, half, W - half)
    if noise > 0 or mode != 0:
        pos = _drive(pos, via, 1, actions, horizon)
    pos = _drive(pos, gc, 1, actions, horizon)
    if len(actions) < horizon:
        last = actions[-1]
        actions[-1] = Action(last.dx, last.dy, 0)
    # one tick of back-off along the carry direction uncovers the placed target
    if len(actions) < horizon:
        away = np.sign(gc - tc)
        actions.append(Action(away[0], away[1], 0))
    while len(actions) < horizon:
        actions.append(Action(0.0, 0.0, 0))
    return ActionPlan(tuple(actions[:horizon]))


def sample_exploration_plan(rng, horizon: int = PLAN_LENGTH, p_toggle: float = 0.1) -> ActionPlan:
    """i.i.d. uniform moves; the grip bit toggles with probability ``p_toggle`` per tick."""
    rng = np.random.default_rng(rng)
    grip = 0
    actions = []
    for _ in range(horizon):
        dx, dy = rng.uniform(-1.0, 1.0, size=2)
        if rng.random() < p_toggle:
            grip = 1 - grip
        actions.append(Action(dx, dy, grip))
    return ActionPlan(tuple(actions))


def episode_rng(global_seed: int, episode: int, purpose: str) -> np.random.Generator:
    """Independent stream per (seed, episode, purpose) for order-free parallelism."""
    tag = int.from_bytes(purpose.encode()[:8].ljust(8, b"\0"), "little")
    return np.random.default_rng([int(global_seed), int(episode), tag])


def is_scripted_episode(episode: int, fraction: float = 0.4) -> bool:
    """Interleaved mixed-policy schedule: exactly ``floor(fraction * N)`` of
    the first ``N`` episodes are scripted, spread evenly."""
    return int((episode + 1) * fraction + 1e-9) > int(episode * fraction + 1e-9)


def generate_episode(global_seed: int, episode: int, policy: str = "scripted", n_novel: int = 0,
                     noise: float = 4.0, horizon: int = PLAN_LENGTH):
    """Sample a scene and a plan for one dataset episode.

    Returns ``(config, states, plan)`` where ``states`` has ``horizon + 1``
    entries.  ``policy`` is ``"scripted"``, ``"random"`` or ``"mixed"``.
    """
    if policy == "mixed":
        policy = "scripted" if is_scripted_episode(episode) else "random"
    rng = episode_rng(global_seed, episode, "scene")
    n_training = int(rng.integers(0, 4))
    scene_seed = int(rng.integers(2 ** 31))
    # crowded draws may not fit; drop obstacles until the scene can be placed
    while True:
        config = SceneConfig(n_training=n_training, n_novel=n_novel)
        try:
            state = init_scene(config, scene_seed)
            break
        except ConfigError:
            if n_training == 0:
                raise
            n_training -= 1
    if policy == "scripted":
        plan = scripted_policy(state, TaskSpec.from_state(state), noise,
                               episode_rng(global_seed, episode, "policy"), horizon)
    elif policy == "random":
        plan = sample_exploration_plan(episode_rng(global_seed, episode, "explore"), horizon)
    else:
        raise ConfigError(f"unknown policy {policy!r}")
    return config, rollout(state, plan), plan


def state_to_dict(state: SceneState) -> dict:
    return {
        "objects": [dataclasses.asdict(o) for o in state.objects],
        "gripper": list(state.gripper),
        "grip": state.grip,
        "held": state.held,
        "goal_region": list(state.goal_region),
        "rng_seed": state.rng_seed,
        "tick": state.tick,
    }


def state_from_dict(d: dict) -> SceneState:
    objs = tuple(ObjectSpec(**{**o, "color": tuple(o["color"]), "center": tuple(o["center"])})
                 for o in d["objects"])
    return SceneState(objs, tuple(d["gripper"]), int(d["grip"]), d["held"],
                      tuple(d["goal_region"]), int(d["rng_seed"]), int(d["tick"]))
