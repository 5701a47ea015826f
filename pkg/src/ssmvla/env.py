"""PushWorld: a deterministic kinematic tabletop with colored blocks.

The table is a WORLD x WORLD square of cells rendered top-down at
PX_PER_CELL pixels per cell. The gripper is a point tool with three
behaviours driven by the gripper channel of an action:

* open: the tool hovers and passes over blocks;
* closing over a block grasps the topmost one and lifts it to HOLD_LEVEL;
* closed and empty: the tool is lowered and pushes any block it moves
  into (axis-aligned penetration resolution).

Opening releases a held block at the tool position; it lands on top of
another block when dropped over one.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .errors import NonFiniteActionError, UnknownTaskError

WORLD = 16.0
PX_PER_CELL = 4
IMAGE_SIZE = int(WORLD * PX_PER_CELL)
ACTION_DIM = 3
MAX_SPEED = 1.0

BLOCK_HALF = 1.0
BLOCK_HEIGHT = 0.25
TABLE_DEPTH = 2.0
HOLD_LEVEL = 2
GRIPPER_OUTER = 0.75
GRIPPER_INNER = 0.5
GRIPPER_REACH = 0.75  # contact radius of the lowered tool
GRASP_TOL = 1.5
GRIPPER_THRESHOLD = 0.5

PUSH_GOAL_Y = 3.0  # push tasks: block center y <= this
PLACE_GOAL_Y = 13.0  # place tasks: released block center y >= this

TABLE_RGB = (0.80, 0.78, 0.74)
PUSH_ZONE_RGB = (0.68, 0.84, 0.68)
PLACE_ZONE_RGB = (0.68, 0.74, 0.90)
GRIPPER_RGB = (0.08, 0.08, 0.08)

COLORS = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.75, 0.20),
    "blue": (0.15, 0.30, 0.90),
    "yellow": (0.95, 0.85, 0.10),
    "purple": (0.60, 0.20, 0.70),
}
TASK_COLORS = ("red", "green", "blue")
DISTRACTORS = ("yellow", "purple")

TASKS = {
    "push_red": ("push", "red"),
    "push_green": ("push", "green"),
    "push_blue": ("push", "blue"),
    "lift_red": ("lift", "red"),
    "lift_green": ("lift", "green"),
    "lift_blue": ("lift", "blue"),
    "place_red": ("place", "red"),
    "place_blue": ("place", "blue"),
}
INSTRUCTIONS = {
    "push": "push the {color} block to the green strip",
    "lift": "pick up the {color} block",
    "place": "put the {color} block on the blue pad",
}


def instruction_for(task_id):
    verb, color = _task(task_id)
    return INSTRUCTIONS[verb].format(color=color)


def _task(task_id):
    try:
        return TASKS[task_id]
    except KeyError:
        raise UnknownTaskError(f"unknown task {task_id!r}; known: {sorted(TASKS)}") from None


@dataclass(frozen=True)
class Observation:
    rgb: np.ndarray  # H x W x 3 float32 in [0, 1]
    depth: np.ndarray  # H x W float32, meters, > 0
    step_index: int = 0


@dataclass(frozen=True)
class Action:
    delta: np.ndarray  # (2,) planar displacement in cells
    gripper: float = 0.0

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=np.float64).reshape(ACTION_DIM)
        return cls(delta=a[:2].copy(), gripper=float(a[2]))

    def to_array(self):
        return np.array([self.delta[0], self.delta[1], self.gripper], dtype=np.float64)


@dataclass(frozen=True)
class EnvState:
    block_pos: np.ndarray  # n x 2 float64, cell coordinates
    block_level: np.ndarray  # n int64, 0 = on table
    block_colors: tuple
    gripper: np.ndarray  # (2,) float64
    closed: bool
    held: int  # block index or -1
    task_id: str
    step_index: int = 0
    seed: int = 0
    extras: dict = field(default_factory=dict, compare=False)

    def block_index(self, color):
        return self.block_colors.index(color)

    def copy(self, **changes):
        base = dict(
            block_pos=self.block_pos.copy(),
            block_level=self.block_level.copy(),
            gripper=self.gripper.copy(),
        )
        base.update(changes)
        return replace(self, **base)


def reset(seed, task_id):
    """Initial state for ``seed``; the layout depends on the seed only."""
    _task(task_id)
    rng = np.random.default_rng([int(seed), 0x5EED])
    colors = list(TASK_COLORS) + list(DISTRACTORS[: int(rng.integers(0, len(DISTRACTORS) + 1))])
    pos, misses = [], 0
    while len(pos) < len(colors):
        p = np.array([rng.uniform(2.5, WORLD - 2.5), rng.uniform(5.5, 10.0)])
        if all(np.hypot(*(p - q)) >= 3.0 for q in pos):
            pos.append(p)
            misses = 0
        else:
            misses += 1
            if misses > 500:
                # earlier blocks leave no room; start the layout over
                pos, misses = [], 0
    order = rng.permutation(len(colors))
    gripper = np.array([rng.uniform(1.0, WORLD - 1.0), rng.uniform(12.5, 15.0)])
    return EnvState(
        block_pos=np.array(pos, dtype=np.float64)[order],
        block_level=np.zeros(len(colors), dtype=np.int64),
        block_colors=tuple(colors[i] for i in order),
        gripper=gripper,
        closed=False,
        held=-1,
        task_id=task_id,
        step_index=0,
        seed=int(seed),
    )


def set_task(state, task_id):
    _task(task_id)
    return replace(state, task_id=task_id)


def clip_delta(delta):
    delta = np.asarray(delta, dtype=np.float64)
    norm = float(np.hypot(delta[0], delta[1]))
    if norm > MAX_SPEED:
        delta = delta * (MAX_SPEED / norm)
    return delta


def _grasp_target(state):
    g = state.gripper
    best = -1
    for i, p in enumerate(state.block_pos):
        if abs(g[0] - p[0]) < GRASP_TOL and abs(g[1] - p[1]) < GRASP_TOL:
            if best < 0 or state.block_level[i] > state.block_level[best]:
                best = i
    return best


def _release(state):
    pos, level = state.block_pos, state.block_level
    h = state.held
    pos[h] = state.gripper
    support = -1
    for i, p in enumerate(pos):
        if i != h and abs(p[0] - pos[h][0]) < BLOCK_HALF and abs(p[1] - pos[h][1]) < BLOCK_HALF:
            if support < 0 or level[i] > level[support]:
                support = i
    level[h] = 0 if support < 0 else level[support] + 1


def step(state, action):
    """Advance one tick: gripper command first, then motion.

    The planar displacement is clipped to MAX_SPEED (Euclidean) and the tool
    is kept inside the table. Returns ``(state, observation, subtask_done)``.
    """
    a = action.to_array() if isinstance(action, Action) else np.asarray(action, dtype=np.float64).reshape(ACTION_DIM)
    if not np.all(np.isfinite(a)):
        raise NonFiniteActionError(f"non-finite action {a}")
    s = state.copy()
    closed, held = s.closed, s.held

    if a[2] > GRIPPER_THRESHOLD and not closed:
        closed = True
        held = _grasp_target(s)
        if held >= 0:
            s.block_level[held] = HOLD_LEVEL
            s.block_pos[held] = s.gripper
    elif a[2] < -GRIPPER_THRESHOLD and closed:
        closed = False
        if held >= 0:
            s = replace(s, held=held)
            _release(s)
        held = -1

    old = s.gripper.copy()
    new = np.clip(old + clip_delta(a[:2]), 0.0, WORLD)
    s.gripper[:] = new
    if held >= 0:
        s.block_pos[held] = new
    elif closed and np.any(new != old):
        _push_blocks(s, new)
    s = replace(s, closed=closed, held=held, step_index=state.step_index + 1)
    return s, render(s), task_done(s)


def _push_blocks(s, g):
    reach = BLOCK_HALF + GRIPPER_REACH
    moved = []
    for i in range(len(s.block_pos)):
        if _separate(s.block_pos, i, g, reach):
            moved.append(i)
    # pushed blocks shove same-level neighbours; a few passes settle chains
    for _ in range(len(s.block_pos)):
        if not moved:
            break
        nxt = []
        for i in moved:
            for j in range(len(s.block_pos)):
                if j != i and s.block_level[j] == s.block_level[i]:
                    if _separate(s.block_pos, j, s.block_pos[i], 2 * BLOCK_HALF):
                        nxt.append(j)
        moved = nxt


def _separate(pos, i, pusher, reach):
    d = pos[i] - pusher
    pen = reach - np.abs(d)
    if pen[0] <= 0 or pen[1] <= 0:
        return False
    axis = 0 if pen[0] < pen[1] else 1
    direction = 1.0 if d[axis] >= 0 else -1.0
    pos[i, axis] += direction * pen[axis]
    pos[i] = np.clip(pos[i], BLOCK_HALF, WORLD - BLOCK_HALF)
    return True


def task_done(state):
    verb, color = _task(state.task_id)
    i = state.block_index(color)
    if verb == "push":
        return bool(state.held != i and state.block_pos[i, 1] <= PUSH_GOAL_Y)
    if verb == "lift":
        return bool(state.held == i)
    return bool(state.held != i and state.block_pos[i, 1] >= PLACE_GOAL_Y)


def _background():
    ys = (np.arange(IMAGE_SIZE) + 0.5) / PX_PER_CELL
    bg = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float32)
    bg[:] = np.array(TABLE_RGB, dtype=np.float32)
    bg[ys < PUSH_GOAL_Y] = np.array(PUSH_ZONE_RGB, dtype=np.float32)
    bg[ys >= PLACE_GOAL_Y] = np.array(PLACE_ZONE_RGB, dtype=np.float32)
    return bg


_BACKGROUND = _background()
_BACKGROUND.setflags(write=False)


def shaded_color(color, level):
    return np.minimum(np.asarray(COLORS[color], dtype=np.float64) * (0.8 + 0.1 * level), 1.0)


def _render_arrays(state, backend=None):
    k = kernels.get_backend(backend)
    n = len(state.block_colors)
    colors = np.array([shaded_color(c, lv) for c, lv in zip(state.block_colors, state.block_level)], dtype=np.float64)
    return k.render_scene(
        _BACKGROUND,
        TABLE_DEPTH,
        BLOCK_HEIGHT,
        BLOCK_HALF,
        np.ascontiguousarray(state.block_pos, dtype=np.float64).reshape(n, 2),
        np.ascontiguousarray(state.block_level, dtype=np.int64),
        colors.reshape(n, 3),
        float(state.gripper[0]),
        float(state.gripper[1]),
        bool(state.closed),
        GRIPPER_OUTER,
        GRIPPER_INNER,
        float(PX_PER_CELL),
        np.array(GRIPPER_RGB, dtype=np.float64),
    )


def render(state, backend=None):
    rgb, depth = _render_arrays(state, backend)
    return Observation(rgb=rgb, depth=depth, step_index=state.step_index)


def render_depth(state, backend=None):
    """Top-down distance to the nearest surface: table or block top faces."""
    return _render_arrays(state, backend)[1]


def block_footprint(state, i):
    """Boolean pixel mask of block ``i`` computed from its pose alone."""
    c = (np.arange(IMAGE_SIZE) + 0.5) / PX_PER_CELL
    x, y = state.block_pos[i]
    return (np.abs(c[:, None] - y) < BLOCK_HALF) & (np.abs(c[None, :] - x) < BLOCK_HALF)


def random_action(rng):
    return Action.from_array(rng.uniform(-1.0, 1.0, size=ACTION_DIM))
