"""Scripted proportional-control experts for every registered task.

Experts are stateless: the action depends on the environment state only,
so a demonstration can be replayed from ``(seed, task chain)``.
"""
import numpy as np

from .env import (
    ACTION_DIM,
    BLOCK_HALF,
    GRASP_TOL,
    GRIPPER_REACH,
    MAX_SPEED,
    PLACE_GOAL_Y,
    PUSH_GOAL_Y,
    TASKS,
    WORLD,
    Action,
    _task,
    clip_delta,
    render,
    set_task,
    step,
    task_done,
)
from .errors import InfeasibleTaskError

OPEN, CLOSE = -1.0, 1.0
GRASP_ALIGN = 1.0  # close over a block when this near; grasping succeeds within GRASP_TOL
PUSH_ALIGN = 0.5
RELEASE_ALIGN = 0.5
AXIS_TOL = 0.5
PUSH_STANDOFF = BLOCK_HALF + GRIPPER_REACH + 1.0  # well outside GRASP_TOL
PLACE_CARRY_Y = PLACE_GOAL_Y + 1.0


def _act(delta, gripper):
    d = clip_delta(np.asarray(delta, dtype=np.float64))
    return Action(delta=d, gripper=float(gripper))


def _axis_step(to):
    # x first, then y: a near-discrete action set that is easy to imitate
    to = np.asarray(to, dtype=np.float64)
    if abs(to[0]) >= AXIS_TOL:
        return (float(np.clip(to[0], -MAX_SPEED, MAX_SPEED)), 0.0)
    return (0.0, float(np.clip(to[1], -MAX_SPEED, MAX_SPEED)))


def _idle(state):
    return _act((0.0, 0.0), CLOSE if state.closed else OPEN)


def _reach_and_grasp(state, i):
    # the open tool hovers, so any path is safe
    to = state.block_pos[i] - state.gripper
    if state.closed:
        return _act((0.0, 0.0), OPEN)
    if np.max(np.abs(to)) < GRASP_ALIGN:
        return _act((0.0, 0.0), CLOSE)
    return _act(_axis_step(to), OPEN)


def _drop_elsewhere(state, i):
    # a wrongly grasped block is carried clear of the target before release
    away = state.gripper - state.block_pos[i]
    dist = float(np.hypot(*away))
    if dist >= 3.0:
        return _act((0.0, 0.0), OPEN)
    if dist < 1e-6:
        away = np.array([1.0 if state.gripper[0] < WORLD / 2 else -1.0, 0.0])
    return _act(away / np.hypot(*away) * MAX_SPEED, CLOSE)


def _push_approach(state, i):
    # first standoff below the block where closing the tool grasps nothing
    b = state.block_pos[i]
    y = b[1] + PUSH_STANDOFF
    while y <= WORLD:
        p = np.array([b[0], y])
        clear = all(
            not (abs(p[0] - q[0]) < GRASP_TOL and abs(p[1] - q[1]) < GRASP_TOL)
            for q in state.block_pos
        )
        if clear:
            return p
        y += 0.5
    raise InfeasibleTaskError(f"no free push standoff below the {state.block_colors[i]} block")


def _push(state, i):
    if state.held == i:
        return _act((0.0, 0.0), OPEN)
    if state.held >= 0:
        return _drop_elsewhere(state, i)
    b = state.block_pos[i]
    g = state.gripper
    in_column = abs(g[0] - b[0]) < 0.75 and g[1] > b[1] + BLOCK_HALF
    if state.closed:
        if in_column:
            return _act((b[0] - g[0], -MAX_SPEED), CLOSE)
        return _act((0.0, 0.0), OPEN)
    approach = _push_approach(state, i)
    if np.max(np.abs(approach - g)) < PUSH_ALIGN:
        return _act((0.0, 0.0), CLOSE)
    return _act(_axis_step(approach - g), OPEN)


def _place(state, i):
    if state.held == i:
        g = state.gripper
        if g[1] >= PLACE_CARRY_Y - RELEASE_ALIGN:
            return _act((0.0, 0.0), OPEN)
        return _act((0.0, PLACE_CARRY_Y - g[1]), CLOSE)
    if state.held >= 0:
        return _drop_elsewhere(state, i)
    return _reach_and_grasp(state, i)


def scripted_expert(state, task_id=None):
    """Greedy proportional controller toward the goal of ``task_id``.

    Returns an idle action when the task already holds.
    """
    task_id = task_id or state.task_id
    verb, color = _task(task_id)
    try:
        i = state.block_index(color)
    except ValueError:
        raise InfeasibleTaskError(f"no {color} block in scene") from None
    if task_done(set_task(state, task_id)):
        return _idle(state)
    if verb == "push":
        return _push(state, i)
    if verb == "lift":
        if state.held >= 0:
            return _drop_elsewhere(state, i)
        return _reach_and_grasp(state, i)
    return _place(state, i)


def rollout_expert(state, horizon=64):
    """Run the expert on ``state.task_id``; returns (observations, actions, states, success)."""
    obs = [render(state)]
    actions, states = [], [state]
    if task_done(state):
        return obs, actions, states, True
    for _ in range(horizon):
        a = scripted_expert(state)
        state, o, done = step(state, a)
        obs.append(o)
        actions.append(a)
        states.append(state)
        if done:
            return obs, actions, states, True
    return obs, actions, states, False


def action_array(actions):
    if not actions:
        return np.zeros((0, ACTION_DIM), dtype=np.float32)
    return np.stack([a.to_array() for a in actions]).astype(np.float32)


def expert_tasks():
    return sorted(TASKS)
