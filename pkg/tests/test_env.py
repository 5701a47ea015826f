import numpy as np
import pytest

from ssmvla import env
from ssmvla.errors import NonFiniteActionError, UnknownTaskError


def _frames_equal(a, b):
    return a.rgb.tobytes() == b.rgb.tobytes() and a.depth.tobytes() == b.depth.tobytes()


def test_reset_is_deterministic():
    a = env.render(env.reset(0, "push_red"))
    b = env.render(env.reset(0, "push_red"))
    assert _frames_equal(a, b)


def test_different_seeds_give_different_layouts():
    s0, s1 = env.reset(0, "push_red"), env.reset(1, "push_red")
    assert not np.array_equal(s0.block_pos, s1.block_pos)
    assert not _frames_equal(env.render(s0), env.render(s1))


def test_unknown_task_rejected():
    with pytest.raises(UnknownTaskError):
        env.reset(0, "bogus")


def test_zero_action_only_advances_step_index():
    s = env.reset(3, "lift_red")
    s2, obs, _ = env.step(s, env.Action(np.zeros(2), 0.0))
    assert s2.step_index == s.step_index + 1
    np.testing.assert_array_equal(s2.block_pos, s.block_pos)
    np.testing.assert_array_equal(s2.gripper, s.gripper)
    assert (s2.closed, s2.held) == (s.closed, s.held)
    assert _frames_equal(obs, env.render(s))


def test_overspeed_action_is_clipped():
    s = env.reset(5, "push_blue")
    s = s.copy(gripper=np.array([8.0, 8.0]))
    s2, _, _ = env.step(s, env.Action(np.array([3.0, 4.0]), -1.0))
    moved = s2.gripper - s.gripper
    assert np.hypot(*moved) == pytest.approx(env.MAX_SPEED, abs=1e-12)
    np.testing.assert_allclose(moved, [0.6, 0.8], atol=1e-12)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_action_rejected(bad):
    s = env.reset(0, "push_red")
    with pytest.raises(NonFiniteActionError):
        env.step(s, np.array([0.0, bad, 0.0]))


def _empty_state():
    return env.EnvState(
        block_pos=np.zeros((0, 2)),
        block_level=np.zeros(0, dtype=np.int64),
        block_colors=(),
        gripper=np.array([-50.0, -50.0]),
        closed=False,
        held=-1,
        task_id="push_red",
    )


def test_empty_scene_depth_is_constant():
    d = env.render_depth(_empty_state())
    assert np.all(d == np.float32(env.TABLE_DEPTH))


def test_single_block_depth_minimum_inside_footprint():
    s = env.reset(11, "push_red")
    s = s.copy(block_pos=s.block_pos[:1], block_level=s.block_level[:1])
    s = env.EnvState(**{**s.__dict__, "block_colors": s.block_colors[:1], "gripper": np.array([-50.0, -50.0])})
    d = env.render_depth(s)
    foot = env.block_footprint(s, 0)
    assert foot.any()
    assert d[foot].max() < d[~foot].min()
    assert np.unravel_index(np.argmin(d), d.shape) in set(zip(*np.nonzero(foot)))


def test_stacked_block_is_closer():
    s = env.reset(2, "place_red")
    pos = s.block_pos.copy()
    pos[1] = pos[0] + np.array([0.5, 0.0])
    level = s.block_level.copy()
    level[1] = 1
    s = s.copy(block_pos=pos, block_level=level, gripper=np.array([-50.0, -50.0]))
    d = env.render_depth(s)
    top = env.block_footprint(s, 1)
    lower_only = env.block_footprint(s, 0) & ~top
    assert d[top].max() < d[lower_only].min()


def test_rendered_frames_are_bounded():
    rng = np.random.default_rng(0)
    s = env.reset(7, "lift_green")
    for _ in range(40):
        s, obs, _ = env.step(s, env.random_action(rng))
        assert obs.rgb.min() >= 0.0 and obs.rgb.max() <= 1.0
        assert obs.depth.min() > 0.0
        assert obs.rgb.shape[:2] == obs.depth.shape == (env.IMAGE_SIZE, env.IMAGE_SIZE)


def test_same_actions_give_identical_frames():
    def run():
        rng = np.random.default_rng(4)
        s = env.reset(9, "push_green")
        out = []
        for _ in range(25):
            s, obs, _ = env.step(s, env.random_action(rng))
            out.append(obs.rgb.tobytes() + obs.depth.tobytes())
        return out

    assert run() == run()


def test_grasp_lifts_and_release_drops():
    s = env.reset(1, "lift_red")
    i = s.block_index("red")
    s = s.copy(gripper=s.block_pos[i].copy())
    s, _, done = env.step(s, env.Action(np.zeros(2), 1.0))
    assert s.held == i and done
    assert s.block_level[i] == env.HOLD_LEVEL
    s, _, _ = env.step(s, env.Action(np.array([0.0, 1.0]), 1.0))
    np.testing.assert_array_equal(s.block_pos[i], s.gripper)
    s, _, _ = env.step(s, env.Action(np.zeros(2), -1.0))
    assert s.held == -1 and not s.closed


def test_instruction_templates():
    assert env.instruction_for("push_red") == "push the red block to the green strip"
    assert len(env.TASKS) == 8
    assert len({env.instruction_for(t) for t in env.TASKS}) == 8
