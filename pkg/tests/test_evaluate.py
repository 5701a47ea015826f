import json

import numpy as np
import pytest

from ssmvla import env
from ssmvla.errors import MalformedContainerError, SchemaVersionError
from ssmvla.evaluate import (
    REPORT_SCHEMA,
    RandomRunner,
    chain_eval,
    load_report,
    save_report,
    single_task_success,
)
from ssmvla.expert import scripted_expert


class ExpertRunner:
    def rollout(self, state, horizon, index=0, keep_frames=False):
        from ssmvla.evaluate import RolloutResult

        for t in range(horizon):
            state, _, done = env.step(state, scripted_expert(state))
            if done:
                return RolloutResult(True, t + 1, state)
        return RolloutResult(False, horizon, state)


class FlakyRunner(ExpertRunner):
    """Expert that gives up on every third call."""

    def rollout(self, state, horizon, index=0, keep_frames=False):
        if index % 3 == 2:
            return RandomRunner(index).rollout(state, 0, index)
        return super().rollout(state, horizon, index)


def test_random_policy_is_weak():
    rate, per_task = single_task_success(RandomRunner(0), 40)
    assert rate < 0.05 and set(per_task) == set(env.TASKS)
    per_pos, avg = chain_eval(RandomRunner(0), 40)
    assert avg < 0.2


def test_expert_policy_succeeds():
    rate, _ = single_task_success(ExpertRunner(), 16)
    assert rate == 1.0
    per_pos, avg = chain_eval(ExpertRunner(), 8)
    assert per_pos == [1.0] * 5 and avg == 5.0


def test_per_position_success_non_increasing():
    per_pos, avg = chain_eval(FlakyRunner(), 12)
    assert all(a >= b for a, b in zip(per_pos, per_pos[1:]))
    assert avg == pytest.approx(sum(per_pos))


def test_evaluation_is_deterministic():
    assert chain_eval(RandomRunner(1), 10) == chain_eval(RandomRunner(1), 10)


def test_report_round_trip(tmp_path):
    rep = {"schema_version": REPORT_SCHEMA, "chains": {"per_position": [0.5, 0.25, 0, 0, 0], "avg_len": 0.75}}
    save_report(rep, tmp_path / "r.json")
    assert load_report(tmp_path / "r.json") == rep


def test_report_validation(tmp_path):
    p = tmp_path / "r.json"
    p.write_text("{")
    with pytest.raises(MalformedContainerError):
        load_report(p)
    p.write_text(json.dumps({"a": 1}))
    with pytest.raises(MalformedContainerError):
        load_report(p)
    p.write_text(json.dumps({"schema_version": 99}))
    with pytest.raises(SchemaVersionError):
        load_report(p)
