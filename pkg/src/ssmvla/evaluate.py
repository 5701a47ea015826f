"""Evaluation: rollouts, the five-task chain protocol and model metrics."""
import json
import logging
import math
import os
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import torch

from . import env
from .data import tokenize
from .episodes import expert_solves_chain, sample_chain
from .errors import MalformedContainerError, SchemaVersionError
from .objectives import perplexity
from .policy import act, infer_latents

logger = logging.getLogger(__name__)

REPORT_SCHEMA = 1
CHAIN_LENGTH = 5
# evaluation layouts come from a seed range disjoint from data generation
SINGLE_SEED_BASE = 2_000_000_000
CHAIN_SEED_BASE = 3_000_000_000


@dataclass
class RolloutResult:
    success: bool
    steps: int
    state: env.EnvState
    frames: list = field(default_factory=list)


class PolicyRunner:
    """Closed-loop execution of a trained policy with open-loop action chunks."""

    def __init__(self, policy, velocity, backend, fm_steps=10, execute_steps=8, velocity_sign=1.0, seed=0):
        self.policy, self.velocity, self.backend = policy, velocity, backend
        self.fm_steps, self.execute_steps = fm_steps, execute_steps
        self.velocity_sign, self.seed = velocity_sign, seed

    def _features(self, obs):
        return self.backend.extract_batch(torch.from_numpy(obs.rgb)[None])[0]

    def rollout(self, state, horizon, index=0, keep_frames=False):
        gen = torch.Generator().manual_seed(self.seed * 1_000_003 + index)
        obs = env.render(state)
        hist = deque([self._features(obs)] * (self.policy.cfg.history + 1), maxlen=self.policy.cfg.history + 1)
        tokens = torch.tensor([tokenize(env.instruction_for(state.task_id))])
        frames = [obs] if keep_frames else []
        t = 0
        while t < horizon:
            chunk, _ = act(
                torch.stack(list(hist))[None], tokens,
                torch.from_numpy(obs.rgb)[None], torch.from_numpy(obs.depth)[None],
                self.policy, self.velocity, self.fm_steps, gen, self.velocity_sign,
            )
            for a in chunk[0, : self.execute_steps].numpy():
                state, obs, done = env.step(state, env.Action.from_array(a.astype(np.float64)))
                t += 1
                hist.append(self._features(obs))
                if keep_frames:
                    frames.append(obs)
                if done:
                    return RolloutResult(True, t, state, frames)
                if t >= horizon:
                    break
        return RolloutResult(False, t, state, frames)


class RandomRunner:
    def __init__(self, seed=0):
        self.seed = seed

    def rollout(self, state, horizon, index=0, keep_frames=False):
        rng = np.random.default_rng([self.seed, index])
        for t in range(horizon):
            state, _, done = env.step(state, env.random_action(rng))
            if done:
                return RolloutResult(True, t + 1, state)
        return RolloutResult(False, horizon, state)


def single_task_success(runner, n_rollouts, horizon=64, seed=0):
    """Success rate over ``n_rollouts`` fresh layouts, cycling through all tasks."""
    tasks = sorted(env.TASKS)
    per_task = {t: [0, 0] for t in tasks}
    wins = 0
    for i in range(n_rollouts):
        task = tasks[i % len(tasks)]
        state = env.reset(SINGLE_SEED_BASE + seed * 100_000 + i, task)
        ok = runner.rollout(state, horizon, index=i).success
        wins += ok
        per_task[task][0] += ok
        per_task[task][1] += 1
    rate = wins / n_rollouts if n_rollouts else 0.0
    return rate, {t: (s / n if n else 0.0) for t, (s, n) in per_task.items()}


def eval_chains(n_chains, horizon=64, seed=0):
    """The first ``n_chains`` seeded chains that the scripted expert can finish."""
    chains, k = [], 0
    while len(chains) < n_chains:
        rng = np.random.default_rng([seed, k, 5])
        chain = sample_chain(rng, env_seed=CHAIN_SEED_BASE + seed * 100_000 + k)
        k += 1
        if expert_solves_chain(chain, horizon):
            chains.append(chain)
    return chains


def chain_eval(runner, n_chains, horizon=64, seed=0):
    """Five-task chains; returns per-position success rates and mean completed length."""
    completed = np.zeros(CHAIN_LENGTH)
    lengths = []
    for c, chain in enumerate(eval_chains(n_chains, horizon, seed)):
        state = env.reset(chain.env_seed, chain.subtasks[0])
        done_count = 0
        for pos, task in enumerate(chain.subtasks):
            state = env.set_task(state, task)
            if not env.task_done(state):
                res = runner.rollout(state, horizon, index=c * CHAIN_LENGTH + pos)
                state = res.state
                if not res.success:
                    break
            done_count += 1
            completed[pos] += 1
        lengths.append(done_count)
    per_pos = (completed / n_chains).tolist() if n_chains else [0.0] * CHAIN_LENGTH
    avg = float(np.mean(lengths)) if lengths else 0.0
    return per_pos, avg


@torch.no_grad()
def lam_metrics(lam, store, batch_size=64):
    """Held-out reconstruction PSNR (all horizons) vs the copy-current-frame baseline, plus code perplexity."""
    lam.eval()
    lam.codebook.reset_usage()
    anchors = store.anchors()
    se_model = se_copy = count = 0.0
    for i in range(0, len(anchors), batch_size):
        b = store.lam_batch(anchors[i : i + batch_size], lam.cfg.n_future, lam.cfg.frame_stride)
        out = lam(b["features"], b["rgb"][:, 0], b["depth"][:, 0])
        gt = b["rgb"][:, 1:].double()
        se_model += float(((out["rgb"].clamp(0, 1).double() - gt) ** 2).sum())
        se_copy += float(((b["rgb"][:, :1].double() - gt) ** 2).sum())
        count += gt.numel()
    mse_m, mse_c = se_model / count, se_copy / count
    psnr_m = 10 * math.log10(1 / mse_m) if mse_m > 0 else float("inf")
    psnr_c = 10 * math.log10(1 / mse_c) if mse_c > 0 else float("inf")
    return {
        "psnr": psnr_m,
        "copy_psnr": psnr_c,
        "psnr_gain": psnr_m - psnr_c,
        "perplexity": perplexity(lam.codebook.usage_counts.numpy()),
        "codes_used": int((lam.codebook.usage_counts > 0).sum()),
    }


@torch.no_grad()
def latent_agreement(policy, lam, store, batch_size=64):
    """Top-1 agreement between policy argmax codes and frozen-LAM codes on held-out anchors."""
    policy.eval()
    anchors = store.anchors()
    hits = total = 0
    for i in range(0, len(anchors), batch_size):
        b = store.vla_batch(anchors[i : i + batch_size], policy.cfg.history, policy.cfg.chunk, lam.cfg.n_future, lam.cfg.frame_stride)
        target = lam.latent_indices(b["lam_features"])
        out = policy(b["history_features"], b["tokens"], b["current_rgb"], b["current_depth"])
        hits += int((infer_latents(out) == target).sum())
        total += target.numel()
    return hits / total if total else 0.0


def save_report(report, path):
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)


def load_report(path):
    try:
        with open(path) as f:
            report = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise MalformedContainerError(f"{path} is not a valid report") from e
    if not isinstance(report, dict) or "schema_version" not in report:
        raise MalformedContainerError(f"{path} lacks a schema version")
    if report["schema_version"] != REPORT_SCHEMA:
        raise SchemaVersionError(f"report schema {report['schema_version']}, expected {REPORT_SCHEMA}")
    return report


def evaluate(cfg, policy, velocity, backend, lam=None, held_store=None, include_random=True):
    """Full evaluation report as a JSON-ready dict."""
    e = cfg.eval
    runner = PolicyRunner(policy, velocity, backend, e.fm_steps, e.execute_steps, cfg.loss.velocity_sign, seed=e.seed)
    rate, per_task = single_task_success(runner, e.rollouts, e.horizon, e.seed)
    per_pos, avg_len = chain_eval(runner, e.chains, e.horizon, e.seed)
    report = {
        "schema_version": REPORT_SCHEMA,
        "config_hash": cfg.hash(),
        "ablation": {"lam_frames": cfg.ablation.lam_frames, "attention": cfg.ablation.attention, "depth": cfg.ablation.depth},
        "seed": cfg.seed,
        "single_task": {"rollouts": e.rollouts, "success_rate": rate, "per_task": per_task},
        "chains": {"count": e.chains, "per_position": per_pos, "avg_len": avg_len},
    }
    if include_random:
        rnd = RandomRunner(seed=e.seed)
        r_rate, _ = single_task_success(rnd, e.rollouts, e.horizon, e.seed)
        _, r_len = chain_eval(rnd, e.chains, e.horizon, e.seed)
        report["single_task"]["random_success_rate"] = r_rate
        report["chains"]["random_avg_len"] = r_len
    if lam is not None and held_store is not None and len(held_store):
        report["lam"] = lam_metrics(lam, held_store)
        report["latent_agreement"] = latent_agreement(policy, lam, held_store)
        report["latent_chance"] = 1.0 / lam.cfg.codebook_size
    return report
