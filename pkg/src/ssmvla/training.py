"""Training loops for the latent action model and the policy.

Both loops share: AdamW, linear warm-up then cosine decay to zero, an
append-only ``metrics.jsonl`` stream, and resumable checkpoints that carry
model, optimizer, sampler and RNG state.
"""
import dataclasses
import json
import logging
import math
import os
import time

import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import CONFIG_SCHEMA_VERSION, RunConfig
from .data import AnchorSampler, EpisodeStore, load_episodes, split_episodes
from .errors import ConfigError, SSMVLAError
from .frontend import load_backend, parameter_hash
from .lam import FarsightedLAM, LAMConfig, lam_train_step, set_feature_stats
from .objectives import RandomConvPerceptual
from .policy import PolicyConfig, SSMPolicy, VelocityNet, freeze, vla_train_step

logger = logging.getLogger(__name__)


class MissingArtifactError(SSMVLAError):
    pass


def warmup_steps(total, fraction):
    return int(round(total * fraction))


def lr_at(step, total, peak, warmup_fraction=0.05):
    """Linear warm-up to ``peak`` over the first steps, then cosine to 0 at the last step."""
    w = warmup_steps(total, warmup_fraction)
    if step < w:
        return peak * step / w
    span = total - 1 - w
    if span <= 0:
        return peak
    progress = min(max((step - w) / span, 0.0), 1.0)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


class MetricsWriter:
    """Append-only JSON-lines metrics with strictly increasing steps."""

    def __init__(self, path, resume_step=None):
        self.path = path
        self.last_step = -1
        if resume_step is None:
            open(path, "w").close()
        else:
            kept = [r for r in read_metrics(path) if r["step"] < resume_step] if os.path.exists(path) else []
            with open(path, "w") as f:
                for r in kept:
                    f.write(json.dumps(r, sort_keys=True) + "\n")
            self.last_step = kept[-1]["step"] if kept else -1

    def write(self, step, metrics):
        if step <= self.last_step:
            raise ValueError(f"metrics step {step} does not follow {self.last_step}")
        rec = {"step": int(step), "metrics": {k: float(v) for k, v in metrics.items()}, "wall": time.time()}
        with open(self.path, "a") as f:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
        self.last_step = step


def read_metrics(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def _set_lr(optimizer, lr):
    for g in optimizer.param_groups:
        g["lr"] = lr


def make_optimizer(params, train_cfg):
    return torch.optim.AdamW(params, lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)


def prepare_stores(cfg, data_dir):
    """Load episodes, split off the held-out tail and cache frozen features."""
    if not os.path.isdir(data_dir):
        raise MissingArtifactError(f"no dataset at {data_dir}")
    episodes = load_episodes(data_dir)
    if len(episodes) < 2:
        raise MissingArtifactError(f"dataset at {data_dir} has {len(episodes)} episodes; need at least 2")
    backend = load_backend(cfg.frontend)
    train, held = split_episodes(episodes, cfg.data.holdout_fraction)
    return EpisodeStore(train, backend), EpisodeStore(held, backend), backend


def _meta(cfg, kind, step, extra=None):
    meta = {"kind": kind, "step": step, "config": cfg.to_dict(), "config_hash": cfg.hash(), "schema_version": CONFIG_SCHEMA_VERSION}
    meta.update(extra or {})
    return meta


def _write_config(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    cfg.save(os.path.join(out_dir, "config.json"))


def _check_out(out_dir, resume, force):
    ckpt = os.path.join(out_dir, "checkpoint")
    if os.path.exists(ckpt) and not (resume or force):
        raise MissingArtifactError(f"{out_dir} already holds a checkpoint; use --resume or --force")
    return ckpt


# latent action model -------------------------------------------------------


def train_lam(cfg, data_dir, out_dir, resume=False, force=False, stores=None, n_future=None, stop_at=None):
    """Train the LAM; writes ``out_dir/{config.json, metrics.jsonl, checkpoint/}``.

    ``stop_at`` ends the run early at that step (for resume tests); the
    schedule still spans ``lam_train.steps``.
    """
    torch.set_num_threads(cfg.threads)
    ckpt_dir = _check_out(out_dir, resume, force)
    train_store, _, _ = stores or prepare_stores(cfg, data_dir)
    tc = cfg.lam_train
    model = FarsightedLAM(cfg.lam_config(n_future))
    model.set_feature_stats(torch.cat(train_store.features))
    opt = make_optimizer(model.parameters(), tc)
    sampler = AnchorSampler(train_store.anchors(), cfg.seed + 1)
    perceptual = RandomConvPerceptual()
    weights = cfg.loss.weights()
    start = 0
    if resume and os.path.exists(ckpt_dir):
        state, meta = load_checkpoint(ckpt_dir)
        model.load_state_dict(state["model"])
        opt.load_state_dict(state["optimizer"])
        sampler.set_state(state["sampler"])
        model.reseed_generator.set_state(state["reseed"])
        model.train_steps = start = int(meta["step"])
    _write_config(cfg, out_dir)
    metrics = MetricsWriter(os.path.join(out_dir, "metrics.jsonl"), resume_step=start if resume else None)
    end = tc.steps if stop_at is None else min(stop_at, tc.steps)
    for step in range(start, end):
        lr = lr_at(step, tc.steps, tc.lr, tc.warmup_fraction)
        _set_lr(opt, lr)
        batch = train_store.lam_batch(sampler.sample(tc.batch_size), model.cfg.n_future, model.cfg.frame_stride)
        values = lam_train_step(model, batch, opt, weights, perceptual)
        if step % tc.log_every == 0 or step == tc.steps - 1:
            metrics.write(step, dict(values, lr=lr))
        if tc.checkpoint_every and (step + 1) % tc.checkpoint_every == 0 and step + 1 < end:
            _save_lam(ckpt_dir, model, opt, sampler, cfg, step + 1)
    _save_lam(ckpt_dir, model, opt, sampler, cfg, end)
    return model


def _save_lam(path, model, opt, sampler, cfg, step):
    state = {
        "model": model.state_dict(),
        "optimizer": opt.state_dict(),
        "sampler": sampler.state(),
        "reseed": model.reseed_generator.get_state(),
    }
    save_checkpoint(path, state, _meta(cfg, "lam", step, {"lam_config": dataclasses.asdict(model.cfg)}))


def load_lam(out_dir):
    path = os.path.join(out_dir, "checkpoint")
    if not os.path.exists(path):
        raise MissingArtifactError(f"no LAM checkpoint at {path}")
    state, meta = load_checkpoint(path)
    if meta.get("kind") != "lam":
        raise MissingArtifactError(f"{path} is not a LAM checkpoint")
    model = FarsightedLAM(LAMConfig(**meta["lam_config"]))
    model.load_state_dict(state["model"])
    model.train_steps = int(meta["step"])
    return freeze(model), meta


# policy ----------------------------------------------------------------------


def build_policy(cfg):
    pcfg = cfg.policy_config()
    policy = SSMPolicy(pcfg)
    v = cfg.velocity
    velocity = VelocityNet(pcfg.action_dim, pcfg.chunk, pcfg.context_dim, v.hidden, v.layers, v.time_dim, seed=cfg.seed)
    return policy, velocity


def train_vla(cfg, data_dir, lam_dir, out_dir, resume=False, force=False, stores=None, stop_at=None):
    """Train the policy against a frozen LAM (skipped when ``lam_frames == 0``)."""
    torch.set_num_threads(cfg.threads)
    ckpt_dir = _check_out(out_dir, resume, force)
    use_latent = cfg.ablation.lam_frames > 0
    lam, lam_hash = None, None
    if use_latent:
        lam, _ = load_lam(lam_dir)
        if lam.cfg.n_future != cfg.ablation.lam_frames:
            raise ConfigError(f"LAM predicts {lam.cfg.n_future} frames but ablation.lam_frames={cfg.ablation.lam_frames}")
        lam_hash = parameter_hash(lam)
    train_store, _, _ = stores or prepare_stores(cfg, data_dir)
    tc = cfg.vla_train
    policy, velocity = build_policy(cfg)
    set_feature_stats(policy, torch.cat(train_store.features))
    opt = make_optimizer(list(policy.parameters()) + list(velocity.parameters()), tc)
    sampler = AnchorSampler(train_store.anchors(), cfg.seed + 2)
    noise = torch.Generator().manual_seed(cfg.seed + 3)
    perceptual = RandomConvPerceptual()
    weights = cfg.loss.weights()
    start = 0
    if resume and os.path.exists(ckpt_dir):
        state, meta = load_checkpoint(ckpt_dir)
        policy.load_state_dict(state["policy"])
        velocity.load_state_dict(state["velocity"])
        opt.load_state_dict(state["optimizer"])
        sampler.set_state(state["sampler"])
        noise.set_state(state["noise"])
        start = int(meta["step"])
    _write_config(cfg, out_dir)
    metrics = MetricsWriter(os.path.join(out_dir, "metrics.jsonl"), resume_step=start if resume else None)
    n_future = lam.cfg.n_future if use_latent else 0
    stride = lam.cfg.frame_stride if use_latent else 1
    end = tc.steps if stop_at is None else min(stop_at, tc.steps)
    for step in range(start, end):
        lr = lr_at(step, tc.steps, tc.lr, tc.warmup_fraction)
        _set_lr(opt, lr)
        batch = train_store.vla_batch(sampler.sample(tc.batch_size), policy.cfg.history, policy.cfg.chunk, n_future, stride)
        values = vla_train_step(
            policy, velocity, batch, opt, lam, weights, perceptual, noise,
            velocity_sign=cfg.loss.velocity_sign, use_latent=use_latent,
        )
        if step % tc.log_every == 0 or step == tc.steps - 1:
            metrics.write(step, dict(values, lr=lr))
        if tc.checkpoint_every and (step + 1) % tc.checkpoint_every == 0 and step + 1 < end:
            _save_vla(ckpt_dir, policy, velocity, opt, sampler, noise, cfg, step + 1, lam_hash)
    if use_latent and parameter_hash(lam) != lam_hash:
        raise RuntimeError("frozen LAM parameters changed during policy training")
    _save_vla(ckpt_dir, policy, velocity, opt, sampler, noise, cfg, end, lam_hash)
    return policy, velocity


def _save_vla(path, policy, velocity, opt, sampler, noise, cfg, step, lam_hash):
    state = {
        "policy": policy.state_dict(),
        "velocity": velocity.state_dict(),
        "optimizer": opt.state_dict(),
        "sampler": sampler.state(),
        "noise": noise.get_state(),
    }
    extra = {"policy_config": dataclasses.asdict(policy.cfg), "lam_hash": lam_hash}
    save_checkpoint(path, state, _meta(cfg, "vla", step, extra))


def load_vla(out_dir):
    path = os.path.join(out_dir, "checkpoint")
    if not os.path.exists(path):
        raise MissingArtifactError(f"no policy checkpoint at {path}")
    state, meta = load_checkpoint(path)
    if meta.get("kind") != "vla":
        raise MissingArtifactError(f"{path} is not a policy checkpoint")
    cfg = RunConfig.from_dict(meta["config"])
    pcfg = PolicyConfig(**meta["policy_config"])
    policy = SSMPolicy(pcfg)
    v = cfg.velocity
    velocity = VelocityNet(pcfg.action_dim, pcfg.chunk, pcfg.context_dim, v.hidden, v.layers, v.time_dim, seed=cfg.seed)
    policy.load_state_dict(state["policy"])
    velocity.load_state_dict(state["velocity"])
    return freeze(policy), freeze(velocity), meta
