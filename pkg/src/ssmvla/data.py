"""Dataset generation and in-memory sampling for LAM and policy training."""
import hashlib
import json
import logging
import os
import shutil

import numpy as np
import torch

from . import env
from .episodes import (
    SCHEMA_VERSION,
    CHAIN_LENGTH,
    chain_episode_at,
    read_episode,
    sample_chain,
    write_episode,
)
from .errors import MalformedContainerError, SchemaVersionError, SSMVLAError
from .objectives import align_depth

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
PAD, UNK = "<pad>", "<unk>"


class DataDirError(SSMVLAError):
    pass


def _build_vocab():
    words = set()
    for verb, color in env.TASKS.values():
        words.update(env.INSTRUCTIONS[verb].format(color=color).split())
    for color in env.COLORS:
        words.add(color)
    return [PAD, UNK] + sorted(words)


VOCAB = _build_vocab()
_WORD_ID = {w: i for i, w in enumerate(VOCAB)}
MAX_TOKENS = max(len(env.instruction_for(t).split()) for t in env.TASKS)


def tokenize(instruction, length=MAX_TOKENS):
    words = instruction.lower().split()
    if not words:
        raise ValueError("instruction must be non-empty")
    ids = [_WORD_ID.get(w, 1) for w in words][:length]
    return ids + [0] * (length - len(ids))


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _episode_hash(path):
    with open(os.path.join(path, "meta.json")) as f:
        return json.load(f)["digest"]


def gen_data(out_dir, n_episodes, seed=0, horizon=64, no_depth_fraction=0.0, force=False, config_hash=""):
    """Write ``n_episodes`` expert episodes and a manifest under ``out_dir``.

    Every episode has its own layout: a task chain is sampled, the expert
    silently runs a random-length prefix of it and the next subtask is
    recorded. Re-running with identical arguments on a valid directory is
    a no-op; a corrupted or mismatching directory is refused unless ``force``.
    """
    request = {
        "n_episodes": int(n_episodes),
        "seed": int(seed),
        "horizon": int(horizon),
        "no_depth_fraction": float(no_depth_fraction),
    }
    if os.path.isdir(out_dir) and os.listdir(out_dir):
        if not force:
            try:
                manifest = verify_data_dir(out_dir)
            except SSMVLAError as e:
                raise DataDirError(f"{out_dir} exists but is not a valid dataset ({e}); rerun with --force") from e
            if manifest.get("request") == request:
                logger.info("dataset at %s already matches the request", out_dir)
                return manifest
            raise DataDirError(f"{out_dir} holds a different dataset; rerun with --force to overwrite")
        shutil.rmtree(out_dir)
    os.makedirs(os.path.join(out_dir, "episodes"), exist_ok=True)

    entries = []
    chain_no = 0
    depth_rng = np.random.default_rng([int(seed), 77])
    while len(entries) < n_episodes:
        rng = np.random.default_rng([int(seed), chain_no])
        chain = sample_chain(rng, env_seed=int(seed) * 1_000_003 + chain_no)
        ep = chain_episode_at(chain, int(rng.integers(CHAIN_LENGTH)), horizon)
        chain_no += 1
        if ep is not None:
            ep.extra["chain"] = chain_no - 1
            ep.extra["depth_available"] = bool(depth_rng.random() >= no_depth_fraction)
            name = f"ep_{len(entries):05d}"
            path = os.path.join(out_dir, "episodes", name)
            write_episode(ep, path)
            entries.append(
                {"dir": f"episodes/{name}", "task_id": ep.task_id, "seed": ep.seed, "length": len(ep), "digest": _episode_hash(path)}
            )
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "request": request,
        "count": len(entries),
        "chains": chain_no,
        "config_hash": config_hash,
        "episodes": entries,
    }
    with open(os.path.join(out_dir, MANIFEST), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


def load_manifest(data_dir):
    path = os.path.join(data_dir, MANIFEST)
    try:
        with open(path) as f:
            manifest = json.load(f)
    except FileNotFoundError as e:
        raise DataDirError(f"no {MANIFEST} in {data_dir}") from e
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise MalformedContainerError(f"{path} is not valid JSON") from e
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionError(f"dataset schema {manifest.get('schema_version')!r}, expected {SCHEMA_VERSION}")
    return manifest


def verify_data_dir(data_dir):
    manifest = load_manifest(data_dir)
    for e in manifest["episodes"]:
        path = os.path.join(data_dir, e["dir"])
        try:
            digest = _episode_hash(path)
        except (OSError, KeyError, json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise MalformedContainerError(f"{path}: unreadable meta") from exc
        if digest != e["digest"]:
            raise MalformedContainerError(f"{path}: digest differs from manifest")
    return manifest


def manifest_hash(data_dir):
    return file_sha256(os.path.join(data_dir, MANIFEST))


def load_episodes(data_dir):
    manifest = load_manifest(data_dir)
    return [read_episode(os.path.join(data_dir, e["dir"])) for e in manifest["episodes"]]


def split_episodes(episodes, holdout_fraction=0.1):
    n_hold = max(1, int(round(len(episodes) * holdout_fraction))) if len(episodes) > 1 else 0
    return episodes[: len(episodes) - n_hold], episodes[len(episodes) - n_hold :]


def synthetic_mono_depth(depth, seed, n_sparse=32, noise=0.002):
    """Simulate a relative monocular estimate plus sparse metric samples.

    The relative map is an unknown affine transform of the true depth; the
    sparse samples are noisy metric depths at random pixels. Returns
    ``(pseudo_target, fit)`` from the closed-form alignment.
    """
    rng = np.random.default_rng(seed)
    d = np.asarray(depth, dtype=np.float64)
    scale, shift = rng.uniform(0.5, 2.0), rng.uniform(-1.0, 1.0)
    mono = scale * d + shift
    flat = rng.choice(d.size, size=min(n_sparse, d.size), replace=False)
    sparse = d.ravel()[flat] + rng.normal(0.0, noise, size=flat.size)
    fit = align_depth(mono.ravel()[flat], sparse)
    return fit.apply(mono).astype(np.float32), fit


class EpisodeStore:
    """Episodes held in memory as tensors, with cached frozen features."""

    def __init__(self, episodes, backend=None):
        self.episodes = list(episodes)
        self.rgb = [torch.from_numpy(ep.rgb) for ep in self.episodes]
        self.depth = [torch.from_numpy(ep.depth) for ep in self.episodes]
        self.actions = [torch.from_numpy(ep.actions) for ep in self.episodes]
        self.tokens = [torch.tensor(tokenize(ep.instruction)) for ep in self.episodes]
        self.depth_ok = [bool(ep.extra.get("depth_available", True)) for ep in self.episodes]
        self.features = None
        if backend is not None:
            self.compute_features(backend)

    def compute_features(self, backend, chunk=256):
        feats = []
        for rgb in self.rgb:
            parts = [backend.extract_batch(rgb[i : i + chunk]) for i in range(0, rgb.shape[0], chunk)]
            feats.append(torch.cat(parts))
        self.features = feats

    def __len__(self):
        return len(self.episodes)

    def anchors(self):
        """All (episode, t) pairs with at least one future frame."""
        return [(e, t) for e in range(len(self)) for t in range(len(self.episodes[e]) - 1)]

    @staticmethod
    def _clamp(idx, n):
        return [min(max(i, 0), n - 1) for i in idx]

    def clip_indices(self, e, t, n_future, stride):
        return self._clamp([t + k * stride for k in range(n_future + 1)], len(self.episodes[e]))

    def lam_batch(self, anchors, n_future, stride):
        feats, rgb, depth = [], [], []
        for e, t in anchors:
            idx = self.clip_indices(e, t, n_future, stride)
            feats.append(self.features[e][idx])
            rgb.append(self.rgb[e][idx])
            depth.append(self.depth[e][idx])
        return {"features": torch.stack(feats), "rgb": torch.stack(rgb), "depth": torch.stack(depth)}

    def action_chunk(self, e, t, chunk):
        acts = self.actions[e]
        out = acts[t : t + chunk]
        if out.shape[0] < chunk:
            idle = torch.zeros(chunk - out.shape[0], acts.shape[1])
            idle[:, 2] = acts[-1, 2]
            out = torch.cat([out, idle])
        return out

    def next_depth_target(self, e, t):
        if self.depth_ok[e]:
            return self.depth[e][t + 1]
        target, _ = synthetic_mono_depth(self.depth[e][t + 1].numpy(), seed=[self.episodes[e].seed, e, t])
        return torch.from_numpy(target)

    def vla_batch(self, anchors, history, chunk, n_future=0, stride=1):
        hist, hist_rgb, nxt_rgb, nxt_depth, actions, tokens, lam_feats = [], [], [], [], [], [], []
        for e, t in anchors:
            n = len(self.episodes[e])
            h_idx = self._clamp(range(t - history, t + 1), n)
            hist.append(self.features[e][h_idx])
            hist_rgb.append(self.rgb[e][t])
            nxt_rgb.append(self.rgb[e][t + 1])
            nxt_depth.append(self.next_depth_target(e, t))
            actions.append(self.action_chunk(e, t, chunk))
            tokens.append(self.tokens[e])
            if n_future:
                lam_feats.append(self.features[e][self.clip_indices(e, t, n_future, stride)])
        batch = {
            "history_features": torch.stack(hist),
            "current_rgb": torch.stack(hist_rgb),
            "current_depth": torch.stack([self.depth[e][t] for e, t in anchors]),
            "next_rgb": torch.stack(nxt_rgb),
            "next_depth": torch.stack(nxt_depth),
            "actions": torch.stack(actions),
            "tokens": torch.stack(tokens),
        }
        if n_future:
            batch["lam_features"] = torch.stack(lam_feats)
        return batch


class AnchorSampler:
    """Seeded uniform sampling of (episode, t) anchors with replacement."""

    def __init__(self, anchors, seed):
        self.anchors = list(anchors)
        self.generator = torch.Generator().manual_seed(int(seed))

    def sample(self, batch_size):
        idx = torch.randint(0, len(self.anchors), (batch_size,), generator=self.generator)
        return [self.anchors[i] for i in idx.tolist()]

    def state(self):
        return self.generator.get_state()

    def set_state(self, state):
        self.generator.set_state(state)
