"""Episode containers: generation, on-disk format and replay.

An episode directory holds::

    meta.json    instruction, seed, task_id, chain prefix, schema version, digest
    rgb.bin      L x H x W x 3 float32
    depth.bin    L x H x W float32
    actions.bin  (L-1) x 3 float32

``digest`` is a sha256 over the canonical meta fields and the three tensor
files, so any corruption is reported instead of silently misread.
"""
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import env
from .errors import InfeasibleTaskError, MalformedContainerError, SchemaVersionError, SSMVLAError
from .expert import scripted_expert
from .tensorio import decode_tensor, encode_tensor

SCHEMA_VERSION = 1
TENSOR_FILES = ("rgb.bin", "depth.bin", "actions.bin")
CHAIN_LENGTH = 5


@dataclass(eq=False)
class Episode:
    instruction: str
    rgb: np.ndarray  # L x H x W x 3
    depth: np.ndarray  # L x H x W
    actions: np.ndarray  # (L-1) x 3
    seed: int
    task_id: str
    chain_prefix: tuple = ()
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rgb = np.ascontiguousarray(self.rgb, dtype=np.float32)
        self.depth = np.ascontiguousarray(self.depth, dtype=np.float32)
        self.actions = np.ascontiguousarray(self.actions, dtype=np.float32).reshape(-1, env.ACTION_DIM)
        self.chain_prefix = tuple(self.chain_prefix)
        self.validate()

    def validate(self):
        n = self.rgb.shape[0]
        if n < 2:
            raise MalformedContainerError(f"episode needs at least 2 observations, got {n}")
        if self.rgb.ndim != 4 or self.rgb.shape[-1] != 3:
            raise MalformedContainerError(f"rgb must be L x H x W x 3, got {self.rgb.shape}")
        if self.depth.shape != self.rgb.shape[:3]:
            raise MalformedContainerError(f"depth shape {self.depth.shape} does not match rgb {self.rgb.shape}")
        if self.actions.shape[0] != n - 1:
            raise MalformedContainerError(f"{self.actions.shape[0]} actions for {n} observations")

    def __len__(self):
        return self.rgb.shape[0]

    @property
    def observations(self):
        return [env.Observation(self.rgb[i], self.depth[i], i) for i in range(len(self))]

    def action_list(self):
        return [env.Action.from_array(a) for a in self.actions]

    def __eq__(self, other):
        if not isinstance(other, Episode):
            return NotImplemented
        return (
            self.instruction == other.instruction
            and self.seed == other.seed
            and self.task_id == other.task_id
            and self.chain_prefix == other.chain_prefix
            and all(
                a.shape == b.shape and a.tobytes() == b.tobytes()
                for a, b in ((self.rgb, other.rgb), (self.depth, other.depth), (self.actions, other.actions))
            )
        )


@dataclass(frozen=True)
class TaskChain:
    subtasks: tuple
    env_seed: int

    def __post_init__(self):
        if len(self.subtasks) != CHAIN_LENGTH:
            raise ValueError(f"a chain has {CHAIN_LENGTH} subtasks, got {len(self.subtasks)}")
        for t in self.subtasks:
            env._task(t)


def sample_chain(rng, env_seed):
    tasks = sorted(env.TASKS)
    picks = rng.choice(len(tasks), CHAIN_LENGTH, replace=False)
    return TaskChain(tuple(tasks[i] for i in picks), int(env_seed))


def _meta_fields(ep):
    return {
        "schema_version": SCHEMA_VERSION,
        "instruction": ep.instruction,
        "seed": int(ep.seed),
        "task_id": ep.task_id,
        "chain_prefix": list(ep.chain_prefix),
        "length": len(ep),
        "extra": ep.extra,
    }


def _digest(meta, blobs):
    h = hashlib.sha256(json.dumps(meta, sort_keys=True).encode())
    for b in blobs:
        h.update(hashlib.sha256(b).digest())
    return h.hexdigest()


def write_episode(ep, path):
    os.makedirs(path, exist_ok=True)
    blobs = [encode_tensor(ep.rgb), encode_tensor(ep.depth), encode_tensor(ep.actions)]
    for name, blob in zip(TENSOR_FILES, blobs):
        with open(os.path.join(path, name), "wb") as f:
            f.write(blob)
    meta = _meta_fields(ep)
    meta["digest"] = _digest(meta, blobs)
    tmp = os.path.join(path, "meta.json.tmp")
    with open(tmp, "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
    os.replace(tmp, os.path.join(path, "meta.json"))


def read_episode(path):
    try:
        with open(os.path.join(path, "meta.json"), "rb") as f:
            meta = json.loads(f.read().decode("utf-8"))
    except FileNotFoundError as e:
        raise MalformedContainerError(f"{path}: missing meta.json") from e
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedContainerError(f"{path}: meta.json is not valid JSON: {e}") from e
    if not isinstance(meta, dict):
        raise MalformedContainerError(f"{path}: meta.json is not an object")
    version = meta.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"{path}: episode schema version {version!r}, expected {SCHEMA_VERSION}")
    blobs = []
    for name in TENSOR_FILES:
        try:
            with open(os.path.join(path, name), "rb") as f:
                blobs.append(f.read())
        except FileNotFoundError as e:
            raise MalformedContainerError(f"{path}: missing {name}") from e
    digest = meta.pop("digest", None)
    try:
        expected = _digest(meta, blobs)
    except (TypeError, ValueError) as e:
        raise MalformedContainerError(f"{path}: meta fields not serializable: {e}") from e
    if digest != expected:
        raise MalformedContainerError(f"{path}: digest mismatch (corrupted or truncated files)")
    try:
        rgb, depth, actions = (decode_tensor(b) for b in blobs)
        return Episode(
            instruction=str(meta["instruction"]),
            rgb=rgb,
            depth=depth,
            actions=actions,
            seed=int(meta["seed"]),
            task_id=str(meta["task_id"]),
            chain_prefix=tuple(meta.get("chain_prefix", ())),
            extra=dict(meta.get("extra", {})),
        )
    except SSMVLAError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedContainerError(f"{path}: malformed episode: {e}") from e


def _quantized(action):
    # episodes store float32 actions; stepping with the rounded action keeps replay exact
    return env.Action.from_array(action.to_array().astype(np.float32))


def run_task(state, horizon, policy=scripted_expert):
    """Roll ``policy`` on the current task; returns (states, actions, success).

    An expert that declares the task infeasible counts as a failure.
    """
    states, actions = [state], []
    if env.task_done(state):
        return states, actions, True
    for _ in range(horizon):
        try:
            a = _quantized(policy(state))
        except InfeasibleTaskError:
            return states, actions, False
        state, _, done = env.step(state, a)
        states.append(state)
        actions.append(a)
        if done:
            return states, actions, True
    return states, actions, False


def episode_from_states(states, actions, seed, task_id, prefix=()):
    obs = [env.render(s) for s in states]
    return Episode(
        instruction=env.instruction_for(task_id),
        rgb=np.stack([o.rgb for o in obs]),
        depth=np.stack([o.depth for o in obs]),
        actions=np.stack([a.to_array() for a in actions]) if actions else np.zeros((0, 3)),
        seed=seed,
        task_id=task_id,
        chain_prefix=prefix,
    )


def expert_solves_chain(chain, horizon=64):
    """True when the scripted expert completes every subtask of ``chain`` in turn."""
    state = env.reset(chain.env_seed, chain.subtasks[0])
    for task in chain.subtasks:
        states, _, ok = run_task(env.set_task(state, task), horizon)
        if not ok:
            return False
        state = states[-1]
    return True


def chain_episode_at(chain, pos, horizon=64):
    """Expert demonstration of subtask ``pos`` of ``chain``, after the expert ran the earlier ones.

    Returns None when a prefix subtask fails or the target subtask needs no motion.
    """
    state = env.reset(chain.env_seed, chain.subtasks[0])
    for task in chain.subtasks[:pos]:
        states, _, ok = run_task(env.set_task(state, task), horizon)
        if not ok:
            return None
        state = states[-1]
    task = chain.subtasks[pos]
    states, actions, ok = run_task(env.set_task(state, task), horizon)
    if not ok or not actions:
        return None
    return episode_from_states(states, actions, chain.env_seed, task, chain.subtasks[:pos])


def replay_episode(seed, task_id, prefix=(), horizon=64):
    """Regenerate an expert episode from its seed, task and chain prefix."""
    state = env.reset(seed, prefix[0] if prefix else task_id)
    for task in prefix:
        state = env.set_task(state, task)
        states, _, ok = run_task(state, horizon)
        if not ok:
            raise MalformedContainerError(f"prefix task {task} fails under replay")
        state = states[-1]
    state = env.set_task(state, task_id)
    states, actions, _ = run_task(state, horizon)
    return episode_from_states(states, actions, seed, task_id, prefix)
