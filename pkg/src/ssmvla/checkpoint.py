"""Checkpoints: a directory of raw tensor files plus a JSON manifest.

Arbitrary nested state (model/optimizer state dicts, RNG states, counters)
is flattened: every tensor becomes ``tensors/<n>.bin`` and the manifest
tree stores ``{"__tensor__": n}`` in its place.
"""
import hashlib
import json
import os
import shutil

import numpy as np
import torch

from .errors import MalformedContainerError, SchemaVersionError
from .tensorio import read_tensor, write_tensor

CHECKPOINT_SCHEMA = 1
MANIFEST = "manifest.json"


def _flatten(obj, tensors):
    if isinstance(obj, torch.Tensor):
        name = str(len(tensors))
        tensors[name] = obj
        return {"__tensor__": name}
    if isinstance(obj, dict):
        # keys may be ints (optimizer state); keep their type
        return {"__dict__": [[_flatten(k, tensors), _flatten(v, tensors)] for k, v in obj.items()]}
    if isinstance(obj, tuple):
        return {"__tuple__": [_flatten(v, tensors) for v in obj]}
    if isinstance(obj, list):
        return [_flatten(v, tensors) for v in obj]
    if obj is None or isinstance(obj, (bool, int, float, str)):
        return obj
    raise TypeError(f"cannot checkpoint object of type {type(obj).__name__}")


def _unflatten(tree, tensors):
    if isinstance(tree, dict):
        if "__tensor__" in tree:
            return tensors[tree["__tensor__"]]
        if "__dict__" in tree:
            return {_unflatten(k, tensors): _unflatten(v, tensors) for k, v in tree["__dict__"]}
        if "__tuple__" in tree:
            return tuple(_unflatten(v, tensors) for v in tree["__tuple__"])
        raise MalformedContainerError(f"unexpected manifest node keys {sorted(tree)}")
    if isinstance(tree, list):
        return [_unflatten(v, tensors) for v in tree]
    return tree


def _sha(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def save_checkpoint(path, state, meta=None):
    """Atomically write ``state`` (nested dict with tensors) to directory ``path``."""
    path = os.fspath(path).rstrip("/")
    tmp = path + ".tmp"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(os.path.join(tmp, "tensors"))
    tensors = {}
    tree = _flatten(state, tensors)
    files = {}
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy()
        fpath = os.path.join(tmp, "tensors", f"{name}.bin")
        write_tensor(fpath, arr)
        files[name] = _sha(fpath)
    manifest = {"schema_version": CHECKPOINT_SCHEMA, "meta": meta or {}, "state": tree, "files": files}
    with open(os.path.join(tmp, MANIFEST), "w") as f:
        json.dump(manifest, f, sort_keys=True)
    if os.path.exists(path):
        shutil.rmtree(path)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns ``(state, meta)``; verifies every tensor file against its hash."""
    mpath = os.path.join(path, MANIFEST)
    try:
        with open(mpath) as f:
            manifest = json.load(f)
    except FileNotFoundError as e:
        raise FileNotFoundError(f"no checkpoint at {path}") from e
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise MalformedContainerError(f"{mpath} is not valid JSON") from e
    if manifest.get("schema_version") != CHECKPOINT_SCHEMA:
        raise SchemaVersionError(f"checkpoint schema {manifest.get('schema_version')!r}, expected {CHECKPOINT_SCHEMA}")
    tensors = {}
    for name, digest in manifest["files"].items():
        fpath = os.path.join(path, "tensors", f"{name}.bin")
        if not os.path.exists(fpath):
            raise MalformedContainerError(f"checkpoint tensor {fpath} missing")
        if _sha(fpath) != digest:
            raise MalformedContainerError(f"checkpoint tensor {fpath} is corrupted")
        tensors[name] = torch.from_numpy(np.array(read_tensor(fpath)))
    return _unflatten(manifest["state"], tensors), manifest["meta"]
