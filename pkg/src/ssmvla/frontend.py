"""Frozen visual feature extraction producing patch tokens from RGB frames.

Two backends are available:

``fixed-random``
    A seed-fixed, bias-free two-layer convolutional patch embedder. Its
    weights never train; it stands in for a pretrained foundation encoder.
``external-file``
    Precomputed per-frame features loaded from disk and looked up by a hash
    of the frame pixels, so features from any external encoder can be
    injected without code changes.
"""
import hashlib
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeMismatchError
from .tensorio import read_tensor, write_tensor

DEFAULT_BACKEND = {"name": "fixed-random", "seed": 7, "patch": 8, "dim": 64, "hidden": 32}


@dataclass(frozen=True)
class PatchFeatures:
    tokens: torch.Tensor  # P x D_v
    grid: tuple  # (rows, cols)

    def __post_init__(self):
        rows, cols = self.grid
        if self.tokens.shape[0] != rows * cols:
            raise ShapeMismatchError(f"{self.tokens.shape[0]} tokens for grid {self.grid}")


def _check_rgb(rgb, patch):
    if rgb.ndim not in (3, 4) or rgb.shape[-1] != 3:
        raise ShapeMismatchError(f"expected ... x H x W x 3 rgb, got {tuple(rgb.shape)}")
    h, w = rgb.shape[-3], rgb.shape[-2]
    if h % patch or w % patch:
        raise ShapeMismatchError(f"image {h}x{w} not divisible by patch size {patch}")


class FixedRandomBackend(nn.Module):
    name = "fixed-random"

    def __init__(self, seed=7, patch=8, dim=64, hidden=32):
        super().__init__()
        if patch % 2:
            raise ConfigError("patch size must be even")
        self.patch, self.dim, self.seed = patch, dim, seed
        g = torch.Generator().manual_seed(int(seed))
        self.conv1 = nn.Conv2d(3, hidden, patch // 2, stride=patch // 2, bias=False)
        self.conv2 = nn.Conv2d(hidden, dim, 2, stride=2, bias=False)
        with torch.no_grad():
            for conv in (self.conv1, self.conv2):
                fan_in = conv.weight[0].numel()
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * (2.0 / fan_in) ** 0.5)
        self.requires_grad_(False)
        self.eval()

    def train(self, mode=True):
        # frozen: always stays in eval mode
        return super().train(False)

    def grid_for(self, h, w):
        return (h // self.patch, w // self.patch)

    def _forward(self, rgb):
        x = rgb.permute(0, 3, 1, 2)
        x = F.gelu(self.conv1(x))
        x = self.conv2(x)
        return x.flatten(2).transpose(1, 2)  # B x P x D

    def extract_batch(self, rgb, requires_grad=False):
        """``rgb``: B x H x W x 3 in [0, 1] -> B x P x D_v tokens."""
        rgb = torch.as_tensor(rgb, dtype=torch.float32)
        _check_rgb(rgb, self.patch)
        if rgb.ndim == 3:
            rgb = rgb[None]
        if requires_grad:
            return self._forward(rgb)
        with torch.no_grad():
            return self._forward(rgb)

    def extract(self, rgb, requires_grad=False):
        rgb = torch.as_tensor(rgb, dtype=torch.float32)
        if rgb.ndim != 3:
            raise ShapeMismatchError(f"extract takes one H x W x 3 frame, got {tuple(rgb.shape)}")
        tokens = self.extract_batch(rgb[None], requires_grad=requires_grad)[0]
        return PatchFeatures(tokens, self.grid_for(rgb.shape[0], rgb.shape[1]))

    def weights_hash(self):
        return parameter_hash(self)


def frame_key(rgb):
    arr = np.ascontiguousarray(np.asarray(rgb, dtype=np.float32))
    return hashlib.sha1(arr.tobytes()).digest()


class ExternalFileBackend:
    """Per-frame features from ``<path>/features.bin`` (F x P x D) keyed by ``<path>/keys.bin``."""

    name = "external-file"

    def __init__(self, path, grid=(8, 8), dim=None, patch=8):
        self.path, self.patch = path, patch
        self.grid = tuple(grid)
        feats = read_tensor(os.path.join(path, "features.bin"))
        keys = read_tensor(os.path.join(path, "keys.bin"))
        p = self.grid[0] * self.grid[1]
        if feats.ndim != 3 or feats.shape[1] != p:
            raise ShapeMismatchError(f"external features have shape {feats.shape}, expected F x {p} x D")
        if dim is not None and feats.shape[2] != dim:
            raise ShapeMismatchError(f"external feature width {feats.shape[2]}, expected {dim}")
        if keys.shape != (feats.shape[0], 20):
            raise ShapeMismatchError(f"keys shape {keys.shape} does not match {feats.shape[0]} frames")
        self.dim = feats.shape[2]
        self._features = torch.from_numpy(feats.astype(np.float32))
        self._index = {bytes(k): i for i, k in enumerate(keys)}

    def grid_for(self, h, w):
        return self.grid

    def extract_batch(self, rgb, requires_grad=False):
        rgb = np.asarray(torch.as_tensor(rgb).detach(), dtype=np.float32)
        if rgb.ndim == 3:
            rgb = rgb[None]
        rows = []
        for frame in rgb:
            try:
                rows.append(self._index[frame_key(frame)])
            except KeyError:
                raise KeyError("frame not present in external feature file") from None
        return self._features[rows].clone()

    def extract(self, rgb, requires_grad=False):
        return PatchFeatures(self.extract_batch(rgb)[0], self.grid)

    def weights_hash(self):
        return hashlib.sha256(self._features.numpy().tobytes()).hexdigest()


def write_external_features(path, frames, features):
    os.makedirs(path, exist_ok=True)
    keys = np.stack([np.frombuffer(frame_key(f), dtype=np.uint8) for f in frames])
    write_tensor(os.path.join(path, "features.bin"), np.asarray(features, dtype=np.float32))
    write_tensor(os.path.join(path, "keys.bin"), keys)


def load_backend(spec=None):
    """Build a backend from a spec dict (or name); ``None`` gives the fixed-random default."""
    if spec is None:
        spec = dict(DEFAULT_BACKEND)
    elif isinstance(spec, str):
        spec = {"name": spec}
    spec = dict(spec)
    name = spec.pop("name", DEFAULT_BACKEND["name"])
    if name == "fixed-random":
        opts = {k: spec.get(k, DEFAULT_BACKEND[k]) for k in ("seed", "patch", "dim", "hidden")}
        return FixedRandomBackend(**opts)
    if name == "external-file":
        if "path" not in spec:
            raise ConfigError("external-file backend needs a 'path'")
        return ExternalFileBackend(spec["path"], grid=spec.get("grid", (8, 8)), dim=spec.get("dim"), patch=spec.get("patch", 8))
    raise ConfigError(f"unknown visual backend {name!r}")


def parameter_hash(module):
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
