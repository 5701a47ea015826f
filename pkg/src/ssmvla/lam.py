"""Farsighted latent action model.

The encoder reads frozen patch features of the current frame and N future
key frames together with N blocks of learnable queries. Frame tokens attend
causally at frame granularity and query block k sees frames 0..k only, so
the continuous latent for step t+k never depends on later frames. Each
latent token is snapped to its nearest codebook row. The decoder sees only
the current observation (RGB + depth) and one quantized token block.
"""
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from . import kernels
from .env import IMAGE_SIZE, TABLE_DEPTH
from .errors import NonFiniteLossError, ShapeMismatchError
from .frontend import PatchFeatures
from .layers import Transformer, init_weights, merge_tokens, patchify, unpatchify
from .objectives import FramePair, LossWeights, recon_loss

logger = logging.getLogger(__name__)

DEPTH_CENTER = TABLE_DEPTH
DEPTH_SCALE = 0.5


@dataclass
class LAMConfig:
    n_future: int = 3
    tokens_per_frame: int = 4
    codebook_size: int = 32
    code_dim: int = 64
    width: int = 64
    enc_layers: int = 4
    dec_layers: int = 4
    heads: int = 4
    feat_dim: int = 64
    feat_grid: tuple = (8, 8)
    feat_pool: int = 2
    image_size: int = IMAGE_SIZE
    patch: int = 8
    commitment: float = 0.25
    dead_code_steps: int = 200
    vq_warmup_steps: int = 200
    reseed_dead_codes: bool = True
    frame_stride: int = 1
    seed: int = 0

    def __post_init__(self):
        self.feat_grid = tuple(self.feat_grid)
        if self.codebook_size < 2:
            raise ValueError("codebook needs at least 2 entries")
        if self.n_future < 1 or self.tokens_per_frame < 1:
            raise ValueError("n_future and tokens_per_frame must be positive")


def codebook_init(k, d, generator):
    # unit-norm scale, comparable to freshly initialized encoder outputs
    codes = torch.randn(k, d, generator=generator) / d**0.5
    if len(torch.unique(codes, dim=0)) != k:
        raise RuntimeError("duplicate codebook rows at initialization")
    return codes


class _StraightThrough(torch.autograd.Function):
    # forward returns the code rows exactly; backward hands the gradient to the continuous input unchanged
    @staticmethod
    def forward(ctx, continuous, quantized):
        return quantized.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def quantize_indices(continuous, codes):
    """Exhaustive L2 nearest code per vector (float64, lowest index on ties)."""
    flat = continuous.detach().reshape(-1, continuous.shape[-1]).to(torch.float64).contiguous().numpy()
    table = codes.detach().to(torch.float64).contiguous().numpy()
    idx = kernels.nearest_codes(np.ascontiguousarray(flat), np.ascontiguousarray(table))
    return torch.from_numpy(idx).reshape(continuous.shape[:-1])


class Codebook(nn.Module):
    def __init__(self, size, dim, seed=0):
        super().__init__()
        g = torch.Generator().manual_seed(int(seed) + 101)
        self.codes = nn.Parameter(codebook_init(size, dim, g))
        self.register_buffer("usage_counts", torch.zeros(size, dtype=torch.long))
        self.register_buffer("last_used", torch.zeros(size, dtype=torch.long))

    @property
    def size(self):
        return self.codes.shape[0]

    def reset_usage(self):
        self.usage_counts.zero_()


def quantize(continuous, codebook, straight_through=True):
    """Snap ``... x D`` vectors to codebook rows; returns ``(indices, quantized)``.

    With ``straight_through`` the quantized tensor passes its gradient to
    ``continuous`` as if quantization were the identity.
    """
    codes = codebook.codes if isinstance(codebook, Codebook) else torch.as_tensor(codebook)
    idx = quantize_indices(continuous, codes)
    q = codes.detach()[idx]
    if straight_through and continuous.requires_grad:
        q = _StraightThrough.apply(continuous, q)
    return idx, q


class LAMEncoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        rows, cols = cfg.feat_grid
        self.tokens_per_image = (rows // cfg.feat_pool) * (cols // cfg.feat_pool)
        self.proj = nn.Linear(cfg.feat_dim * cfg.feat_pool**2, cfg.width)
        self.spatial = nn.Parameter(torch.zeros(self.tokens_per_image, cfg.width))
        self.temporal = nn.Parameter(torch.zeros(cfg.n_future + 1, cfg.width))
        # learnable latent action queries, one block of T_z per future step
        self.queries = nn.Parameter(torch.zeros(cfg.n_future, cfg.tokens_per_frame, cfg.width))
        self.transformer = Transformer(cfg.width, cfg.enc_layers, cfg.heads)
        self.out = nn.Linear(cfg.width, cfg.code_dim)
        init_weights(self)
        g = torch.Generator().manual_seed(cfg.seed + 7)
        with torch.no_grad():
            for p in (self.spatial, self.temporal, self.queries):
                p.copy_(torch.randn(p.shape, generator=g) * 0.02)
        self.register_buffer("mask", self.build_mask(), persistent=False)
        # per-token, per-channel standardization of frozen features
        p_in = rows * cols
        self.register_buffer("feat_mean", torch.zeros(p_in, cfg.feat_dim))
        self.register_buffer("feat_std", torch.ones(p_in, cfg.feat_dim))

    def build_mask(self):
        cfg = self.cfg
        p, n, t = self.tokens_per_image, cfg.n_future, cfg.tokens_per_frame
        frame_of = [i // p for i in range((n + 1) * p)] + [1 + j // t for j in range(n * t)]
        is_query = [False] * ((n + 1) * p) + [True] * (n * t)
        s = len(frame_of)
        mask = torch.zeros(s, s, dtype=torch.bool)
        for i in range(s):
            for j in range(s):
                if not is_query[j]:
                    mask[i, j] = frame_of[j] <= frame_of[i]
                else:
                    # queries are read only by queries of the same or later blocks
                    mask[i, j] = is_query[i] and frame_of[j] <= frame_of[i]
        return mask

    def forward(self, features):
        """``features``: B x (N+1) x P x D_v -> continuous latents B x N x T_z x code_dim."""
        cfg = self.cfg
        b, f, p, _ = features.shape
        if f != cfg.n_future + 1:
            raise ShapeMismatchError(f"encoder expects {cfg.n_future + 1} frames, got {f}")
        x = (features - self.feat_mean) / self.feat_std
        x = merge_tokens(x.reshape(b * f, p, -1), cfg.feat_grid, cfg.feat_pool)
        x = self.proj(x).reshape(b, f, self.tokens_per_image, -1)
        x = x + self.spatial[None, None] + self.temporal[None, :, None]
        q = self.queries.reshape(1, -1, cfg.width).expand(b, -1, -1)
        h = self.transformer(torch.cat([x.reshape(b, f * self.tokens_per_image, -1), q], dim=1), self.mask)
        z = self.out(h[:, f * self.tokens_per_image :])
        return z.reshape(b, cfg.n_future, cfg.tokens_per_frame, cfg.code_dim)


@torch.no_grad()
def set_feature_stats(module, features):
    f = torch.as_tensor(features, dtype=torch.float32)
    module.feat_mean.copy_(f.mean(0))
    module.feat_std.copy_(f.std(0).clamp_min(1e-3))


def _depth_in(depth):
    return (depth - DEPTH_CENTER) / DEPTH_SCALE


class LAMDecoder(nn.Module):
    """Predicts a future frame from the current observation and one latent token block.

    Outputs are residuals on the current frame; zero-initialized heads start
    from the copy-current-frame prediction.
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.n_patches = (cfg.image_size // cfg.patch) ** 2
        self.patch_in = nn.Linear(cfg.patch * cfg.patch * 4, cfg.width)
        self.pos = nn.Parameter(torch.zeros(self.n_patches, cfg.width))
        self.z_in = nn.Linear(cfg.code_dim, cfg.width)
        self.z_pos = nn.Parameter(torch.zeros(cfg.tokens_per_frame, cfg.width))
        self.z_broadcast = nn.Linear(cfg.tokens_per_frame * cfg.code_dim, cfg.width)
        self.transformer = Transformer(cfg.width, cfg.dec_layers, cfg.heads)
        self.rgb_head = nn.Linear(cfg.width, cfg.patch * cfg.patch * 3)
        self.depth_head = nn.Linear(cfg.width, cfg.patch * cfg.patch)
        init_weights(self)
        g = torch.Generator().manual_seed(cfg.seed + 13)
        with torch.no_grad():
            self.pos.copy_(torch.randn(self.pos.shape, generator=g) * 0.02)
            self.z_pos.copy_(torch.randn(self.z_pos.shape, generator=g) * 0.02)
            for head in (self.rgb_head, self.depth_head):
                head.weight.zero_()
                head.bias.zero_()

    def forward(self, rgb, depth, z):
        """rgb: B x H x W x 3, depth: B x H x W, z: B x T_z x code_dim -> (rgb, depth)."""
        cfg = self.cfg
        if z.shape[-2:] != (cfg.tokens_per_frame, cfg.code_dim):
            raise ShapeMismatchError(f"latent block {tuple(z.shape)} does not match T_z={cfg.tokens_per_frame}, D={cfg.code_dim}")
        if rgb.shape[-3:-1] != depth.shape[-2:]:
            raise ShapeMismatchError(f"rgb {tuple(rgb.shape)} and depth {tuple(depth.shape)} disagree")
        b, h, w, _ = rgb.shape
        img = torch.cat([rgb, _depth_in(depth)[..., None]], dim=-1)
        zt = self.z_in(z) + self.z_pos
        # every image token also receives the pooled latent directly
        x = self.patch_in(patchify(img, cfg.patch)) + self.pos + self.z_broadcast(z.flatten(1))[:, None]
        y = self.transformer(torch.cat([x, zt], dim=1))[:, : self.n_patches]
        d_rgb = unpatchify(self.rgb_head(y), cfg.patch, h, w, 3)
        d_depth = unpatchify(self.depth_head(y), cfg.patch, h, w, 1)[..., 0]
        return rgb + d_rgb, depth + DEPTH_SCALE * d_depth


class FarsightedLAM(nn.Module):
    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg or LAMConfig()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.cfg.seed)
            self.encoder = LAMEncoder(self.cfg)
            self.codebook = Codebook(self.cfg.codebook_size, self.cfg.code_dim, self.cfg.seed)
            self.decoder = LAMDecoder(self.cfg)
        self.reseed_generator = torch.Generator().manual_seed(self.cfg.seed + 29)
        self.train_steps = 0

    @torch.no_grad()
    def set_feature_stats(self, features):
        """Fit input standardization from an F x P x D_v sample of frozen features."""
        set_feature_stats(self.encoder, features)

    @property
    def queries(self):
        return self.encoder.queries

    def encode(self, features):
        return self.encoder(features)

    def quantize(self, continuous):
        idx, q = quantize(continuous, self.codebook, straight_through=self.training)
        if not self.training:
            self.codebook.usage_counts += torch.bincount(idx.reshape(-1), minlength=self.codebook.size)
        return idx, q

    @torch.no_grad()
    def latent_indices(self, features):
        """Frozen-encoder targets: B x (N+1) x P x D_v features -> B x N x T_z indices."""
        idx, _ = quantize(self.encoder(features), self.codebook, straight_through=False)
        return idx

    def decode(self, rgb, depth, z):
        return self.decoder(rgb, depth, z)

    @property
    def in_vq_warmup(self):
        return self.training and self.train_steps < self.cfg.vq_warmup_steps

    def forward(self, features, rgb0, depth0):
        """Encode, quantize, and decode every horizon from the current frame.

        Returns a dict with continuous/indices/quantized latents and predicted
        rgb (B x N x H x W x 3) and depth (B x N x H x W). During the
        quantizer warm-up the decoder reads the continuous latents.
        """
        cont = self.encode(features)
        if self.in_vq_warmup:
            idx, q = quantize_indices(cont, self.codebook.codes), cont
        else:
            idx, q = self.quantize(cont)
        b, n = q.shape[:2]
        rgb_rep = rgb0[:, None].expand(b, n, *rgb0.shape[1:]).reshape(b * n, *rgb0.shape[1:])
        dep_rep = depth0[:, None].expand(b, n, *depth0.shape[1:]).reshape(b * n, *depth0.shape[1:])
        pr, pd = self.decode(rgb_rep, dep_rep, q.reshape(b * n, *q.shape[2:]))
        return {
            "continuous": cont,
            "indices": idx,
            "quantized": q,
            "rgb": pr.reshape(b, n, *rgb0.shape[1:]),
            "depth": pd.reshape(b, n, *depth0.shape[1:]),
        }

    def config_dict(self):
        return asdict(self.cfg)


def encode(features, model):
    """Continuous latents for one clip given as a list of N+1 PatchFeatures."""
    if len(features) != model.cfg.n_future + 1:
        raise ShapeMismatchError(f"expected {model.cfg.n_future + 1} frames of features, got {len(features)}")
    toks = torch.stack([f.tokens if isinstance(f, PatchFeatures) else torch.as_tensor(f) for f in features])
    return model.encode(toks[None])[0]


def decode(observation_rgb, observation_depth, z, model):
    rgb = torch.as_tensor(observation_rgb, dtype=torch.float32)[None]
    depth = torch.as_tensor(observation_depth, dtype=torch.float32)[None]
    pr, pd = model.decode(rgb, depth, torch.as_tensor(z, dtype=torch.float32)[None])
    return pr[0], pd[0]


def _reseed_dead_codes(model, continuous, step):
    cb = model.codebook
    dead = torch.nonzero(step - cb.last_used >= model.cfg.dead_code_steps).flatten()
    if len(dead) == 0:
        return 0
    pool = continuous.detach().reshape(-1, continuous.shape[-1])
    pick = torch.randint(0, pool.shape[0], (len(dead),), generator=model.reseed_generator)
    with torch.no_grad():
        cb.codes[dead] = pool[pick]
    cb.last_used[dead] = step
    logger.info("reseeded %d dead codes at step %d", len(dead), step)
    return len(dead)


def _spread_sample(pool, k, generator):
    # farthest-point selection: k well separated rows of pool
    first = int(torch.randint(0, pool.shape[0], (1,), generator=generator))
    chosen = [first]
    dist = ((pool - pool[first]) ** 2).sum(-1)
    for _ in range(k - 1):
        nxt = int(torch.argmax(dist))
        chosen.append(nxt)
        dist = torch.minimum(dist, ((pool - pool[nxt]) ** 2).sum(-1))
    return pool[chosen]


def init_codebook_from(model, continuous, step):
    """Seed every code from spread-out encoder outputs (end of warm-up)."""
    pool = continuous.detach().reshape(-1, continuous.shape[-1])
    k = model.codebook.size
    if pool.shape[0] < k:
        pool = pool.repeat((k + pool.shape[0] - 1) // pool.shape[0], 1)
    rows = _spread_sample(pool, k, model.reseed_generator)
    # tiny jitter keeps rows distinct when the pool has duplicates
    rows = rows + 1e-4 * torch.randn(rows.shape, generator=model.reseed_generator)
    with torch.no_grad():
        model.codebook.codes.copy_(rows)
    model.codebook.last_used.fill_(step)


def lam_losses(model, batch, weights=None, perceptual=None):
    """Forward pass and loss terms for one batch of clips.

    ``batch``: features B x (N+1) x P x D_v, rgb B x (N+1) x H x W x 3,
    depth B x (N+1) x H x W. Frame 0 is the current frame.
    """
    weights = weights or LossWeights()
    out = model(batch["features"], batch["rgb"][:, 0], batch["depth"][:, 0])
    n = model.cfg.n_future
    preds = [FramePair(out["rgb"][:, k], out["depth"][:, k]) for k in range(n)]
    gts = [FramePair(batch["rgb"][:, k + 1], batch["depth"][:, k + 1]) for k in range(n)]
    rec, parts = recon_loss(preds, gts, weights, perceptual)
    cont, q_rows = out["continuous"], model.codebook.codes[out["indices"]]
    if model.in_vq_warmup:
        codebook_term = commit = torch.zeros(())
    else:
        codebook_term = ((q_rows - cont.detach()) ** 2).mean()
        commit = ((cont - q_rows.detach()) ** 2).mean()
    total = rec + codebook_term + model.cfg.commitment * commit
    return total, {
        "loss": total,
        "rec": rec,
        "rgb": parts["rgb"],
        "depth": parts["depth"],
        "codebook": codebook_term,
        "commitment": commit,
    }, out


def lam_train_step(model, batch, optimizer, weights=None, perceptual=None, scheduler=None):
    """One optimizer step; returns float loss terms. Raises on non-finite loss."""
    model.train()
    total, terms, out = lam_losses(model, batch, weights, perceptual)
    values = {k: float(v.detach()) for k, v in terms.items()}
    if not all(np.isfinite(v) for v in values.values()):
        raise NonFiniteLossError(f"non-finite LAM loss at step {model.train_steps}: {values}", values)
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    step = model.train_steps
    if step < model.cfg.vq_warmup_steps:
        if step == model.cfg.vq_warmup_steps - 1:
            init_codebook_from(model, out["continuous"], step)
        model.train_steps += 1
        return values
    used = torch.unique(out["indices"])
    model.codebook.last_used[used] = step
    if model.cfg.reseed_dead_codes:
        values["reseeded"] = _reseed_dead_codes(model, out["continuous"], step)
    model.train_steps += 1
    return values
