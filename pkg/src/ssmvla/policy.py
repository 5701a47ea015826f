"""Unified-transformer policy with a staged attention layout.

One sequence holds, in order: history visual tokens, instruction tokens,
vision queries (predict the next frame), latent queries (predict the
latent action codes of the next N steps) and a single action query whose
hidden state conditions the flow-matching action head.

Attention is governed by a block mask compiled from segment rules:

    history_visual, language  <->  each other (full); never read queries
    vision_query   ->  core + vision queries
    latent_query   ->  core + vision queries + earlier/same latent blocks
    action_query   ->  everything
    nothing reads the action query

The "causal" variant replaces this with a plain token-level lower
triangular mask over the same sequence.
"""
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .env import ACTION_DIM, IMAGE_SIZE, Action
from .errors import ConfigError, NonFiniteLossError, ShapeMismatchError
from .frontend import parameter_hash
from .layers import Transformer, grid_sincos, init_weights, merge_tokens, timestep_embedding, unpatchify
from .lam import DEPTH_SCALE
from .objectives import FramePair, LossWeights, fm_loss, fm_sample, latent_ce, recon_loss, vla_loss

logger = logging.getLogger(__name__)

SEGMENTS = ("history_visual", "language", "vision_query", "latent_query", "action_query")
CORE = ("history_visual", "language")
FULL, CAUSAL, NONE = "full", "causal", "none"


@dataclass(frozen=True)
class SegmentLayout:
    history_visual: int
    language: int
    vision_query: int
    latent_query: int
    action_query: int = 1
    latent_block: int = 1  # tokens per latent block for block-causal rules

    def __post_init__(self):
        for name in SEGMENTS:
            if getattr(self, name) <= 0:
                raise ConfigError(f"segment {name} needs a positive token count")
        if self.latent_block <= 0 or self.latent_query % self.latent_block:
            raise ConfigError(f"latent_query ({self.latent_query}) is not a multiple of latent_block ({self.latent_block})")

    @property
    def counts(self):
        return tuple(getattr(self, n) for n in SEGMENTS)

    @property
    def total(self):
        return sum(self.counts)

    def slice(self, name):
        start = 0
        for n, c in zip(SEGMENTS, self.counts):
            if n == name:
                return slice(start, start + c)
            start += c
        raise KeyError(name)

    def segment_of(self):
        """Segment name per token position."""
        return [n for n, c in zip(SEGMENTS, self.counts) for _ in range(c)]


@dataclass(frozen=True)
class MaskRule:
    source: str  # the attending (query) segment
    target: str  # the attended (key) segment
    kind: str


def synergistic_rules():
    rules = []
    for src in SEGMENTS:
        for tgt in SEGMENTS:
            if src in CORE:
                kind = FULL if tgt in CORE else NONE
            elif src == "vision_query":
                kind = FULL if tgt in CORE + ("vision_query",) else NONE
            elif src == "latent_query":
                if tgt == "latent_query":
                    kind = CAUSAL
                else:
                    kind = FULL if tgt in CORE + ("vision_query",) else NONE
            else:
                kind = FULL
            if tgt == "action_query" and src != "action_query":
                kind = NONE
            rules.append(MaskRule(src, tgt, kind))
    return tuple(rules)


@dataclass
class CompiledMask:
    rules: tuple
    matrix: torch.Tensor  # total x total bool, [i, j]: token i may attend token j
    layout: SegmentLayout = None

    def block(self, source, target):
        return self.matrix[self.layout.slice(source), self.layout.slice(target)]


def build_mask(layout, mode="synergistic"):
    """Compile the attention mask for ``layout``.

    ``mode="synergistic"`` applies the segment rule table (latent queries are
    block-causal with blocks of ``layout.latent_block`` tokens);
    ``mode="causal"`` is a token-level lower-triangular mask.
    """
    n = layout.total
    if mode == "causal":
        return CompiledMask((), torch.ones(n, n, dtype=torch.bool).tril(), layout)
    if mode != "synergistic":
        raise ConfigError(f"unknown attention mode {mode!r}")
    rules = synergistic_rules()
    m = torch.zeros(n, n, dtype=torch.bool)
    for r in rules:
        rs, cs = layout.slice(r.source), layout.slice(r.target)
        if r.kind == FULL:
            m[rs, cs] = True
        elif r.kind == CAUSAL:
            size = rs.stop - rs.start
            blk = torch.arange(size) // layout.latent_block
            m[rs, cs] = blk[:, None] >= blk[None, :]
    return CompiledMask(rules, m, layout)


@dataclass
class PolicyConfig:
    history: int = 1
    width: int = 256
    layers: int = 6
    heads: int = 8
    feat_dim: int = 64
    feat_grid: tuple = (8, 8)
    feat_pool: int = 2
    vocab_size: int = 32
    max_tokens: int = 8
    image_size: int = IMAGE_SIZE
    vision_patch: int = 16
    n_future: int = 3
    tokens_per_frame: int = 4
    codebook_size: int = 32
    action_dim: int = ACTION_DIM
    chunk: int = 8
    context_dim: int = 256
    attention: str = "synergistic"
    depth: str = "on"
    latent_feedback: bool = False
    seed: int = 0

    def __post_init__(self):
        self.feat_grid = tuple(self.feat_grid)
        if self.attention not in ("synergistic", "causal"):
            raise ConfigError(f"attention must be synergistic or causal, got {self.attention!r}")
        if self.depth not in ("on", "off"):
            raise ConfigError(f"depth must be on or off, got {self.depth!r}")
        if self.image_size % self.vision_patch:
            raise ConfigError("image size must be a multiple of the vision patch")

    def layout(self):
        rows, cols = self.feat_grid
        per_frame = (rows // self.feat_pool) * (cols // self.feat_pool)
        return SegmentLayout(
            history_visual=(self.history + 1) * per_frame,
            language=self.max_tokens,
            vision_query=(self.image_size // self.vision_patch) ** 2,
            latent_query=self.n_future * self.tokens_per_frame,
            action_query=1,
            latent_block=self.tokens_per_frame,
        )


@dataclass
class PolicyOutput:
    predicted_rgb: torch.Tensor  # B x H x W x 3
    predicted_depth: torch.Tensor  # B x H x W, or None with the depth head off
    latent_logits: torch.Tensor  # B x N x T_z x K
    action_context: torch.Tensor  # B x context_dim
    hidden: dict = field(default_factory=dict)


class SSMPolicy(nn.Module):
    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg = cfg or PolicyConfig()
        self.layout = cfg.layout()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            w = cfg.width
            lay = self.layout
            per_frame = lay.history_visual // (cfg.history + 1)
            self.visual_in = nn.Linear(cfg.feat_dim * cfg.feat_pool**2, w)
            self.visual_pos = nn.Parameter(torch.randn(per_frame, w) * 0.02)
            self.frame_pos = nn.Parameter(torch.randn(cfg.history + 1, w) * 0.02)
            self.word_embed = nn.Embedding(cfg.vocab_size, w)
            self.word_pos = nn.Parameter(torch.randn(cfg.max_tokens, w) * 0.02)
            self.vision_queries = nn.Parameter(torch.randn(lay.vision_query, w) * 0.02)
            self.latent_queries = nn.Parameter(torch.randn(lay.latent_query, w) * 0.02)
            self.action_query = nn.Parameter(torch.randn(1, w) * 0.02)
            self.code_embed = nn.Embedding(cfg.codebook_size, w) if cfg.latent_feedback else None
            self.transformer = Transformer(w, cfg.layers, cfg.heads)
            p = cfg.vision_patch
            self.rgb_head = nn.Linear(w, p * p * 3)
            self.depth_head = nn.Linear(w, p * p) if cfg.depth == "on" else None
            self.latent_head = nn.Linear(w, cfg.codebook_size)
            self.action_head = nn.Linear(w, cfg.context_dim)
            init_weights(self.visual_in)
            init_weights(self.transformer)
            for head in (self.rgb_head, self.depth_head):
                if head is not None:
                    # frame heads start at the copy-current-frame prediction
                    nn.init.zeros_(head.weight)
                    nn.init.zeros_(head.bias)
        self.register_buffer("mask", build_mask(self.layout, cfg.attention).matrix, persistent=False)
        rows, cols = cfg.feat_grid
        # fixed grid codes make relative token positions easy to read out
        self.register_buffer("visual_grid", grid_sincos(rows // cfg.feat_pool, cols // cfg.feat_pool, cfg.width), persistent=False)
        self.register_buffer("feat_mean", torch.zeros(rows * cols, cfg.feat_dim))
        self.register_buffer("feat_std", torch.ones(rows * cols, cfg.feat_dim))

    def compiled_mask(self):
        return build_mask(self.layout, self.cfg.attention)

    def embed(self, history_features, tokens, forced_latents=None):
        cfg, lay = self.cfg, self.layout
        b, f, p, _ = history_features.shape
        if f != cfg.history + 1:
            raise ShapeMismatchError(f"policy expects {cfg.history + 1} history frames, got {f}")
        if tokens.shape != (b, cfg.max_tokens):
            raise ShapeMismatchError(f"instruction tokens {tuple(tokens.shape)}, expected ({b}, {cfg.max_tokens})")
        v = (history_features - self.feat_mean) / self.feat_std
        v = merge_tokens(v.reshape(b * f, p, -1), cfg.feat_grid, cfg.feat_pool)
        v = self.visual_in(v).reshape(b, f, -1, cfg.width)
        v = (v + self.visual_grid + self.visual_pos[None, None] + self.frame_pos[None, :, None]).reshape(b, -1, cfg.width)
        lang = self.word_embed(tokens) + self.word_pos
        lq = self.latent_queries.expand(b, -1, -1)
        if forced_latents is not None and self.code_embed is not None:
            # block k sees the embedded codes of block k-1
            prev = self.code_embed(forced_latents.reshape(b, -1))
            shift = torch.zeros_like(lq)
            shift[:, cfg.tokens_per_frame :] = prev[:, : -cfg.tokens_per_frame]
            lq = lq + shift
        parts = [v, lang, self.vision_queries.expand(b, -1, -1), lq, self.action_query.expand(b, -1, -1)]
        return torch.cat(parts, dim=1)

    def forward(self, history_features, tokens, current_rgb, current_depth=None, forced_latents=None, embeddings=None):
        """One pass over the full sequence.

        ``history_features``: B x (H+1) x P x D_v; ``tokens``: B x L_tok;
        ``current_rgb``/``current_depth``: the latest frame, used as the
        residual base of the predicted next frame. ``embeddings`` overrides
        the input sequence (used by perturbation tests).
        """
        cfg, lay = self.cfg, self.layout
        x = embeddings if embeddings is not None else self.embed(history_features, tokens, forced_latents)
        h = self.transformer(x, self.mask)
        b = h.shape[0]
        hv = h[:, lay.slice("vision_query")]
        size = cfg.image_size
        rgb = current_rgb + unpatchify(self.rgb_head(hv), cfg.vision_patch, size, size, 3)
        depth = None
        if self.depth_head is not None and current_depth is not None:
            d = unpatchify(self.depth_head(hv), cfg.vision_patch, size, size, 1)[..., 0]
            depth = current_depth + DEPTH_SCALE * d
        logits = self.latent_head(h[:, lay.slice("latent_query")])
        logits = logits.reshape(b, cfg.n_future, cfg.tokens_per_frame, cfg.codebook_size)
        ctx = self.action_head(h[:, lay.slice("action_query")][:, 0])
        return PolicyOutput(rgb, depth, logits, ctx, {"sequence": h})

    def config_dict(self):
        return asdict(self.cfg)


def infer_latents(output):
    """Argmax code per latent token (lowest index on ties): B x N x T_z."""
    logits = output.latent_logits if isinstance(output, PolicyOutput) else torch.as_tensor(output)
    if not torch.isfinite(logits).all():
        raise ValueError("latent logits must be finite")
    # torch.argmax returns the first maximal index
    return logits.argmax(dim=-1)


@torch.no_grad()
def autoregressive_latents(policy, history_features, tokens, current_rgb, current_depth=None):
    """Two-pass style decoding: each block is re-fed its predecessor's argmax codes."""
    cfg = policy.cfg
    if policy.code_embed is None:
        return infer_latents(policy(history_features, tokens, current_rgb, current_depth))
    b = history_features.shape[0]
    forced = torch.zeros(b, cfg.n_future, cfg.tokens_per_frame, dtype=torch.long)
    for k in range(cfg.n_future):
        out = policy(history_features, tokens, current_rgb, current_depth, forced_latents=forced)
        forced[:, k] = infer_latents(out)[:, k]
    return forced


class VelocityNet(nn.Module):
    """MLP velocity field V(x, tau, c) over flattened action chunks."""

    def __init__(self, action_dim=ACTION_DIM, chunk=8, context_dim=256, hidden=256, layers=3, time_dim=64, seed=0):
        super().__init__()
        self.action_dim, self.chunk, self.time_dim = action_dim, chunk, time_dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed + 3)
            dims = [action_dim * chunk + time_dim + context_dim] + [hidden] * layers
            mods = []
            for a, b in zip(dims[:-1], dims[1:]):
                mods += [nn.Linear(a, b), nn.GELU()]
            mods.append(nn.Linear(dims[-1], action_dim * chunk))
            self.net = nn.Sequential(*mods)

    def forward(self, x, tau, c):
        b = x.shape[0]
        tau = torch.as_tensor(tau, dtype=x.dtype)
        if tau.ndim == 0:
            tau = tau.expand(b)
        inp = torch.cat([x.reshape(b, -1), timestep_embedding(tau, self.time_dim), c], dim=-1)
        return self.net(inp).reshape(x.shape)


def action_chunk_to_actions(chunk):
    """Map a C x A array to executable environment actions."""
    return [Action.from_array(np.asarray(row, dtype=np.float64)) for row in np.asarray(chunk)]


@torch.no_grad()
def act(history_features, tokens, current_rgb, current_depth, policy, velocity_net, steps=10, generator=None, velocity_sign=1.0):
    """Policy pass, then flow-matching sampling of a B x C x A action chunk."""
    policy.eval()
    velocity_net.eval()
    out = policy(history_features, tokens, current_rgb, current_depth)
    b = history_features.shape[0]
    noise = torch.randn((b, policy.cfg.chunk, policy.cfg.action_dim), generator=generator)
    return fm_sample(velocity_net, out.action_context, steps=steps, noise=noise, velocity_sign=velocity_sign), out


def freeze(module):
    module.eval()
    module.requires_grad_(False)
    return module


def vla_losses(policy, velocity_net, batch, frozen_lam=None, weights=None, perceptual=None, generator=None, velocity_sign=1.0, use_latent=True):
    """Forward pass and the three loss terms of the composite objective.

    ``use_latent=False`` drops the latent term (no frozen LAM targets).
    """
    weights = weights or LossWeights()
    if policy.depth_head is None:
        weights = LossWeights(weights.lambda_lpips, 0.0, weights.lambda_vision, weights.lambda_latent)
    targets = None
    if use_latent:
        if frozen_lam is None:
            raise ConfigError("latent supervision needs a frozen LAM")
        targets = frozen_lam.latent_indices(batch["lam_features"])
    forced = targets if policy.cfg.latent_feedback else None
    out = policy(batch["history_features"], batch["tokens"], batch["current_rgb"], batch["current_depth"], forced_latents=forced)
    gt_depth = batch["next_depth"] if out.predicted_depth is not None else None
    l_vision, _ = recon_loss(
        [FramePair(out.predicted_rgb, out.predicted_depth)], [FramePair(batch["next_rgb"], gt_depth)], weights, perceptual
    )
    l_latent = latent_ce(out.latent_logits, targets) if use_latent else torch.zeros(())
    a = batch["actions"]
    b = a.shape[0]
    tau = torch.rand(b, generator=generator)
    eps = torch.randn(a.shape, generator=generator)
    l_action = fm_loss(velocity_net, a, out.action_context, tau, eps, velocity_sign)
    w = weights if use_latent else LossWeights(weights.lambda_lpips, weights.lambda_d, weights.lambda_vision, 0.0)
    total = vla_loss(l_action, l_latent, l_vision, w)
    terms = {"loss": total, "action": l_action, "latent": l_latent, "vision": l_vision}
    return total, terms, out, targets


def vla_train_step(policy, velocity_net, batch, optimizer, frozen_lam=None, weights=None, perceptual=None, generator=None, scheduler=None, velocity_sign=1.0, use_latent=True):
    """One optimizer step on the composite loss; returns float loss terms.

    Raises :class:`NonFiniteLossError` (with per-term values) before any
    parameter is touched if a term is not finite.
    """
    policy.train()
    velocity_net.train()
    if frozen_lam is not None:
        freeze(frozen_lam)
    total, terms, out, targets = vla_losses(policy, velocity_net, batch, frozen_lam, weights, perceptual, generator, velocity_sign, use_latent)
    values = {k: float(v.detach()) for k, v in terms.items()}
    if not all(np.isfinite(v) for v in values.values()):
        raise NonFiniteLossError(f"non-finite policy loss: {values}", values)
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    if targets is not None:
        values["latent_acc"] = float((infer_latents(out) == targets).float().mean())
    return values


def frozen_hash(module):
    return parameter_hash(module)
