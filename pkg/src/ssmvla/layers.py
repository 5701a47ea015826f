"""Pre-norm transformer with an explicit boolean attention mask.

Attention is written out (masked_fill with -inf, then softmax) so masked
keys receive exactly zero weight and exactly zero gradient.
"""
import math

import torch
import torch.nn as nn


class MaskedSelfAttention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, mask=None):
        b, s, d = x.shape
        q, k, v = self.qkv(x).view(b, s, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-2, -1) / math.sqrt(d // self.heads)
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        attn = scores.softmax(dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, s, d)
        return self.out(y)


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio=2.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = MaskedSelfAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x, mask=None):
        x = x + self.attn(self.ln1(x), mask)
        return x + self.mlp(self.ln2(x))


class Transformer(nn.Module):
    def __init__(self, dim, depth, heads, mlp_ratio=2.0):
        super().__init__()
        self.blocks = nn.ModuleList(Block(dim, heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)

    def forward(self, x, mask=None):
        for blk in self.blocks:
            x = blk(x, mask)
        return self.norm(x)


def patchify(img, patch):
    """B x H x W x C -> B x (H/p * W/p) x (p*p*C), row-major patches."""
    b, h, w, c = img.shape
    x = img.reshape(b, h // patch, patch, w // patch, patch, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), patch * patch * c)


def unpatchify(tokens, patch, h, w, c):
    b = tokens.shape[0]
    x = tokens.reshape(b, h // patch, w // patch, patch, patch, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)


def merge_tokens(tokens, grid, factor):
    """Concatenate ``factor x factor`` neighbouring grid tokens: B x P x D -> B x P/f^2 x f^2*D."""
    if factor == 1:
        return tokens
    b, p, d = tokens.shape
    rows, cols = grid
    x = tokens.reshape(b, rows // factor, factor, cols // factor, factor, d)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, (rows // factor) * (cols // factor), factor * factor * d)


def timestep_embedding(t, dim, max_period=100.0):
    """Sinusoidal embedding of scalars in [0, 1]: (B,) -> B x dim."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = t[:, None] * freqs[None] * max_period
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def grid_sincos(rows, cols, dim):
    """Fixed 2-D sin-cos position codes for a row-major token grid: (rows*cols) x dim."""
    if dim % 4:
        raise ValueError("grid position codes need a width divisible by 4")
    r, c = torch.meshgrid(torch.arange(rows, dtype=torch.float32), torch.arange(cols, dtype=torch.float32), indexing="ij")
    quarter = dim // 4
    freqs = 1.0 / (100.0 ** (torch.arange(quarter, dtype=torch.float32) / quarter))
    parts = []
    for coord in (r.reshape(-1), c.reshape(-1)):
        args = coord[:, None] * freqs[None]
        parts += [torch.sin(args), torch.cos(args)]
    return torch.cat(parts, dim=1)


def init_weights(module):
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
