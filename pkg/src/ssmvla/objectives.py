"""Loss functions for the latent action model and the cascaded policy.

Conventions: images are channel-last (``... x H x W x 3``), depth maps are
``... x H x W``. Pixel losses are mean-reduced; the flow-matching loss is a
per-sample squared norm averaged over the batch.
"""
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InsufficientDataError, ShapeMismatchError, SingularFitError


@dataclass(frozen=True)
class LossWeights:
    lambda_lpips: float = 1.0
    lambda_d: float = 0.01
    lambda_vision: float = 0.1
    lambda_latent: float = 0.01

    def __post_init__(self):
        for k, v in vars(self).items():
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"{k} must be a finite non-negative number, got {v}")


@dataclass(frozen=True)
class AlignmentFit:
    a: float
    b: float
    residual: float

    def apply(self, d_mono):
        return self.a * d_mono + self.b


@dataclass
class FramePair:
    rgb: torch.Tensor
    depth: torch.Tensor = None


class RandomConvPerceptual(nn.Module):
    """Perceptual proxy: mean L1 gap between frozen random conv feature maps.

    Stands in for a learned perceptual metric; any callable
    ``(pred, gt) -> scalar`` over channel-last images can replace it.
    """

    def __init__(self, seed=11, widths=(16, 32)):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        layers, c = [], 3
        for w in widths:
            conv = nn.Conv2d(c, w, 3, stride=2, padding=1, bias=False)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * (2.0 / conv.weight[0].numel()) ** 0.5)
            layers.append(conv)
            c = w
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)

    def features(self, x):
        x = x.reshape(-1, *x.shape[-3:]).permute(0, 3, 1, 2)
        feats = []
        for conv in self.layers:
            x = F.relu(conv(x))
            feats.append(x)
        return feats

    def forward(self, pred, gt):
        total = pred.new_zeros(())
        for fp, fg in zip(self.features(pred), self.features(gt)):
            total = total + (fp - fg).abs().mean()
        return total / len(self.layers)


_default_perceptual = None


def default_perceptual():
    global _default_perceptual
    if _default_perceptual is None:
        _default_perceptual = RandomConvPerceptual()
    return _default_perceptual


def _same_shape(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeMismatchError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def rgb_loss(pred_rgb, gt_rgb, weights=None, perceptual=None):
    """Mean squared error plus ``lambda_lpips`` times a perceptual distance."""
    weights = weights or LossWeights()
    _same_shape(pred_rgb, gt_rgb, "rgb_loss")
    loss = ((pred_rgb - gt_rgb) ** 2).mean()
    if weights.lambda_lpips > 0:
        metric = perceptual if perceptual is not None else default_perceptual()
        loss = loss + weights.lambda_lpips * metric(pred_rgb, gt_rgb)
    return loss


def image_gradient_magnitude(rgb):
    """Per-pixel forward-difference gradient magnitude, averaged over channels.

    The last row/column use a zero difference.
    """
    gx = torch.zeros_like(rgb)
    gy = torch.zeros_like(rgb)
    gx[..., :, :-1, :] = rgb[..., :, 1:, :] - rgb[..., :, :-1, :]
    gy[..., :-1, :, :] = rgb[..., 1:, :, :] - rgb[..., :-1, :, :]
    return torch.sqrt(gx * gx + gy * gy).mean(dim=-1)


def depth_loss(pred_depth, gt_depth, gt_rgb, weighting="per_pixel"):
    """Edge-aware logarithmic depth loss.

    ``weighting="per_pixel"`` applies ``exp(-|grad rgb|)`` to each pixel term
    inside the mean; ``"global"`` multiplies the mean log error by
    ``exp(-mean |grad rgb|)``.
    """
    _same_shape(pred_depth, gt_depth, "depth_loss")
    if tuple(gt_rgb.shape[:-1]) != tuple(gt_depth.shape):
        raise ShapeMismatchError(f"depth_loss: rgb {tuple(gt_rgb.shape)} vs depth {tuple(gt_depth.shape)}")
    with torch.no_grad():
        mag = image_gradient_magnitude(gt_rgb.detach())
    err = torch.log1p((pred_depth - gt_depth).abs())
    if weighting == "per_pixel":
        return (torch.exp(-mag) * err).mean()
    if weighting == "global":
        return torch.exp(-mag.mean()) * err.mean()
    raise ValueError(f"unknown depth weighting {weighting!r}")


def recon_loss(pred_frames, gt_frames, weights=None, perceptual=None, depth_weighting="per_pixel"):
    """Sum over frames of ``rgb_loss + lambda_d * depth_loss``.

    Frames are objects with ``.rgb`` and ``.depth``; a frame whose predicted
    depth is ``None`` contributes no depth term. Returns ``(total, breakdown)``
    with summed ``rgb``/``depth`` terms and per-frame values.
    """
    weights = weights or LossWeights()
    if len(pred_frames) != len(gt_frames):
        raise ShapeMismatchError(f"{len(pred_frames)} predicted frames vs {len(gt_frames)} targets")
    total, rgb_sum, depth_sum = 0.0, 0.0, 0.0
    per_frame = []
    for p, g in zip(pred_frames, gt_frames):
        lr = rgb_loss(p.rgb, g.rgb, weights, perceptual)
        if p.depth is not None and g.depth is not None:
            ld = depth_loss(p.depth, g.depth, g.rgb, depth_weighting)
        else:
            ld = torch.zeros((), dtype=lr.dtype)
        term = lr + weights.lambda_d * ld
        total = total + term
        rgb_sum = rgb_sum + lr
        depth_sum = depth_sum + ld
        per_frame.append(term)
    if not per_frame:
        total = torch.zeros(())
    return total, {"rgb": rgb_sum, "depth": depth_sum, "per_frame": per_frame}


def align_depth(d_mono, d_sparse):
    """Closed-form least-squares scale and shift mapping ``d_mono`` onto ``d_sparse``.

    Solves the 2x2 normal equations in centered form (float64).
    """
    x = np.asarray(d_mono, dtype=np.float64).ravel()
    y = np.asarray(d_sparse, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ShapeMismatchError(f"{x.size} mono samples vs {y.size} sparse samples")
    if x.size < 2:
        raise InsufficientDataError(f"need at least 2 sparse pixels, got {x.size}")
    xm, ym = x.mean(), y.mean()
    dx = x - xm
    sxx = float(dx @ dx)
    scale = max(float(np.max(np.abs(x))), 1.0)
    if sxx <= 1e-24 * x.size * scale * scale:
        raise SingularFitError("mono depth is constant over the sparse pixels; scale is undetermined")
    a = float(dx @ (y - ym)) / sxx
    b = float(ym - a * xm)
    r = a * x + b - y
    return AlignmentFit(a=a, b=b, residual=float(r @ r))


def pseudo_depth_target(d_mono_full, d_mono_sparse, d_sparse):
    """Align a dense relative depth map to sparse metric samples; returns (target, fit)."""
    fit = align_depth(d_mono_sparse, d_sparse)
    return fit.apply(d_mono_full), fit


def latent_ce(pred_logits, gt_indices):
    """Token-mean cross-entropy between ``... x K`` logits and integer targets."""
    k = pred_logits.shape[-1]
    gt = torch.as_tensor(gt_indices, dtype=torch.long)
    if tuple(gt.shape) != tuple(pred_logits.shape[:-1]):
        raise ShapeMismatchError(f"logits {tuple(pred_logits.shape)} vs targets {tuple(gt.shape)}")
    if gt.numel() and (gt.min() < 0 or gt.max() >= k):
        raise ValueError(f"latent target out of range [0, {k})")
    return F.cross_entropy(pred_logits.reshape(-1, k), gt.reshape(-1))


def fm_interpolate(a, eps, tau):
    tau = _expand_like(tau, a)
    return tau * a + (1 - tau) * eps


def _expand_like(tau, x):
    tau = torch.as_tensor(tau, dtype=x.dtype)
    if tau.ndim == 0:
        return tau
    return tau.reshape(-1, *([1] * (x.ndim - 1)))


def fm_loss(velocity_net, a, c, tau, eps, velocity_sign=1.0):
    """Conditional flow-matching regression toward ``velocity_sign * (eps - a)``.

    ``a``/``eps``: B x ... action chunks; ``tau``: scalar or (B,) in [0, 1].
    Returns the batch mean of the per-sample squared L2 residual.
    """
    if tuple(a.shape) != tuple(eps.shape):
        raise ShapeMismatchError(f"action {tuple(a.shape)} vs noise {tuple(eps.shape)}")
    x = fm_interpolate(a, eps, tau)
    target = velocity_sign * (eps - a)
    v = velocity_net(x, torch.as_tensor(tau, dtype=a.dtype), c)
    res = (v - target).reshape(a.shape[0], -1)
    return (res * res).sum(dim=1).mean()


def fm_sample(velocity_net, c, steps=10, noise=None, shape=None, generator=None, velocity_sign=1.0):
    """Euler integration from noise (tau=0) to data (tau=1).

    With targets ``eps - a`` the field points from data to noise, so each
    step subtracts it: ``x <- x - velocity_sign * V(x, tau, c) / steps``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if noise is None:
        noise = torch.randn(shape, generator=generator)
    x = noise
    h = 1.0 / steps
    b = x.shape[0]
    for m in range(steps):
        tau = torch.full((b,), m * h, dtype=x.dtype)
        x = x - velocity_sign * h * velocity_net(x, tau, c)
    return x


def vla_loss(l_action, l_latent, l_vision, weights=None):
    weights = weights or LossWeights()
    return l_action + weights.lambda_latent * l_latent + weights.lambda_vision * l_vision


def psnr(pred, gt, peak=1.0):
    """Peak signal-to-noise ratio in dB with ``pred`` clipped to [0, peak]."""
    mse = float(((torch.as_tensor(pred).clamp(0, peak) - torch.as_tensor(gt)) ** 2).mean())
    if mse == 0:
        return float("inf")
    return 10.0 * math.log10(peak * peak / mse)


def perplexity(counts):
    """exp(entropy) of an empirical usage histogram."""
    c = np.asarray(counts, dtype=np.float64)
    total = c.sum()
    if total <= 0:
        return 0.0
    p = c[c > 0] / total
    return float(np.exp(-(p * np.log(p)).sum()))
