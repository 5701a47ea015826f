"""Latent-action visualization traces and image grids.

A trace stores, for one anchor frame, the N ground-truth future frames, the
frames decoded from the frozen-LAM codes and the frames decoded from the
policy's predicted codes. The grid is a pure function of the trace:

    row 1  ground truth        s_{t+1} .. s_{t+N}
    row 2  decode(s_t, z)
    row 3  decode(s_t, z_hat)

Each cell shows RGB, with the depth map beside it when the trace has depth.
"""
import json
import logging
import os
import warnings

import numpy as np
import torch

from .errors import MalformedContainerError, SchemaVersionError
from .tensorio import read_tensor, write_tensor

logger = logging.getLogger(__name__)

TRACE_SCHEMA = 1
ROWS = ("gt", "dec_gt", "dec_pred")
PAD = 2


def make_trace(rgb_future, depth_future, dec_gt, dec_pred, z, z_hat, current_rgb=None):
    """Assemble a trace dict; ``dec_*`` are (rgb, depth) pairs with N frames each."""
    trace = {
        "gt_rgb": np.asarray(rgb_future, dtype=np.float32),
        "dec_gt_rgb": np.asarray(dec_gt[0], dtype=np.float32),
        "dec_pred_rgb": np.asarray(dec_pred[0], dtype=np.float32),
        "z": np.asarray(z, dtype=np.int64),
        "z_hat": np.asarray(z_hat, dtype=np.int64),
    }
    if depth_future is not None and dec_gt[1] is not None and dec_pred[1] is not None:
        trace["gt_depth"] = np.asarray(depth_future, dtype=np.float32)
        trace["dec_gt_depth"] = np.asarray(dec_gt[1], dtype=np.float32)
        trace["dec_pred_depth"] = np.asarray(dec_pred[1], dtype=np.float32)
    if current_rgb is not None:
        trace["current_rgb"] = np.asarray(current_rgb, dtype=np.float32)
    return trace


@torch.no_grad()
def trace_from_anchor(lam, policy, store, e, t):
    """Build a trace for anchor ``(e, t)`` of an episode store."""
    lam.eval()
    policy.eval()
    n = lam.cfg.n_future
    b = store.vla_batch([(e, t)], policy.cfg.history, policy.cfg.chunk, n, lam.cfg.frame_stride)
    z = lam.latent_indices(b["lam_features"])[0]
    out = policy(b["history_features"], b["tokens"], b["current_rgb"], b["current_depth"])
    z_hat = out.latent_logits[0].argmax(-1)
    rgb0, d0 = b["current_rgb"], b["current_depth"]
    codes = lam.codebook.codes

    def dec(idx):
        pr, pd = lam.decode(rgb0.expand(n, -1, -1, -1), d0.expand(n, -1, -1), codes[idx])
        return pr.clamp(0, 1).numpy(), pd.numpy()

    future = store.clip_indices(e, t, n, lam.cfg.frame_stride)[1:]
    return make_trace(
        store.rgb[e][future].numpy(), store.depth[e][future].numpy(), dec(z), dec(z_hat), z.numpy(), z_hat.numpy(), rgb0[0].numpy()
    )


def save_trace(trace, path, config_hash=""):
    os.makedirs(path, exist_ok=True)
    names = sorted(trace)
    for name in names:
        write_tensor(os.path.join(path, f"{name}.bin"), trace[name])
    meta = {"schema_version": TRACE_SCHEMA, "arrays": names, "config_hash": config_hash}
    with open(os.path.join(path, "trace.json"), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)


def load_trace(path):
    try:
        with open(os.path.join(path, "trace.json")) as f:
            meta = json.load(f)
    except FileNotFoundError as e:
        raise MalformedContainerError(f"no trace.json in {path}") from e
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise MalformedContainerError(f"{path}/trace.json is not valid JSON") from e
    if meta.get("schema_version") != TRACE_SCHEMA:
        raise SchemaVersionError(f"trace schema {meta.get('schema_version')!r}, expected {TRACE_SCHEMA}")
    trace = {}
    for name in meta.get("arrays", []):
        p = os.path.join(path, f"{name}.bin")
        if not os.path.exists(p):
            raise MalformedContainerError(f"trace array {name} missing")
        trace[name] = np.array(read_tensor(p))
    validate_trace(trace)
    return trace


def validate_trace(trace):
    for r in ROWS:
        if f"{r}_rgb" not in trace:
            raise MalformedContainerError(f"trace lacks {r}_rgb")
    shape = trace["gt_rgb"].shape
    if len(shape) != 4 or shape[-1] != 3:
        raise MalformedContainerError(f"trace frames must be N x H x W x 3, got {shape}")
    for r in ROWS:
        if trace[f"{r}_rgb"].shape != shape:
            raise MalformedContainerError(f"{r}_rgb shape {trace[f'{r}_rgb'].shape} differs from {shape}")


def has_depth(trace):
    return all(f"{r}_depth" in trace for r in ROWS)


def _depth_to_gray(d, lo, hi):
    g = (d - lo) / (hi - lo) if hi > lo else np.zeros_like(d)
    return np.repeat(np.clip(1.0 - g, 0, 1)[..., None], 3, axis=-1)


def grid_image(trace):
    """Compose the 3-row x N-column grid as an H' x W' x 3 float array in [0, 1]."""
    validate_trace(trace)
    n, h, w, _ = trace["gt_rgb"].shape
    depth = has_depth(trace)
    if not depth:
        warnings.warn("trace has no depth maps; drawing an RGB-only grid", stacklevel=2)
    cell_w = 2 * w + PAD if depth else w
    if depth:
        all_d = np.concatenate([trace[f"{r}_depth"].ravel() for r in ROWS])
        lo, hi = float(all_d.min()), float(all_d.max())
    img = np.ones((3 * h + 4 * PAD, n * cell_w + (n + 1) * PAD, 3), dtype=np.float32)
    for i, r in enumerate(ROWS):
        y = PAD + i * (h + PAD)
        for k in range(n):
            x = PAD + k * (cell_w + PAD)
            img[y : y + h, x : x + w] = np.clip(trace[f"{r}_rgb"][k], 0, 1)
            if depth:
                img[y : y + h, x + w + PAD : x + 2 * w + PAD] = _depth_to_gray(trace[f"{r}_depth"][k], lo, hi)
    return img


def grid_shape(trace):
    """(rows, columns) of the grid layout."""
    return len(ROWS), trace["gt_rgb"].shape[0]


def cell(img, trace, row, col):
    """Crop the RGB cell at (row, col) from a grid image."""
    _, h, w, _ = trace["gt_rgb"].shape
    cell_w = 2 * w + PAD if has_depth(trace) else w
    y = PAD + row * (h + PAD)
    x = PAD + col * (cell_w + PAD)
    return img[y : y + h, x : x + w]


def write_grid(trace, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.image

    img = grid_image(trace)
    matplotlib.image.imsave(path, img)
    return img
