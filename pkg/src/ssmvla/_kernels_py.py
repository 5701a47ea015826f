"""Pure numpy twins of the compiled kernels in ``_kernels.pyx``.

Every arithmetic step is ordered the same way as the compiled loops, so the
two backends return bit-identical arrays.
"""
import numpy as np


def render_scene(
    background,
    table_depth,
    block_height,
    block_half,
    block_pos,
    block_level,
    block_color,
    gripper_x,
    gripper_y,
    gripper_closed,
    gripper_outer,
    gripper_inner,
    px_per_cell,
    gripper_color,
):
    h, w = background.shape[:2]
    rgb = np.array(background, dtype=np.float32, copy=True)
    depth = np.full((h, w), table_depth, dtype=np.float32)
    ys = ((np.arange(h) + 0.5) / px_per_cell)[:, None]
    xs = ((np.arange(w) + 0.5) / px_per_cell)[None, :]
    top = np.full((h, w), -1, dtype=np.int64)
    for b in range(block_pos.shape[0]):
        cover = (np.abs(xs - block_pos[b, 0]) < block_half) & (np.abs(ys - block_pos[b, 1]) < block_half)
        paint = cover & (block_level[b] >= top)
        top[paint] = block_level[b]
        rgb[paint] = block_color[b].astype(np.float32)
        depth[paint] = np.float32(table_depth - (block_level[b] + 1) * block_height)
    cheb = np.maximum(np.abs(xs - gripper_x), np.abs(ys - gripper_y))
    marker = cheb < gripper_outer
    if not gripper_closed:
        marker &= cheb >= gripper_inner
    rgb[marker] = np.asarray(gripper_color).astype(np.float32)
    return rgb, depth


def nearest_codes(x, codes):
    x = np.asarray(x, dtype=np.float64)
    codes = np.asarray(codes, dtype=np.float64)
    dist = np.zeros((x.shape[0], codes.shape[0]), dtype=np.float64)
    for t in range(x.shape[1]):
        diff = x[:, None, t] - codes[None, :, t]
        dist += diff * diff
    # argmin returns the first minimum, i.e. the lowest index on ties
    return np.argmin(dist, axis=1).astype(np.int64)
