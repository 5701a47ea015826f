# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: scene rasterization and exhaustive nearest-code search.

Both kernels mirror ``_kernels_py`` operation for operation so the two
backends agree bit for bit.
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


def render_scene(
    const cnp.float32_t[:, :, ::1] background,
    double table_depth,
    double block_height,
    double block_half,
    const double[:, ::1] block_pos,
    const cnp.int64_t[::1] block_level,
    const double[:, ::1] block_color,
    double gripper_x,
    double gripper_y,
    bint gripper_closed,
    double gripper_outer,
    double gripper_inner,
    double px_per_cell,
    const double[::1] gripper_color,
):
    cdef Py_ssize_t h = background.shape[0]
    cdef Py_ssize_t w = background.shape[1]
    cdef Py_ssize_t n = block_pos.shape[0]
    rgb_arr = np.array(background, dtype=np.float32, copy=True)
    depth_arr = np.full((h, w), table_depth, dtype=np.float32)
    cdef cnp.float32_t[:, :, ::1] rgb = rgb_arr
    cdef cnp.float32_t[:, ::1] depth = depth_arr
    cdef Py_ssize_t i, j, b, c
    cdef double x, y, dx, dy, cheb
    cdef cnp.int64_t top
    for i in range(h):
        y = (i + 0.5) / px_per_cell
        for j in range(w):
            x = (j + 0.5) / px_per_cell
            top = -1
            for b in range(n):
                if fabs(x - block_pos[b, 0]) < block_half and fabs(y - block_pos[b, 1]) < block_half:
                    if block_level[b] >= top:
                        top = block_level[b]
                        for c in range(3):
                            rgb[i, j, c] = <cnp.float32_t>block_color[b, c]
                        depth[i, j] = <cnp.float32_t>(table_depth - (block_level[b] + 1) * block_height)
            dx = fabs(x - gripper_x)
            dy = fabs(y - gripper_y)
            cheb = dx if dx > dy else dy
            if cheb < gripper_outer and (gripper_closed or cheb >= gripper_inner):
                for c in range(3):
                    rgb[i, j, c] = <cnp.float32_t>gripper_color[c]
    return rgb_arr, depth_arr


def nearest_codes(const double[:, ::1] x, const double[:, ::1] codes):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t k = codes.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    out_arr = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    cdef Py_ssize_t i, m, t
    cdef double acc, diff, best
    cdef cnp.int64_t best_idx
    for i in range(n):
        best_idx = 0
        best = 0.0
        for m in range(k):
            acc = 0.0
            for t in range(d):
                diff = x[i, t] - codes[m, t]
                acc = acc + diff * diff
            # strict comparison keeps the lowest index on ties
            if m == 0 or acc < best:
                best = acc
                best_idx = m
        out[i] = best_idx
    return out_arr
