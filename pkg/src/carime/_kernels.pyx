# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for the geometry core.

Mirrors ``carime._fallback`` one-for-one; the two are checked against each
other in the test suite and timed against each other in ``benchmarks/``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, log, sqrt

cnp.import_array()


def bilinear_warp(const double[:, :, ::1] img, const double[:, :, ::1] residual):
    cdef Py_ssize_t H = img.shape[0], W = img.shape[1], C = img.shape[2]
    cdef Py_ssize_t i, j, c, x0, y0, x1, y1
    cdef double px, py, wx, wy, top, bot
    cdef double half_w = 0.5 * W, half_h = 0.5 * H
    out_arr = np.empty((H, W, C), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    with nogil:
        for i in range(H):
            for j in range(W):
                px = j + residual[i, j, 0] * half_w
                py = i + residual[i, j, 1] * half_h
                if px < 0:
                    px = 0
                elif px > W - 1:
                    px = W - 1
                if py < 0:
                    py = 0
                elif py > H - 1:
                    py = H - 1
                x0 = <Py_ssize_t>floor(px)
                y0 = <Py_ssize_t>floor(py)
                wx = px - x0
                wy = py - y0
                x1 = x0 + 1 if x0 < W - 1 else x0
                y1 = y0 + 1 if y0 < H - 1 else y0
                for c in range(C):
                    top = img[y0, x0, c] + wx * (img[y0, x1, c] - img[y0, x0, c])
                    bot = img[y1, x0, c] + wx * (img[y1, x1, c] - img[y1, x0, c])
                    out[i, j, c] = top + wy * (bot - top)
    return out_arr


def tps_dense(const double[:, ::1] ctrl, const double[:, ::1] weights,
              const double[:, ::1] affine, Py_ssize_t height, Py_ssize_t width,
              double coord_scale):
    cdef Py_ssize_t n = ctrl.shape[0]
    cdef Py_ssize_t i, j, k
    cdef double u, v, du, dv, r2, kern, sx, sy
    out_arr = np.empty((height, width, 2), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    with nogil:
        for i in range(height):
            v = i / coord_scale
            for j in range(width):
                u = j / coord_scale
                sx = affine[0, 0] + affine[1, 0] * u + affine[2, 0] * v
                sy = affine[0, 1] + affine[1, 1] * u + affine[2, 1] * v
                for k in range(n):
                    du = u - ctrl[k, 0]
                    dv = v - ctrl[k, 1]
                    r2 = du * du + dv * dv
                    if r2 > 0:
                        kern = r2 * log(r2)
                        sx = sx + weights[k, 0] * kern
                        sy = sy + weights[k, 1] * kern
                out[i, j, 0] = sx
                out[i, j, 1] = sy
    return out_arr


def mean_displacement_norm(const double[:, :, ::1] residual, double half_w, double half_h):
    cdef Py_ssize_t H = residual.shape[0], W = residual.shape[1]
    cdef Py_ssize_t i, j
    cdef double dx, dy, total = 0.0
    with nogil:
        for i in range(H):
            for j in range(W):
                dx = residual[i, j, 0] * half_w
                dy = residual[i, j, 1] * half_h
                total = total + sqrt(dx * dx + dy * dy)
    return total / (H * W)
