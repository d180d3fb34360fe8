# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled image resampling kernels.

Mirrors :mod:`tarc._ext.resample_py` operation for operation so both
backends agree to rounding.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, cos, sin

cnp.import_array()


def crop_resize(const double[:, :, ::1] images, const double[:, ::1] boxes,
                const unsigned char[::1] flips, int out_h, int out_w):
    cdef Py_ssize_t n = images.shape[0], H = images.shape[1], W = images.shape[2]
    out = np.empty((n, out_h, out_w), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t s, i, j, jj, y0, x0, y1, x1
    cdef double top, left, bh, bw, sy, sx, wy, wx, v
    for s in range(n):
        top = boxes[s, 0]
        left = boxes[s, 1]
        bh = boxes[s, 2]
        bw = boxes[s, 3]
        for i in range(out_h):
            sy = top + (i + 0.5) * bh / out_h - 0.5
            if sy < 0.0:
                sy = 0.0
            if sy > H - 1:
                sy = H - 1
            y0 = <Py_ssize_t>floor(sy)
            wy = sy - y0
            y1 = y0 + 1 if y0 + 1 < H else H - 1
            for j in range(out_w):
                sx = left + (j + 0.5) * bw / out_w - 0.5
                if sx < 0.0:
                    sx = 0.0
                if sx > W - 1:
                    sx = W - 1
                x0 = <Py_ssize_t>floor(sx)
                wx = sx - x0
                x1 = x0 + 1 if x0 + 1 < W else W - 1
                v = ((1.0 - wy) * ((1.0 - wx) * images[s, y0, x0] + wx * images[s, y0, x1])
                     + wy * ((1.0 - wx) * images[s, y1, x0] + wx * images[s, y1, x1]))
                jj = out_w - 1 - j if flips[s] else j
                o[s, i, jj] = v
    return out


cdef inline double _pix(const double[:, :, ::1] im, Py_ssize_t s, Py_ssize_t y, Py_ssize_t x,
                        Py_ssize_t H, Py_ssize_t W) nogil:
    if y < 0 or y >= H or x < 0 or x >= W:
        return 0.0
    return im[s, y, x]


def rotate(const double[:, :, ::1] images, const double[::1] angles):
    cdef Py_ssize_t n = images.shape[0], H = images.shape[1], W = images.shape[2]
    out = np.empty((n, H, W), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t s, i, j, y0, x0
    cdef double c, sn, cy = (H - 1) / 2.0, cx = (W - 1) / 2.0, dy, dx, sy, sx, wy, wx
    for s in range(n):
        c = cos(angles[s])
        sn = sin(angles[s])
        for i in range(H):
            dy = i - cy
            for j in range(W):
                dx = j - cx
                sx = c * dx + sn * dy + cx
                sy = -sn * dx + c * dy + cy
                y0 = <Py_ssize_t>floor(sy)
                x0 = <Py_ssize_t>floor(sx)
                wy = sy - y0
                wx = sx - x0
                o[s, i, j] = ((1.0 - wy) * ((1.0 - wx) * _pix(images, s, y0, x0, H, W)
                                            + wx * _pix(images, s, y0, x0 + 1, H, W))
                              + wy * ((1.0 - wx) * _pix(images, s, y0 + 1, x0, H, W)
                                      + wx * _pix(images, s, y0 + 1, x0 + 1, H, W)))
    return out
