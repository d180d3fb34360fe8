"""Pure-numpy resampling kernels (fallback for the compiled extension)."""

import numpy as np


def crop_resize(images, boxes, flips, out_h, out_w):
    """Bilinear resample of a per-sample box to ``out_h x out_w``, with optional mirror.

    ``boxes`` rows are ``(top, left, height, width)`` in source pixels.
    Source coordinates are clamped to the image, so edges replicate.
    """
    n, H, W = images.shape
    top, left, bh, bw = (boxes[:, k][:, None] for k in range(4))
    sy = top + (np.arange(out_h)[None, :] + 0.5) * bh / out_h - 0.5
    sx = left + (np.arange(out_w)[None, :] + 0.5) * bw / out_w - 0.5
    sy = np.clip(sy, 0.0, H - 1)
    sx = np.clip(sx, 0.0, W - 1)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    wy = (sy - y0)[:, :, None]
    wx = (sx - x0)[:, None, :]
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    s = np.arange(n)[:, None, None]
    a = images[s, y0[:, :, None], x0[:, None, :]]
    b = images[s, y0[:, :, None], x1[:, None, :]]
    c = images[s, y1[:, :, None], x0[:, None, :]]
    d = images[s, y1[:, :, None], x1[:, None, :]]
    out = (1.0 - wy) * ((1.0 - wx) * a + wx * b) + wy * ((1.0 - wx) * c + wx * d)
    flips = np.asarray(flips, dtype=bool)
    out[flips] = out[flips, :, ::-1]
    return np.ascontiguousarray(out)


def rotate(images, angles):
    """Bilinear rotation about the image centre; pixels from outside are zero."""
    n, H, W = images.shape
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    c = np.cos(angles)[:, None, None]
    sn = np.sin(angles)[:, None, None]
    dy = (np.arange(H) - cy)[None, :, None]
    dx = (np.arange(W) - cx)[None, None, :]
    sx = c * dx + sn * dy + cx
    sy = -sn * dx + c * dy + cy
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    wy = sy - y0
    wx = sx - x0
    padded = np.zeros((n, H + 2, W + 2))
    padded[:, 1:-1, 1:-1] = images
    s = np.arange(n)[:, None, None]

    def pix(y, x):
        inside = (y >= 0) & (y < H) & (x >= 0) & (x < W)
        return np.where(inside, padded[s, np.clip(y, -1, H) + 1, np.clip(x, -1, W) + 1], 0.0)

    return ((1.0 - wy) * ((1.0 - wx) * pix(y0, x0) + wx * pix(y0, x0 + 1))
            + wy * ((1.0 - wx) * pix(y0 + 1, x0) + wx * pix(y0 + 1, x0 + 1)))
