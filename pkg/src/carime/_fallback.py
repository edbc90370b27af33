"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``.

Same signatures, same arithmetic order where it matters (lerp form for the
bilinear blend, so zero residuals reproduce the input bit-exactly).
"""
import numpy as np


def bilinear_warp(img, residual):
    H, W, _ = img.shape
    jj, ii = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    px = np.clip(jj + residual[..., 0] * (0.5 * W), 0, W - 1)
    py = np.clip(ii + residual[..., 1] * (0.5 * H), 0, H - 1)
    x0 = np.floor(px).astype(np.intp)
    y0 = np.floor(py).astype(np.intp)
    wx = (px - x0)[..., None]
    wy = (py - y0)[..., None]
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    a = img[y0, x0]
    top = a + wx * (img[y0, x1] - a)
    c = img[y1, x0]
    bot = c + wx * (img[y1, x1] - c)
    return top + wy * (bot - top)


def tps_dense(ctrl, weights, affine, height, width, coord_scale, chunk_rows=32):
    out = np.empty((height, width, 2), dtype=np.float64)
    u = np.arange(width, dtype=np.float64) / coord_scale
    for start in range(0, height, chunk_rows):
        rows = np.arange(start, min(start + chunk_rows, height), dtype=np.float64) / coord_scale
        uu, vv = np.meshgrid(u, rows)
        pts = np.stack([uu.ravel(), vv.ravel()], axis=1)
        r2 = ((pts[:, None, :] - ctrl[None, :, :]) ** 2).sum(-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            kern = np.where(r2 > 0, r2 * np.log(r2), 0.0)
        vals = affine[0] + pts @ affine[1:] + kern @ weights
        out[start:start + len(rows)] = vals.reshape(len(rows), width, 2)
    return out


def mean_displacement_norm(residual, half_w, half_h):
    dx = residual[..., 0] * half_w
    dy = residual[..., 1] * half_h
    return float(np.sqrt(dx * dx + dy * dy).mean())
