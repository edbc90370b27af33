"""Landmark geometry, deformation fields and differentiable warping.

Conventions used throughout the package:

* Pixel coordinates put pixel centers on integers, x rightward, y downward.
* A deformation field stores a *residual* in normalized units where the full
  image width (height) spans 2.0. The sampling location of output pixel
  ``(i, j)`` is ``(j + rx * W/2, i + ry * H/2)`` in source pixels.
* Warps are backward (gather) with bilinear interpolation and border clamp.
"""
import math
import warnings
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch

from . import kernels

NUM_LANDMARKS = 17

# Canonical 17-point ordering. "left"/"right" refer to image-left/right.
LANDMARK_NAMES = (
    "contour_left", "contour_chin", "contour_right", "contour_top",
    "left_brow_outer", "left_brow_inner", "right_brow_inner", "right_brow_outer",
    "left_eye_outer", "left_eye_inner", "right_eye_inner", "right_eye_outer",
    "nose_tip",
    "mouth_left", "mouth_upper", "mouth_right", "mouth_lower",
)
CONTOUR = (0, 1, 2, 3)
LEFT_EYE_CORNERS = (8, 9)
RIGHT_EYE_CORNERS = (10, 11)
# index i of a horizontally flipped face takes the point at FLIP_PERMUTATION[i]
FLIP_PERMUTATION = (2, 1, 0, 3, 7, 6, 5, 4, 11, 10, 9, 8, 12, 15, 14, 13, 16)

TPS_REGULARIZATION = 1e-6
TPS_CONDITION_LIMIT = 1e12


class GeometryError(ValueError):
    pass


class SingularTPSError(GeometryError):
    def __init__(self, cond):
        super().__init__(
            f"thin-plate-spline system is singular (condition number {cond:.3e}); "
            "landmarks are degenerate or collinear"
        )
        self.condition_number = cond


@dataclass
class LandmarkSet:
    points: np.ndarray
    image_size: tuple  # (W, H)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.points.shape != (NUM_LANDMARKS, 2):
            raise GeometryError(f"expected {NUM_LANDMARKS} landmarks, got {len(self.points)}")
        if not np.all(np.isfinite(self.points)):
            raise GeometryError("landmark coordinates must be finite")
        w, h = self.image_size
        self.image_size = (int(w), int(h))

    def inside(self):
        w, h = self.image_size
        p = self.points
        return bool(np.all((p[:, 0] >= 0) & (p[:, 0] < w) & (p[:, 1] >= 0) & (p[:, 1] < h)))

    def transformed(self, matrix, image_size):
        """Apply a 2×3 affine matrix to every point."""
        m = np.asarray(matrix, dtype=np.float64)
        pts = self.points @ m[:, :2].T + m[:, 2]
        return LandmarkSet(pts, image_size)

    def flipped(self):
        w, _ = self.image_size
        pts = self.points.copy()
        pts[:, 0] = w - 1 - pts[:, 0]
        return LandmarkSet(pts[list(FLIP_PERMUTATION)], self.image_size)


@dataclass
class DeformationField:
    residual: np.ndarray  # H×W×2, normalized units
    meta: dict = dc_field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.residual = np.asarray(self.residual, dtype=np.float64)
        if self.residual.ndim != 3 or self.residual.shape[2] != 2:
            raise GeometryError(f"residual must be H×W×2, got {self.residual.shape}")
        if not np.all(np.isfinite(self.residual)):
            raise GeometryError("deformation field contains non-finite values")

    @property
    def resolution(self):
        h, w, _ = self.residual.shape
        return (w, h)

    @classmethod
    def identity(cls, width, height):
        return cls(np.zeros((height, width, 2)))

    @classmethod
    def from_pixels(cls, displacement):
        d = np.asarray(displacement, dtype=np.float64)
        h, w, _ = d.shape
        return cls(d / np.array([w / 2.0, h / 2.0]))

    def to_pixels(self):
        w, h = self.resolution
        return self.residual * np.array([w / 2.0, h / 2.0])

    def sampling_map(self):
        """Absolute sampling locations in normalized [-1, 1] coordinates (clamped)."""
        w, h = self.resolution
        xs = (2 * np.arange(w) + 1) / w - 1
        ys = (2 * np.arange(h) + 1) / h - 1
        gx, gy = np.meshgrid(xs, ys)
        grid = np.stack([gx, gy], axis=-1) + self.residual
        return np.clip(grid, -1.0, 1.0)


def check_image(img, size=None):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise GeometryError(f"image must be H×W×3, got shape {img.shape}")
    if size is not None and (img.shape[1], img.shape[0]) != tuple(size):
        raise GeometryError(f"image is {img.shape[1]}×{img.shape[0]}, expected {size[0]}×{size[1]}")
    if not np.all(np.isfinite(img)):
        raise GeometryError("image contains non-finite values")
    return img


# -- landmark files -----------------------------------------------------------

def read_landmarks(path, image_size=None):
    """Parse a 17-line ``x y`` landmark file. A ``# size W H`` line sets the image size."""
    pts = []
    size = image_size
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if parts[:1] == ["size"] and size is None:
                size = (int(parts[1]), int(parts[2]))
            continue
        x, y = line.split()[:2]
        pts.append((float(x), float(y)))
    if size is None:
        raise GeometryError(f"{path}: image size unknown (no '# size' tag and none supplied)")
    return LandmarkSet(np.array(pts), size)


def write_landmarks(path, lm, tag_size=True):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# size {lm.image_size[0]} {lm.image_size[1]}"] if tag_size else []
    lines += [f"{x:.6f} {y:.6f}" for x, y in lm.points]
    path.write_text("\n".join(lines) + "\n")


# -- operations ----------------------------------------------------------------

def mean_landmarks(sets):
    """Pointwise mean of landmark sets (correctly rounded, so input order never matters)."""
    sets = list(sets)
    if not sets:
        raise GeometryError("mean_landmarks needs at least one landmark set")
    sizes = {s.image_size for s in sets}
    if len(sizes) != 1:
        raise GeometryError(f"landmark sets have mixed image sizes: {sorted(sizes)}")
    stack = np.stack([s.points for s in sets])
    n = len(sets)
    mean = np.empty((NUM_LANDMARKS, 2))
    for i in range(NUM_LANDMARKS):
        for k in range(2):
            mean[i, k] = math.fsum(stack[:, i, k]) / n
    return LandmarkSet(mean, sizes.pop())


def border_anchors(width, height):
    xm, ym = (width - 1) / 2.0, (height - 1) / 2.0
    xe, ye = width - 1.0, height - 1.0
    return np.array([
        [0, 0], [xe, 0], [0, ye], [xe, ye],
        [xm, 0], [xm, ye], [0, ym], [xe, ym],
    ], dtype=np.float64)


def _tps_kernel(r2):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(r2 > 0, r2 * np.log(r2), 0.0)


def solve_tps(ctrl, values, regularization=TPS_REGULARIZATION):
    """Solve for thin-plate-spline weights interpolating ``values`` at ``ctrl``.

    Returns ``(weights, affine)`` with shapes (n, d) and (3, d). The kernel is
    ``r² log r²``.
    """
    ctrl = np.asarray(ctrl, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    n = len(ctrl)
    r2 = ((ctrl[:, None, :] - ctrl[None, :, :]) ** 2).sum(-1)
    K = _tps_kernel(r2) + regularization * np.eye(n)
    P = np.hstack([np.ones((n, 1)), ctrl])
    A = np.zeros((n + 3, n + 3))
    A[:n, :n] = K
    A[:n, n:] = P
    A[n:, :n] = P.T
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > TPS_CONDITION_LIMIT:
        raise SingularTPSError(cond)
    rhs = np.zeros((n + 3, values.shape[1]))
    rhs[:n] = values
    sol = np.linalg.solve(A, rhs)
    return sol[:n], sol[n:]


def field_from_landmarks(src, dst, anchor_border=True, regularization=TPS_REGULARIZATION):
    """Dense backward field whose sampling map sends each ``dst`` landmark to its ``src`` landmark.

    Warping an image with ``src`` geometry by this field yields ``dst`` geometry.
    """
    if src.points.shape != dst.points.shape:
        raise GeometryError("src and dst landmark counts differ")
    if src.image_size != dst.image_size:
        raise GeometryError(f"resolution mismatch: {src.image_size} vs {dst.image_size}")
    w, h = dst.image_size
    ctrl = dst.points
    disp = src.points - dst.points
    if anchor_border:
        anchors = border_anchors(w, h)
        ctrl = np.vstack([ctrl, anchors])
        disp = np.vstack([disp, np.zeros_like(anchors)])
    scale = float(max(w, h))
    weights, affine = solve_tps(ctrl / scale, disp, regularization)
    dense = kernels.tps_dense(ctrl / scale, weights, affine, h, w, scale)
    return DeformationField.from_pixels(dense)


def warp_image(img, field):
    """Bilinear backward warp of an H×W×C array by ``field`` with border clamp."""
    img = np.asarray(img)
    if img.ndim != 3:
        raise GeometryError(f"image must be H×W×C, got {img.shape}")
    if (img.shape[1], img.shape[0]) != field.resolution:
        raise GeometryError(f"image {img.shape[1]}×{img.shape[0]} and field "
                            f"{field.resolution[0]}×{field.resolution[1]} differ in resolution")
    return kernels.bilinear_warp(img, field.residual)


def scale_field(field, s):
    s = float(s)
    if not math.isfinite(s):
        raise GeometryError("scale must be finite")
    if s == 1.0:
        return field
    return DeformationField(field.residual * s)


def resize_field(field, new_resolution):
    w, h = (int(v) for v in new_resolution)
    if w <= 0 or h <= 0:
        raise GeometryError(f"target resolution must be positive, got {new_resolution}")
    t = torch.from_numpy(field.residual).permute(2, 0, 1)[None]
    out = resize_residual(t, (h, w))
    return DeformationField(out[0].permute(1, 2, 0).numpy())


def exaggeration_degree(field):
    """Mean per-pixel displacement magnitude, in pixels."""
    w, h = field.resolution
    return kernels.mean_displacement_norm(field.residual, w / 2.0, h / 2.0)


# -- differentiable (torch) versions -------------------------------------------

def _axis_lerp_coords(n_out, n_in, dtype, device):
    pos = ((torch.arange(n_out, dtype=dtype, device=device) + 0.5) * (n_in / n_out) - 0.5)
    pos = pos.clamp(0, n_in - 1)
    i0 = pos.floor().long()
    i1 = (i0 + 1).clamp(max=n_in - 1)
    return i0, i1, pos - i0.to(dtype)


def resize_residual(t, size):
    """Separable bilinear resize of an (N, C, H, W) tensor to ``size=(H', W')``.

    Half-pixel-center alignment; constant inputs stay exactly constant.
    """
    n_h, n_w = size
    _, _, H, W = t.shape
    if (H, W) == (n_h, n_w):
        return t
    y0, y1, wy = _axis_lerp_coords(n_h, H, t.dtype, t.device)
    a = t[:, :, y0, :]
    t = a + wy[:, None] * (t[:, :, y1, :] - a)
    x0, x1, wx = _axis_lerp_coords(n_w, W, t.dtype, t.device)
    a = t[..., x0]
    return a + wx * (t[..., x1] - a)


def warp_torch(img, residual):
    """Differentiable bilinear backward warp.

    ``img`` is (N, C, H, W); ``residual`` is (N, 2, H, W) in normalized units.
    Gradients flow to both arguments; clamped samples get zero location gradient.
    """
    N, C, H, W = img.shape
    if residual.shape != (N, 2, H, W):
        raise GeometryError(f"field shape {tuple(residual.shape)} does not match image {(N, 2, H, W)}")
    dtype, device = img.dtype, img.device
    jj = torch.arange(W, dtype=dtype, device=device).view(1, 1, W)
    ii = torch.arange(H, dtype=dtype, device=device).view(1, H, 1)
    px = (jj + residual[:, 0] * (W / 2.0)).clamp(0, W - 1)
    py = (ii + residual[:, 1] * (H / 2.0)).clamp(0, H - 1)
    x0 = px.detach().floor().long()
    y0 = py.detach().floor().long()
    wx = (px - x0.to(dtype)).unsqueeze(1)
    wy = (py - y0.to(dtype)).unsqueeze(1)
    x1 = (x0 + 1).clamp(max=W - 1)
    y1 = (y0 + 1).clamp(max=H - 1)
    flat = img.reshape(N, C, H * W)

    def gather(y, x):
        idx = (y * W + x).reshape(N, 1, H * W).expand(N, C, H * W)
        return flat.gather(2, idx).reshape(N, C, H, W)

    a = gather(y0, x0)
    top = a + wx * (gather(y0, x1) - a)
    c = gather(y1, x0)
    bot = c + wx * (gather(y1, x1) - c)
    return top + wy * (bot - top)


def degree_torch(residual):
    """Per-sample exaggeration degree of an (N, 2, H, W) residual, in pixels."""
    _, _, H, W = residual.shape
    dx = residual[:, 0] * (W / 2.0)
    dy = residual[:, 1] * (H / 2.0)
    return torch.sqrt(dx * dx + dy * dy).mean(dim=(1, 2))


def field_to_tensor(field, dtype=torch.float32):
    return torch.from_numpy(np.ascontiguousarray(field.residual.transpose(2, 0, 1))).to(dtype)


def tensor_to_field(t):
    return DeformationField(t.detach().double().cpu().numpy().transpose(1, 2, 0))


def image_to_tensor(img, dtype=torch.float32):
    return torch.from_numpy(np.ascontiguousarray(np.asarray(img).transpose(2, 0, 1))).to(dtype)


def tensor_to_image(t):
    return t.detach().cpu().numpy().transpose(1, 2, 0)


def clamp_landmarks(lm):
    """Clamp points into ``[0, W-1] × [0, H-1]``, warning when anything moved."""
    w, h = lm.image_size
    pts = lm.points.copy()
    pts[:, 0] = np.clip(pts[:, 0], 0, w - 1)
    pts[:, 1] = np.clip(pts[:, 1], 0, h - 1)
    if not np.array_equal(pts, lm.points):
        warnings.warn("landmarks fell outside the image after transform and were clamped",
                      stacklevel=2)
    return LandmarkSet(pts, lm.image_size)
