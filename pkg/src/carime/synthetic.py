"""Procedural toy faces in the dataset layout, for tests and desk-scale demos.

Photos and caricatures are cartoon renderings of 17-point landmark sets; the
caricatures exaggerate each identity's deviation from the template face and
use a different colour/line style, so both the warper and the styler have a
real (if small) signal to learn.
"""
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .geometry import NUM_LANDMARKS

# face-unit coordinates, center (0, 0), half-width 1, y downward
TEMPLATE = np.array([
    [-1.0, 0.0], [0.0, 1.3], [1.0, 0.0], [0.0, -1.2],
    [-0.75, -0.45], [-0.2, -0.5], [0.2, -0.5], [0.75, -0.45],
    [-0.65, -0.2], [-0.25, -0.2], [0.25, -0.2], [0.65, -0.2],
    [0.0, 0.3],
    [-0.35, 0.7], [0.0, 0.62], [0.35, 0.7], [0.0, 0.82],
])

PHOTO_STYLE = dict(bg=(200, 210, 220), skin=(225, 185, 160), line=(70, 50, 40), width=1)
CARI_STYLES = (
    dict(bg=(250, 245, 230), skin=(250, 215, 170), line=(10, 10, 10), width=3),
    dict(bg=(180, 220, 190), skin=(240, 200, 200), line=(60, 20, 80), width=2),
)


def template_face(center, half_width, angle_deg=0.0, shape=TEMPLATE):
    a = np.radians(angle_deg)
    R = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    return shape @ R.T * half_width + np.asarray(center, dtype=np.float64)


def _contour_polygon(pts, n=48):
    c = pts[:4].mean(axis=0)
    d = pts[:4] - c
    ang = np.arctan2(d[:, 1], d[:, 0])
    rad = np.hypot(d[:, 0], d[:, 1])
    order = np.argsort(ang)
    ang, rad = ang[order], rad[order]
    ang = np.concatenate([ang - 2 * np.pi, ang, ang + 2 * np.pi])
    rad = np.tile(rad, 3)
    t = np.linspace(-np.pi, np.pi, n, endpoint=False)
    r = np.interp(t, ang, rad)
    return [tuple(p) for p in np.stack([c[0] + r * np.cos(t), c[1] + r * np.sin(t)], axis=1)]


def render_face(points, size, style):
    """Draw a cartoon face whose features sit on ``points`` (17×2, pixels)."""
    w, h = size
    im = Image.new("RGB", (w, h), style["bg"])
    dr = ImageDraw.Draw(im)
    lw = style["width"]
    dr.polygon(_contour_polygon(points), fill=style["skin"], outline=style["line"], width=lw)
    for a, b in ((4, 5), (6, 7)):
        dr.line([tuple(points[a]), tuple(points[b])], fill=style["line"], width=lw + 1)
    for a, b in ((8, 9), (10, 11)):
        p, q = points[a], points[b]
        cx, cy = (p + q) / 2
        rx = max(abs(q[0] - p[0]) / 2, 1.0)
        ry = max(rx * 0.45, 1.0)
        dr.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=(255, 255, 255), outline=style["line"], width=lw)
        dr.ellipse([cx - ry, cy - ry, cx + ry, cy + ry], fill=style["line"])
    nx, ny = points[12]
    dr.ellipse([nx - 2, ny - 2, nx + 2, ny + 2], fill=style["line"])
    dr.polygon([tuple(points[i]) for i in (13, 14, 15, 16)], fill=(170, 60, 60), outline=style["line"])
    return np.asarray(im)


def make_identity_shapes(n, rng, spread=0.08):
    return [TEMPLATE + rng.normal(0, spread, TEMPLATE.shape) for _ in range(n)]


def exaggerate(shape, rng, strength=(1.0, 2.5)):
    k = rng.uniform(*strength)
    return TEMPLATE + (shape - TEMPLATE) * (1 + k) + rng.normal(0, 0.02, shape.shape)


def make_synthetic_dataset(root, n_identities=4, photos_per_id=3, caris_per_id=3,
                           image_size=(160, 176), max_angle=15.0, seed=0):
    """Write a raw dataset (images + untagged landmark files) under ``root``."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    shapes = make_identity_shapes(n_identities, rng)
    w, h = image_size
    for k, shape in enumerate(shapes):
        name = f"Identity_{k:03d}"
        for domain, count in (("Photo", photos_per_id), ("Caricature", caris_per_id)):
            for j in range(count):
                if domain == "Photo":
                    pts_unit = shape + rng.normal(0, 0.015, shape.shape)
                    style = PHOTO_STYLE
                else:
                    pts_unit = exaggerate(shape, rng)
                    style = CARI_STYLES[j % len(CARI_STYLES)]
                center = (w / 2 + rng.uniform(-6, 6), h / 2 + rng.uniform(-6, 6))
                pts = template_face(center, w * 0.22, rng.uniform(-max_angle, max_angle), pts_unit)
                img = render_face(pts, (w, h), style)
                stem = f"{domain[0]}{j:05d}"
                path = root / domain / name / f"{stem}.png"
                path.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(img).save(path)
                lm_path = root / "landmarks" / domain / name / f"{stem}.txt"
                lm_path.parent.mkdir(parents=True, exist_ok=True)
                assert len(pts) == NUM_LANDMARKS
                lm_path.write_text("".join(f"{x:.4f} {y:.4f}\n" for x, y in pts))
    return root
