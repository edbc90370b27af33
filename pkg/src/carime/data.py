"""Dataset indexing, face alignment, augmentation and pair sampling.

Dataset layout (raw or preprocessed)::

    <root>/Photo/<Identity>/<image>
    <root>/Caricature/<Identity>/<image>
    <root>/landmarks/<Photo|Caricature>/<Identity>/<image stem>.txt

Preprocessed roots additionally hold ``split.txt`` and ``mean_landmarks.txt``.
"""
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .geometry import (
    CONTOUR, LEFT_EYE_CORNERS, RIGHT_EYE_CORNERS, GeometryError, LandmarkSet,
    clamp_landmarks, mean_landmarks, read_landmarks, resize_residual, write_landmarks,
)

log = logging.getLogger(__name__)

CANONICAL_SIZE = 256
BOX_ENLARGE = 1.3
AUG_RESIZE = 288
SPLIT_SEED = 20210
DOMAINS = ("Photo", "Caricature")
IMAGE_EXTS = (".jpg", ".jpeg", ".png", ".bmp")


class DatasetError(RuntimeError):
    pass


# -- image io -----------------------------------------------------------------

def load_image(path):
    """Decode an image to float32 H×W×3 in [-1, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 127.5 - 1.0


def to_uint8(img):
    return np.clip(np.rint((np.asarray(img, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def save_image(path, img):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def resize_image(img, size):
    """Bilinear resize (half-pixel centers) of an H×W×C array to ``size=(W', H')``."""
    w, h = size
    if img.shape[:2] == (h, w):
        return img
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float64)).permute(2, 0, 1)[None]
    out = resize_residual(t, (h, w))[0].permute(1, 2, 0).numpy()
    return out.astype(img.dtype, copy=False)


def _scale_matrix(sx, sy):
    # pixel-center-preserving scale: x' = (x + 0.5) * s - 0.5
    return np.array([[sx, 0, 0.5 * sx - 0.5], [0, sy, 0.5 * sy - 0.5]])


# -- alignment ------------------------------------------------------------------

@dataclass
class Alignment:
    angle_deg: float  # rotation applied to level the eyes
    matrix: np.ndarray  # 2×3, raw pixel -> output pixel
    side: float  # enlarged square box side in (rotated) raw pixels
    box_center: tuple
    out_size: int


def eye_angle(lm):
    """Angle (degrees) of the line from the left-eye center to the right-eye center."""
    p = lm.points
    left = p[list(LEFT_EYE_CORNERS)].mean(axis=0)
    right = p[list(RIGHT_EYE_CORNERS)].mean(axis=0)
    d = right - left
    return math.degrees(math.atan2(d[1], d[0]))


def _rotation_about(center, angle_deg):
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    R = np.array([[c, -s], [s, c]])
    cx, cy = center
    t = np.array([cx, cy]) - R @ np.array([cx, cy])
    return np.hstack([R, t[:, None]])


def _compose(a, b):
    """Affine ``a ∘ b`` for 2×3 matrices."""
    A = np.vstack([a, [0, 0, 1]])
    B = np.vstack([b, [0, 0, 1]])
    return (A @ B)[:2]


def alignment_transform(lm, out_size=CANONICAL_SIZE, enlarge=BOX_ENLARGE):
    w, h = lm.image_size
    angle = -eye_angle(lm)
    rot = _rotation_about(((w - 1) / 2.0, (h - 1) / 2.0), angle)
    rotated = lm.points @ rot[:, :2].T + rot[:, 2]
    contour = rotated[list(CONTOUR)]
    lo, hi = contour.min(axis=0), contour.max(axis=0)
    box_w, box_h = hi - lo
    side = enlarge * max(box_w, box_h)
    if side <= 0:
        raise GeometryError("face contour bounding box has zero area")
    center = (lo + hi) / 2.0
    k = out_size / side
    crop = np.array([[k, 0, out_size / 2.0 - 0.5 - k * center[0]],
                     [0, k, out_size / 2.0 - 0.5 - k * center[1]]])
    return Alignment(angle, _compose(crop, rot), side, tuple(center), out_size)


def apply_affine(img, matrix, out_size):
    """Resample ``img`` through a 2×3 forward affine (bilinear, edge-replicated border)."""
    w, h = out_size
    inv = np.linalg.inv(np.vstack([matrix, [0, 0, 1]]))[:2]
    jj, ii = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    sx = inv[0, 0] * jj + inv[0, 1] * ii + inv[0, 2]
    sy = inv[1, 0] * jj + inv[1, 1] * ii + inv[1, 2]
    chans = [ndimage.map_coordinates(img[..., c].astype(np.float64), [sy, sx], order=1, mode="nearest")
             for c in range(img.shape[2])]
    return np.stack(chans, axis=-1).astype(img.dtype, copy=False)


def align_and_crop(img, lm, out_size=CANONICAL_SIZE, enlarge=BOX_ENLARGE):
    """Level the eyes, crop the enlarged square face box and resize to ``out_size``."""
    if (img.shape[1], img.shape[0]) != lm.image_size:
        raise GeometryError(f"landmarks are for {lm.image_size}, image is {img.shape[1]}×{img.shape[0]}")
    al = alignment_transform(lm, out_size, enlarge)
    out = apply_affine(img, al.matrix, (out_size, out_size))
    out_lm = clamp_landmarks(lm.transformed(al.matrix, (out_size, out_size)))
    return out, out_lm


# -- pairs & augmentation ---------------------------------------------------------

@dataclass
class SamplePair:
    photo: np.ndarray
    caricature: np.ndarray
    photo_landmarks: LandmarkSet
    cari_landmarks: LandmarkSet
    same_identity: bool
    photo_id: str = ""
    cari_id: str = ""


def flip_image(img, lm):
    return img[:, ::-1].copy(), lm.flipped()


def resize_crop(img, lm, big, offset):
    """Resize to ``big``×``big`` then crop back to the original size at ``offset=(ox, oy)``."""
    h, w = img.shape[:2]
    ox, oy = offset
    up = resize_image(img, (big, big))
    m = _scale_matrix(big / w, big / h)
    m[:, 2] -= (ox, oy)
    return up[oy:oy + h, ox:ox + w].copy(), lm.transformed(m, (w, h))


def augment_one(img, lm, rng, p_flip=0.5, p_crop=0.5):
    h, w = img.shape[:2]
    if rng.random() < p_flip:
        img, lm = flip_image(img, lm)
    if rng.random() < p_crop:
        big = int(round(w * AUG_RESIZE / CANONICAL_SIZE))
        ox, oy = (int(v) for v in rng.integers(0, big - w + 1, size=2))
        img, lm = resize_crop(img, lm, big, (ox, oy))
    return img, lm


def augment(pair, rng, p_flip=0.5, p_crop=0.5):
    """Random flip and resize-crop, drawn independently for photo and caricature."""
    photo, plm = augment_one(pair.photo, pair.photo_landmarks, rng, p_flip, p_crop)
    cari, clm = augment_one(pair.caricature, pair.cari_landmarks, rng, p_flip, p_crop)
    return SamplePair(photo, cari, plm, clm, pair.same_identity, pair.photo_id, pair.cari_id)


# -- index ----------------------------------------------------------------------------

@dataclass
class Entry:
    image: Path
    landmarks: Path


@dataclass
class Identity:
    name: str
    photos: list = field(default_factory=list)
    caricatures: list = field(default_factory=list)


@dataclass
class DatasetIndex:
    root: Path
    identities: list
    split: str = "all"

    @property
    def num_photos(self):
        return sum(len(i.photos) for i in self.identities)

    @property
    def num_caricatures(self):
        return sum(len(i.caricatures) for i in self.identities)

    def names(self):
        return [i.name for i in self.identities]

    def caricature_entries(self):
        return [e for i in self.identities for e in i.caricatures]

    def photo_entries(self):
        return [(i.name, e) for i in self.identities for e in i.photos]


def landmark_path(root, domain, identity, image_name):
    return Path(root) / "landmarks" / domain / identity / (Path(image_name).stem + ".txt")


def build_index(root, split=None, split_file=None, validate=True):
    """Scan a dataset root. ``split`` selects 'train'/'test' identities from the split file."""
    root = Path(root)
    if not (root / "Photo").is_dir() and not (root / "Caricature").is_dir():
        raise DatasetError(f"{root}: no Photo/ or Caricature/ directory")
    ids = {}
    for domain in DOMAINS:
        ddir = root / domain
        if not ddir.is_dir():
            continue
        for idir in sorted(p for p in ddir.iterdir() if p.is_dir()):
            ident = ids.setdefault(idir.name, Identity(idir.name))
            for img in sorted(p for p in idir.iterdir() if p.suffix.lower() in IMAGE_EXTS):
                lmp = landmark_path(root, domain, idir.name, img.name)
                if not lmp.exists():
                    raise DatasetError(f"missing landmark file {lmp}")
                if validate:
                    _image_landmarks(img, lmp)
                target = ident.photos if domain == "Photo" else ident.caricatures
                target.append(Entry(img, lmp))
    identities = [ids[k] for k in sorted(ids)]
    if split is not None:
        split_file = Path(split_file) if split_file else root / "split.txt"
        wanted = set(read_split(split_file)[split])
        identities = [i for i in identities if i.name in wanted]
    return DatasetIndex(root, identities, split or "all")


def _image_landmarks(img_path, lm_path):
    try:
        return read_landmarks(lm_path)
    except GeometryError as err:
        if "image size unknown" not in str(err):
            raise DatasetError(f"{lm_path}: {err}") from err
    with Image.open(img_path) as im:
        size = im.size
    try:
        return read_landmarks(lm_path, size)
    except GeometryError as err:
        raise DatasetError(f"{lm_path}: {err}") from err


def make_split(names, seed=SPLIT_SEED, n_train=None):
    names = sorted(names)
    n_train = len(names) // 2 if n_train is None else n_train
    shuffled = names[:]
    random.Random(seed).shuffle(shuffled)
    return {"train": sorted(shuffled[:n_train]), "test": sorted(shuffled[n_train:])}


def write_split(path, split):
    lines = []
    for part in ("train", "test"):
        lines.append(f"{part}:")
        lines += split[part]
    Path(path).write_text("\n".join(lines) + "\n")


def read_split(path):
    out = {"train": [], "test": []}
    current = None
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.endswith(":") and line[:-1] in out:
            current = line[:-1]
        elif current is None:
            raise DatasetError(f"{path}: identity listed before a train:/test: header")
        else:
            out[current].append(line)
    overlap = set(out["train"]) & set(out["test"])
    if overlap:
        raise DatasetError(f"{path}: identities in both train and test: {sorted(overlap)[:5]}")
    return out


def load_entry(entry):
    img = load_image(entry.image)
    lm = _image_landmarks(entry.image, entry.landmarks)
    if lm.image_size != (img.shape[1], img.shape[0]):
        raise DatasetError(f"{entry.landmarks}: size tag {lm.image_size} does not match image")
    return img, lm


def sample_pair(index, policy, rng, load=True):
    """Draw a photo/caricature pair: identity uniformly, then an entry uniformly."""
    if policy == "same_identity":
        pool = [i for i in index.identities if i.photos and i.caricatures]
        if not pool:
            raise DatasetError("no identity has both a photo and a caricature")
        pid = cid = pool[rng.integers(len(pool))]
    elif policy == "random":
        p_pool = [i for i in index.identities if i.photos]
        c_pool = [i for i in index.identities if i.caricatures]
        if not p_pool or not c_pool:
            raise DatasetError("index needs at least one photo and one caricature")
        pid = p_pool[rng.integers(len(p_pool))]
        cid = c_pool[rng.integers(len(c_pool))]
    else:
        raise ValueError(f"unknown pairing policy {policy!r}")
    pe = pid.photos[rng.integers(len(pid.photos))]
    ce = cid.caricatures[rng.integers(len(cid.caricatures))]
    same = pid.name == cid.name
    if not load:
        return pe, ce, same
    photo, plm = load_entry(pe)
    cari, clm = load_entry(ce)
    return SamplePair(photo, cari, plm, clm, same, pid.name, cid.name)


# -- preprocessing ---------------------------------------------------------------------

def preprocess(raw_root, out_root, size=CANONICAL_SIZE, seed=SPLIT_SEED, n_train=None):
    """Align/crop every image, mirror the layout under ``out_root``, write split and mean landmarks."""
    index = build_index(raw_root)
    out_root = Path(out_root)
    counts = {"Photo": 0, "Caricature": 0, "failed": 0}
    for ident in index.identities:
        for domain, entries in (("Photo", ident.photos), ("Caricature", ident.caricatures)):
            for e in entries:
                try:
                    img, lm = load_entry(e)
                    out, out_lm = align_and_crop(img, lm, size)
                except (GeometryError, DatasetError, OSError) as err:
                    log.warning("skipping %s: %s", e.image, err)
                    counts["failed"] += 1
                    continue
                name = Path(e.image).stem + ".png"
                save_image(out_root / domain / ident.name / name, out)
                write_landmarks(landmark_path(out_root, domain, ident.name, name), out_lm)
                counts[domain] += 1
    split = make_split(index.names(), seed, n_train)
    write_split(out_root / "split.txt", split)
    train = build_index(out_root, split="train")
    cari = [read_landmarks(e.landmarks) for e in train.caricature_entries()]
    if cari:
        write_landmarks(out_root / "mean_landmarks.txt", mean_landmarks(cari))
    counts["identities"] = len(index.identities)
    return counts


def load_mean_landmarks(root):
    """Persisted mean caricature landmarks, or recomputed from training caricatures."""
    root = Path(root)
    path = root / "mean_landmarks.txt"
    if path.exists():
        return read_landmarks(path)
    split = "train" if (root / "split.txt").exists() else None
    index = build_index(root, split=split)
    return mean_landmarks(read_landmarks(e.landmarks) for e in index.caricature_entries())
