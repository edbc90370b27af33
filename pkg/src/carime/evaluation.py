"""Exaggeration-degree statistics, FID, identity rank-1 and runtime measurement."""
import base64
import csv
import io
import json
import logging
import os
import platform
import time
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import to_uint8
from .geometry import exaggeration_degree, scale_field
from .warper import photo_field, sample_exaggeration

log = logging.getLogger(__name__)


class EvaluationError(RuntimeError):
    pass


# -- warp degree -------------------------------------------------------------------------

def mean_degree(fields):
    fields = list(fields)
    if not fields:
        raise EvaluationError("mean_degree needs at least one field")
    return float(np.mean([exaggeration_degree(f) for f in fields]))


@dataclass
class DegreeReport:
    degrees: list
    scale: float
    method: str = "carime"
    names: list = field(default_factory=list)

    @property
    def mean(self):
        return float(np.mean(self.degrees))

    def write_csv(self, path):
        names = self.names or [str(i) for i in range(len(self.degrees))]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image", "degree", "scale", "method"])
            for n, d in zip(names, self.degrees):
                w.writerow([n, f"{d:.6f}", self.scale, self.method])

    def summary(self):
        return (f"method: {self.method}\nscale: {self.scale}\nimages: {len(self.degrees)}\n"
                f"mean degree: {self.mean:.4f}\nmin/max: {min(self.degrees):.4f}/{max(self.degrees):.4f}\n")


def warp_codes(n, dim, seed):
    """Deterministic per-photo warp codes: code ``i`` depends only on ``(seed, i)``."""
    return [np.random.default_rng([seed, i]).standard_normal(dim) for i in range(n)]


def photo_fields(photos, model, codes):
    return [photo_field(model, p, z) for p, z in zip(photos, codes)]


def degree_report(photos, model, scale=1.0, seed=0, names=None, method="carime"):
    codes = warp_codes(len(photos), model.code_dim_w, seed)
    fields = photo_fields(photos, model, codes)
    degrees = [exaggeration_degree(scale_field(f, scale)) for f in fields]
    return DegreeReport(degrees, float(scale), method, list(names or []))


def scale_for_degree(photos, model, target, seed=0, fields=None):
    """Scale factor giving mean warp degree ``target`` over ``photos``.

    Degree is absolutely homogeneous in the scale, so the mean is linear in it
    and the answer is ``target / mean_degree(1)``; it is re-checked to 1%.
    """
    if target <= 0:
        raise EvaluationError("target degree must be positive")
    if fields is None:
        fields = photo_fields(photos, model, warp_codes(len(photos), model.code_dim_w, seed))
    base = mean_degree(fields)
    if base == 0:
        raise EvaluationError("warper produces zero displacement at scale 1; cannot reach target")
    s = target / base
    got = mean_degree(scale_field(f, s) for f in fields)
    if abs(got - target) > 0.01 * target:
        raise EvaluationError(f"scale {s:.6g} reaches degree {got:.6g}, not {target:.6g}")
    return s


# -- FID ----------------------------------------------------------------------------------

def _psd_sqrt(mat, tol):
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    limit = -tol * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < limit:
        raise EvaluationError(f"matrix is not positive semi-definite (eigenvalue {vals.min():.3e})")
    vals = np.clip(vals, 0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T, vals


def fid(features_a, features_b, tol=1e-6):
    """Fréchet distance between Gaussian fits of two feature sets (unbiased covariance)."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise EvaluationError("feature sets must be 2-D (samples × dims)")
    if a.shape[1] != b.shape[1]:
        raise EvaluationError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    if len(a) < 2 or len(b) < 2:
        raise EvaluationError("each feature set needs at least 2 vectors")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False, ddof=1))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False, ddof=1))
    sqrt_a, _ = _psd_sqrt(cov_a, tol)
    _psd_sqrt(cov_b, tol)
    _, mid = _psd_sqrt(sqrt_a @ cov_b @ sqrt_a, tol)
    diff = mu_a - mu_b
    value = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * np.sqrt(mid).sum()
    return float(max(value, 0.0))


def pixel_features(images, size=16):
    """Stand-in feature extractor: downsampled pixels. Not comparable to Inception FID."""
    out = []
    for img in images:
        im = Image.fromarray(to_uint8(img)).resize((size, size), Image.BILINEAR)
        out.append(np.asarray(im, dtype=np.float64).ravel() / 255.0)
    return np.stack(out)


# -- identity embeddings --------------------------------------------------------------------

class EmbeddingError(RuntimeError):
    def __init__(self, failed, last_error):
        super().__init__(f"embedding failed for items {failed} after retries: {last_error}")
        self.failed = failed


def identity_embedding_hook(images, endpoint, batch_size=16, retries=3, backoff=0.5, sleep=time.sleep):
    """Run ``endpoint`` (batch of H×W×3 arrays -> vectors) with retries; vectors are returned untouched."""
    images = list(images)
    out = [None] * len(images)
    failed, last = [], None
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        for attempt in range(retries + 1):
            try:
                vecs = endpoint(chunk)
                if len(vecs) != len(chunk):
                    raise EvaluationError(f"endpoint returned {len(vecs)} vectors for {len(chunk)} images")
                out[start:start + len(chunk)] = vecs
                break
            except Exception as err:  # endpoint contract: any failure is retried
                last = err
                if attempt < retries:
                    sleep(backoff * 2 ** attempt)
        else:
            failed.extend(range(start, start + len(chunk)))
    if failed:
        raise EmbeddingError(failed, last)
    return out


def encode_png_b64(img):
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class HttpEmbeddingClient:
    """POST ``{"images": [base64 PNG, ...]}``, expect ``{"embeddings": [[float, ...], ...]}``."""

    def __init__(self, url, timeout=30.0):
        self.url, self.timeout = url, timeout

    def __call__(self, images):
        body = json.dumps({"images": [encode_png_b64(i) for i in images]}).encode()
        req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"})
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            payload = json.loads(resp.read())
        return [np.asarray(v, dtype=np.float64) for v in payload["embeddings"]]


def rank1_accuracy(gallery, gallery_ids, probes, probe_ids):
    """Fraction of probes whose cosine-nearest gallery vector has the same identity."""
    g = np.asarray(gallery, dtype=np.float64)
    p = np.asarray(probes, dtype=np.float64)
    g = g / np.linalg.norm(g, axis=1, keepdims=True)
    p = p / np.linalg.norm(p, axis=1, keepdims=True)
    nearest = np.argmax(p @ g.T, axis=1)
    hits = np.asarray(gallery_ids)[nearest] == np.asarray(probe_ids)
    return float(hits.mean())


# -- runtime ----------------------------------------------------------------------------------

@dataclass
class BenchmarkResult:
    mean_seconds: float
    total_seconds: float
    n_images: int
    repeats: list
    hardware: str


def hardware_descriptor():
    return (f"{platform.processor() or platform.machine()}; {os.cpu_count()} cpus; "
            f"torch {torch.__version__} threads={torch.get_num_threads()}")


def runtime_benchmark(photos, model, warmup=2, repeats=3, seed=0):
    """Mean wall-clock seconds per image for the warping path (warm-up excluded)."""
    photos = list(photos)
    if not photos:
        raise EvaluationError("no photos to time")
    codes = warp_codes(len(photos), model.code_dim_w, seed)
    for i in range(min(warmup, len(photos))):
        sample_exaggeration(photos[i], model, codes[i])
    per_repeat = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for p, z in zip(photos, codes):
            sample_exaggeration(p, model, z)
        per_repeat.append((time.perf_counter() - t0) / len(photos))
    total = sum(per_repeat) * len(photos)
    return BenchmarkResult(total / (len(photos) * repeats), total, len(photos), per_repeat,
                           hardware_descriptor())


def write_text(path, text):
    Path(path).write_text(text)
