"""Command-line entry point: preprocess, train, generate, interpolate, evaluate."""
import argparse
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import data as dp
from .evaluation import (
    EvaluationError, HttpEmbeddingClient, degree_report, fid, identity_embedding_hook,
    pixel_features, rank1_accuracy, runtime_benchmark, scale_for_degree, write_text,
)
from .geometry import (
    GeometryError, LandmarkSet, field_from_landmarks, field_to_tensor, read_landmarks, resize_residual,
    scale_field, warp_image,
)
from .styler import encode_style, load_style_code, stylize
from .trainer import CheckpointError, load_config, model_from_checkpoint, parse_overrides, run_training
from .warper import TrainingDiverged, photo_field

log = logging.getLogger("carime")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_DATA, EXIT_CHECKPOINT, EXIT_DIVERGED = 0, 1, 2, 3, 4, 5


def cache_dir():
    return Path(os.environ.get("CARIME_CACHE", "carime_cache"))


# -- generation --------------------------------------------------------------------------

@dataclass
class GenerationRequest:
    inputs: list
    out: Path
    checkpoint_warper: Path
    checkpoint_styler: Path = None  # None: skip texture rendering
    num_samples: int = 1
    seed: int = 0
    scale: float = 1.0
    warp_ref: Path = None  # caricature landmark file
    style_ref: Path = None  # reference caricature image
    style_code: Path = None  # text file with one style vector
    grid: bool = False

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")


def load_photo(path, size):
    """Read a photo; align it when a sibling ``<stem>.txt`` landmark file exists."""
    path = Path(path)
    img = dp.load_image(path)
    lm_path = path.with_suffix(".txt")
    if lm_path.exists():
        lm = read_landmarks(lm_path, (img.shape[1], img.shape[0]))
        img, _ = dp.align_and_crop(img, lm, size)
        return img
    return dp.resize_image(img, (size, size))


def sample_codes(seed, photo_index, sample_index, dim_w, dim_s):
    rng = np.random.default_rng([seed, photo_index, sample_index])
    return rng.standard_normal(dim_w), rng.standard_normal(dim_s)


def reference_warp_code(warper, lm_path):
    """Encode the mean->reference deformation of a caricature's landmarks."""
    if warper.mean_landmarks is None:
        raise CheckpointError("warper checkpoint carries no mean landmarks; cannot encode references")
    size = warper.image_size
    ref = read_landmarks(lm_path)
    if ref.image_size != (size, size):
        sx, sy = size / ref.image_size[0], size / ref.image_size[1]
        ref = LandmarkSet(ref.points * (sx, sy), (size, size))
    mean = LandmarkSet(warper.mean_landmarks, (size, size))
    f = field_from_landmarks(mean, ref)
    dtype = next(warper.parameters()).dtype
    t = field_to_tensor(f, dtype)[None]
    half = warper.field_size
    with torch.no_grad():
        warper.eval()
        return warper.encode_warp(resize_residual(t, (half, half)))[0].double().numpy()


def render(photo, warper, styler, z_w, z_s, scale):
    warped = warp_image(photo, scale_field(photo_field(warper, photo, z_w), scale))
    if styler is None:
        return warped
    return stylize(warped, z_s, styler)


def cmd_generate(req):
    warper, _ = model_from_checkpoint(req.checkpoint_warper, "warper")
    styler = None
    if req.checkpoint_styler is not None:
        styler, _ = model_from_checkpoint(req.checkpoint_styler, "styler")
    style_dim = styler.style_dim if styler is not None else 8
    fixed_w = reference_warp_code(warper, req.warp_ref) if req.warp_ref else None
    fixed_s = None
    if req.style_code:
        fixed_s = load_style_code(req.style_code)
    elif req.style_ref:
        if styler is None:
            raise ValueError("--style-ref needs a styler checkpoint")
        fixed_s = encode_style(load_photo(req.style_ref, warper.image_size), styler)
    out = Path(req.out)
    out.mkdir(parents=True, exist_ok=True)
    written, rows, errors = [], [], []
    for i, path in enumerate(req.inputs):
        try:
            photo = load_photo(path, warper.image_size)
        except (OSError, GeometryError, ValueError) as err:
            log.error("skipping %s: %s", path, err)
            errors.append(str(path))
            continue
        row = []
        for k in range(req.num_samples):
            z_w, z_s = sample_codes(req.seed, i, k, warper.code_dim_w, style_dim)
            z_w = z_w if fixed_w is None else fixed_w
            z_s = z_s if fixed_s is None else fixed_s
            img = render(photo, warper, styler, z_w, z_s, req.scale)
            name = out / f"{Path(path).stem}_w{k}_s{k}_scale{req.scale:g}.png"
            dp.save_image(name, img)
            written.append(name)
            row.append(img)
        rows.append(row)
    if req.grid and rows:
        dp.save_image(out / "grid.png", np.vstack([np.hstack(r) for r in rows]))
    return written, errors


def lerp_codes(a, b, steps):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return [a + (b - a) * (t / (steps - 1)) for t in range(steps)]


def cmd_interpolate(photo_path, checkpoint_warper, checkpoint_styler, steps, out, seed=0,
                    warp_codes=None, style_codes=None):
    """Grid where row r shares style interpolant r and column c shares warp interpolant c."""
    if steps < 2:
        raise ValueError("steps must be >= 2")
    warper, _ = model_from_checkpoint(checkpoint_warper, "warper")
    styler = None if checkpoint_styler is None else model_from_checkpoint(checkpoint_styler, "styler")[0]
    style_dim = styler.style_dim if styler is not None else 8
    rng = np.random.default_rng(seed)
    if warp_codes is None:
        warp_codes = rng.standard_normal((2, warper.code_dim_w))
    if style_codes is None:
        style_codes = rng.standard_normal((2, style_dim))
    ws = lerp_codes(warp_codes[0], warp_codes[1], steps)
    ss = lerp_codes(style_codes[0], style_codes[1], steps)
    photo = load_photo(photo_path, warper.image_size)
    fields = [photo_field(warper, photo, z) for z in ws]
    warped = [warp_image(photo, f) for f in fields]
    grid = np.vstack([
        np.hstack([w if styler is None else stylize(w, z_s, styler) for w in warped])
        for z_s in ss
    ])
    out = Path(out)
    dp.save_image(out, grid)
    return out, grid


# -- argument parsing --------------------------------------------------------------------

def _kv(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k, v


def build_parser():
    p = argparse.ArgumentParser(prog="carime", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    pre = sub.add_parser("preprocess", help="align, crop and resize a raw dataset")
    pre.add_argument("--data-root", required=True, type=Path)
    pre.add_argument("--out", type=Path, default=None, help="defaults to $CARIME_CACHE")
    pre.add_argument("--size", type=int, default=dp.CANONICAL_SIZE)
    pre.add_argument("--seed", type=int, default=dp.SPLIT_SEED, help="identity split seed")
    pre.add_argument("--n-train", type=int, default=None)

    tr = sub.add_parser("train", help="train the warper or the styler")
    tr.add_argument("--module", required=True, choices=("warper", "styler"))
    tr.add_argument("--config", type=Path, default=None)
    tr.add_argument("--data-root", type=Path, default=None, help="defaults to $CARIME_CACHE")
    tr.add_argument("--out", type=Path, required=True)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--resume", type=Path, default=None)
    tr.add_argument("--force", action="store_true", help="resume despite a config-hash mismatch")
    tr.add_argument("--until", type=int, default=None, help="stop after this many total iterations")
    tr.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    tr.add_argument("--set", type=_kv, action="append", default=[], metavar="KEY=VALUE")

    ge = sub.add_parser("generate", help="produce caricatures for input photos")
    ge.add_argument("inputs", nargs="+", type=Path)
    ge.add_argument("--out", type=Path, required=True)
    ge.add_argument("--checkpoint-warper", type=Path, required=True)
    ge.add_argument("--checkpoint-styler", default=None,
                    help="styler checkpoint, or 'none' to output the warped photo")
    ge.add_argument("--num-samples", type=int, default=1)
    ge.add_argument("--seed", type=int, default=0)
    ge.add_argument("--scale", type=float, default=1.0)
    ge.add_argument("--warp-ref", type=Path, default=None, help="reference caricature landmark file")
    ge.add_argument("--style-ref", type=Path, default=None, help="reference caricature image")
    ge.add_argument("--style-code", type=Path, default=None, help="text file holding a style vector")
    ge.add_argument("--grid", action="store_true")
    ge.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True)

    it = sub.add_parser("interpolate", help="style × exaggeration interpolation grid")
    it.add_argument("photo", type=Path)
    it.add_argument("--out", type=Path, required=True)
    it.add_argument("--checkpoint-warper", type=Path, required=True)
    it.add_argument("--checkpoint-styler", default=None)
    it.add_argument("--steps", type=int, default=5)
    it.add_argument("--seed", type=int, default=0)
    it.add_argument("--warp-codes", type=Path, default=None, help="text file, two rows")
    it.add_argument("--style-codes", type=Path, default=None, help="text file, two rows")

    ev = sub.add_parser("evaluate", help="warp degree, scale search, FID, rank-1, runtime")
    ev.add_argument("--metric", required=True, choices=("degree", "scale", "fid", "rank1", "runtime"))
    ev.add_argument("--data-root", type=Path, default=None, help="defaults to $CARIME_CACHE")
    ev.add_argument("--split", default="test")
    ev.add_argument("--checkpoint-warper", type=Path, default=None)
    ev.add_argument("--checkpoint-styler", default=None)
    ev.add_argument("--scale", type=float, default=1.0)
    ev.add_argument("--target-degree", type=float, default=None)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--out", type=Path, required=True, help="output directory for the report")
    ev.add_argument("--features-a", type=Path, default=None, help=".npy feature matrix")
    ev.add_argument("--features-b", type=Path, default=None, help=".npy feature matrix")
    ev.add_argument("--images-a", type=Path, default=None,
                    help="image directory; downsampled-pixel features stand in for --features-a")
    ev.add_argument("--images-b", type=Path, default=None, help="image directory for the other set")
    ev.add_argument("--endpoint", default=None, help="embedding service URL (rank1)")
    ev.add_argument("--limit", type=int, default=None, help="use at most this many photos")
    return p


def _none_or_path(v):
    return None if v in (None, "none", "None") else Path(v)


def _eval_photos(args, size):
    root = args.data_root or cache_dir()
    split = args.split if (Path(root) / "split.txt").exists() else None
    index = dp.build_index(root, split=split, validate=False)
    entries = index.photo_entries()[: args.limit]
    photos, names = [], []
    for ident, e in entries:
        img, _ = dp.load_entry(e)
        photos.append(dp.resize_image(img, (size, size)))
        names.append(f"{ident}/{Path(e.image).name}")
    if not photos:
        raise dp.DatasetError(f"{root}: no photos in split {args.split!r}")
    return index, photos, names


def _fid_features(features, images, name):
    if features is not None:
        return np.load(features)
    if images is None:
        raise ValueError(f"fid needs --features-{name} or --images-{name}")
    paths = sorted(p for p in Path(images).rglob("*") if p.suffix.lower() in dp.IMAGE_EXTS)
    if not paths:
        raise dp.DatasetError(f"{images}: no images")
    return pixel_features(dp.load_image(p) for p in paths)


def run_evaluate(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.metric == "fid":
        feats = [_fid_features(f, d, name) for f, d, name in
                 ((args.features_a, args.images_a, "a"), (args.features_b, args.images_b, "b"))]
        value = fid(*feats)
        write_text(out / "fid.txt", f"fid: {value:.6f}\n")
        (out / "fid.csv").write_text(f"metric,value\nfid,{value:.6f}\n")
        print(f"fid {value:.6f}")
        return
    if args.checkpoint_warper is None:
        raise ValueError(f"--metric {args.metric} needs --checkpoint-warper")
    if args.metric == "scale" and args.target_degree is None:
        raise ValueError("--metric scale needs --target-degree")
    if args.metric == "rank1" and not args.endpoint:
        raise ValueError("rank1 needs --endpoint (embedding service URL)")
    warper, _ = model_from_checkpoint(args.checkpoint_warper, "warper")
    index, photos, names = _eval_photos(args, warper.image_size)
    if args.metric in ("degree", "scale"):
        scale = args.scale
        if args.target_degree is not None:
            scale = scale_for_degree(photos, warper, args.target_degree, seed=args.seed)
        report = degree_report(photos, warper, scale, args.seed, names)
        report.write_csv(out / "degree.csv")
        write_text(out / "degree.txt", report.summary())
        print(report.summary(), end="")
    elif args.metric == "runtime":
        res = runtime_benchmark(photos, warper, seed=args.seed)
        text = (f"mean seconds per image: {res.mean_seconds:.6f}\nimages: {res.n_images}\n"
                f"repeats: {', '.join(f'{r:.6f}' for r in res.repeats)}\nhardware: {res.hardware}\n")
        write_text(out / "runtime.txt", text)
        print(text, end="")
    elif args.metric == "rank1":
        client = HttpEmbeddingClient(args.endpoint)
        gallery, gallery_ids, probes, probe_ids = [], [], [], []
        seen = set()
        for (ident, _), img in zip(index.photo_entries()[: args.limit], photos):
            if ident not in seen:
                seen.add(ident)
                gallery.append(img)
                gallery_ids.append(ident)
            else:
                probes.append(img)
                probe_ids.append(ident)
        emb_g = identity_embedding_hook(gallery, client)
        emb_p = identity_embedding_hook(probes, client)
        acc = rank1_accuracy(emb_g, gallery_ids, emb_p, probe_ids)
        write_text(out / "rank1.txt", f"rank1: {acc:.6f}\n")
        print(f"rank1 {acc:.6f}")


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "preprocess":
        counts = dp.preprocess(args.data_root, args.out or cache_dir(), args.size, args.seed, args.n_train)
        print(" ".join(f"{k}={v}" for k, v in counts.items()))
    elif args.command == "train":
        overrides = parse_overrides(dict(args.set))
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.deterministic is not None:
            overrides["deterministic"] = args.deterministic
        cfg = load_config(args.config, **overrides)
        final, history = run_training(args.module, cfg, args.data_root or cache_dir(), args.out,
                                      resume=args.resume, force=args.force, until=args.until)
        last = history[-1] if history else {}
        print(f"checkpoint {final}" + (f" total {last['total']:.6f}" if last else ""))
    elif args.command == "generate":
        if args.deterministic:
            torch.use_deterministic_algorithms(True)
        req = GenerationRequest(
            inputs=args.inputs, out=args.out, checkpoint_warper=args.checkpoint_warper,
            checkpoint_styler=_none_or_path(args.checkpoint_styler), num_samples=args.num_samples,
            seed=args.seed, scale=args.scale, warp_ref=args.warp_ref, style_ref=args.style_ref,
            style_code=args.style_code, grid=args.grid,
        )
        written, errors = cmd_generate(req)
        print(f"wrote {len(written)} images" + (f", {len(errors)} inputs failed" if errors else ""))
        if errors and not written:
            raise dp.DatasetError("no input could be read")
    elif args.command == "interpolate":
        wc = np.loadtxt(args.warp_codes, ndmin=2) if args.warp_codes else None
        sc = np.loadtxt(args.style_codes, ndmin=2) if args.style_codes else None
        out, _ = cmd_interpolate(args.photo, args.checkpoint_warper, _none_or_path(args.checkpoint_styler),
                                 args.steps, args.out, args.seed, wc, sc)
        print(f"wrote {out}")
    elif args.command == "evaluate":
        run_evaluate(args)
    return EXIT_OK


def main(argv=None):
    try:
        return run(argv)
    except (dp.DatasetError, GeometryError, FileNotFoundError) as err:
        print(f"error [data]: {err}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as err:
        print(f"error [checkpoint]: {err}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except TrainingDiverged as err:
        print(f"error [diverged]: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, EvaluationError) as err:
        print(f"error [invalid]: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
