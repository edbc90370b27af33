"""Training loops, schedules, config files and checkpoints for both modules."""
import csv
import dataclasses
import hashlib
import io
import logging
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .data import DatasetError, augment, build_index, load_entry, load_mean_landmarks, sample_pair, SamplePair
from .geometry import image_to_tensor
from .styler import StylerModel, styler_train_step
from .warper import TrainingDiverged, WarperModel, make_warper_batch, warper_train_step

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "carime-checkpoint"
CHECKPOINT_VERSION = 1

# fields that never change what a checkpoint means
RUNTIME_FIELDS = frozenset({"checkpoint_every", "log_window", "deterministic"})


@dataclass
class TrainConfig:
    image_size: int = 256
    batch_size: int = 16
    seed: int = 0
    lr: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    warper_iters: int = 10_000
    warper_decay_iters: int = 10_000
    styler_iters: int = 250_000
    styler_decay_iters: int = 250_000
    lambda_rec_img: float = 10.0
    lambda_rec_warp: float = 10.0
    lambda_cyc: float = 1.0
    lambda_tv: float = 5e-6
    code_dim_w: int = 64
    code_dim_p: int = 64
    width: int = 32
    max_width: int = 256
    warper_downsamples: int = 5
    code_norm: str = "batch"
    style_dim: int = 8
    styler_width: int = 64
    styler_res_blocks: int = 4
    styler_mlp_dim: int = 256
    disc_width: int = 64
    augment: bool = True
    p_flip: float = 0.5
    p_crop: float = 0.5
    checkpoint_every: int = 1000
    log_window: int = 100
    deterministic: bool = True

    def schedule(self, which):
        if which == "warper":
            return self.warper_iters, self.warper_decay_iters
        if which == "styler":
            return self.styler_iters, self.styler_decay_iters
        raise ValueError(f"unknown module {which!r}")

    def total_iters(self, which):
        return sum(self.schedule(which))

    def hash(self):
        items = sorted((k, v) for k, v in dataclasses.asdict(self).items() if k not in RUNTIME_FIELDS)
        text = "\n".join(f"{k}={v!r}" for k, v in items)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def replace(self, **overrides):
        return dataclasses.replace(self, **overrides)


def _coerce(ftype, raw):
    t = ftype if isinstance(ftype, type) else {"int": int, "float": float, "bool": bool, "str": str}[ftype]
    if t is bool:
        low = str(raw).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return t(raw)


def parse_overrides(pairs):
    """``{'lr': '3e-4'}``-style strings -> typed dict keyed by TrainConfig fields."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    out = {}
    for key, raw in pairs.items():
        key = key.strip().replace("-", "_")
        if key not in types:
            raise ValueError(f"unknown config key {key!r}")
        out[key] = _coerce(types[key], raw)
    return out


def load_config(path=None, **overrides):
    """Read a flat ``key = value`` file (``#`` comments allowed) and apply overrides."""
    raw = {}
    if path is not None:
        for n, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{n}: expected 'key = value'")
            k, v = line.split("=", 1)
            raw[k.strip()] = v.strip()
    values = parse_overrides(raw)
    values.update(overrides)
    return TrainConfig(**values)


def write_config(path, cfg):
    lines = [f"{k} = {v}" for k, v in dataclasses.asdict(cfg).items()]
    Path(path).write_text("\n".join(lines) + "\n")


def lr_at(it, phase_len, decay_len, base):
    """Constant ``base`` for ``phase_len`` iterations, then linear decay reaching 0 on the last one."""
    if not 0 <= it < phase_len + decay_len:
        raise ValueError(f"iteration {it} outside [0, {phase_len + decay_len})")
    if it < phase_len:
        return base
    return base * (1.0 - (it - phase_len + 1) / decay_len)


# -- checkpoints ------------------------------------------------------------------------

class CheckpointError(RuntimeError):
    pass


def checkpoint_bytes(payload):
    buf = io.BytesIO()
    torch.save(payload, buf)
    return buf.getvalue()


def save_checkpoint(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(payload))
    tmp.replace(path)
    return path


def load_checkpoint(path, cfg=None, force=False, module=None):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as err:  # corrupt or foreign file
        raise CheckpointError(f"{path}: unreadable checkpoint ({err})") from err
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a carime checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    if module is not None and payload["module"] != module:
        raise CheckpointError(f"{path}: holds a {payload['module']} model, expected {module}")
    if cfg is not None and payload["config_hash"] != cfg.hash() and not force:
        raise CheckpointError(f"{path}: config hash {payload['config_hash']} does not match "
                              f"{cfg.hash()} (use --force to override)")
    return payload


def config_from_checkpoint(payload):
    known = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in payload["config"].items() if k in known})


def build_model(which, cfg):
    if which == "warper":
        return WarperModel.from_config(cfg)
    if which == "styler":
        return StylerModel.from_config(cfg)
    raise ValueError(f"unknown module {which!r}")


def model_from_checkpoint(path, module):
    payload = load_checkpoint(path, module=module)
    cfg = config_from_checkpoint(payload)
    model = build_model(module, cfg)
    model.load_state_dict(payload["model"])
    model.eval()
    model.mean_landmarks = payload.get("mean_landmarks")
    return model, cfg


# -- the loop ---------------------------------------------------------------------------

class Trainer:
    """Owns one model, its optimizers and every RNG that feeds the loop."""

    def __init__(self, which, cfg, data_root, out_dir):
        self.which, self.cfg = which, cfg
        self.data_root, self.out_dir = Path(data_root), Path(out_dir)
        if not self.data_root.exists():
            raise DatasetError(f"dataset root {self.data_root} does not exist")
        split = "train" if (self.data_root / "split.txt").exists() else None
        self.index = build_index(self.data_root, split=split, validate=False)
        if not self.index.identities:
            raise DatasetError(f"{self.data_root}: no training identities")
        self.mean_lm = load_mean_landmarks(self.data_root) if which == "warper" else None
        if cfg.deterministic:
            torch.use_deterministic_algorithms(True)
        torch.manual_seed(cfg.seed)
        self.model = build_model(which, cfg)
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        if which == "warper":
            self.optims = {"g": torch.optim.Adam(self.model.parameters(), lr=cfg.lr, betas=betas)}
        else:
            self.optims = {
                "g": torch.optim.Adam(self.model.generator_parameters(), lr=cfg.lr, betas=betas),
                "d": torch.optim.Adam(self.model.D.parameters(), lr=cfg.lr, betas=betas),
            }
        self.rng = np.random.default_rng(cfg.seed)
        self.gen = torch.Generator().manual_seed(cfg.seed + 1)
        self.iteration = 0
        self._cache = {}

    # state ---------------------------------------------------------------------------
    def state(self):
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "module": self.which,
            "config": dataclasses.asdict(self.cfg),
            "config_hash": self.cfg.hash(),
            "iteration": self.iteration,
            "model": self.model.state_dict(),
            "mean_landmarks": None if self.mean_lm is None else self.mean_lm.points.copy(),
            "optim": {k: o.state_dict() for k, o in self.optims.items()},
            "rng": {
                "numpy": self.rng.bit_generator.state,
                "torch_gen": self.gen.get_state(),
                "torch_global": torch.get_rng_state(),
            },
        }

    def restore(self, payload):
        if payload["module"] != self.which:
            raise CheckpointError(f"checkpoint holds {payload['module']}, training {self.which}")
        self.model.load_state_dict(payload["model"])
        for k, o in self.optims.items():
            o.load_state_dict(payload["optim"][k])
        self.rng.bit_generator.state = payload["rng"]["numpy"]
        self.gen.set_state(payload["rng"]["torch_gen"])
        torch.set_rng_state(payload["rng"]["torch_global"])
        self.iteration = int(payload["iteration"])

    def checkpoint(self, name=None):
        name = name or f"{self.which}_{self.iteration:07d}.pt"
        path = save_checkpoint(self.out_dir / name, self.state())
        save_checkpoint(self.out_dir / f"{self.which}_latest.pt", self.state())
        return path

    # data -----------------------------------------------------------------------------
    def _load(self, entry):
        key = str(entry.image)
        if key not in self._cache:
            self._cache[key] = load_entry(entry)
        return self._cache[key]

    def _pair(self, policy):
        pe, ce, same = sample_pair(self.index, policy, self.rng, load=False)
        photo, plm = self._load(pe)
        cari, clm = self._load(ce)
        pair = SamplePair(photo, cari, plm, clm, same)
        if self.cfg.augment:
            pair = augment(pair, self.rng, self.cfg.p_flip, self.cfg.p_crop)
        return pair

    def next_batch(self):
        n = self.cfg.batch_size
        if self.which == "warper":
            pairs = [self._pair("same_identity") for _ in range(n)]
            return make_warper_batch(pairs, self.mean_lm)
        pairs = [self._pair("random") for _ in range(n)]
        photos = torch.stack([image_to_tensor(p.photo) for p in pairs])
        caris = torch.stack([image_to_tensor(p.caricature) for p in pairs])
        return photos, caris

    # loop -------------------------------------------------------------------------------
    def step(self):
        cfg = self.cfg
        phase, decay = cfg.schedule(self.which)
        lr = lr_at(self.iteration, phase, decay, cfg.lr)
        for o in self.optims.values():
            for g in o.param_groups:
                g["lr"] = lr
        batch = self.next_batch()
        if self.which == "warper":
            losses = warper_train_step(self.model, self.optims["g"], batch, cfg, self.gen, self.iteration)
        else:
            losses = styler_train_step(self.model, self.optims["g"], self.optims["d"], batch, cfg,
                                       self.gen, self.iteration)
        self.iteration += 1
        return lr, losses

    def run(self, until=None):
        total = self.cfg.total_iters(self.which)
        until = total if until is None else min(until, total)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        write_config(self.out_dir / f"{self.which}_config.txt", self.cfg)
        log.info("training %s: iterations %d..%d, lambdas rec_img=%g rec_warp=%g cyc=%g tv=%g",
                 self.which, self.iteration, until, self.cfg.lambda_rec_img,
                 self.cfg.lambda_rec_warp, self.cfg.lambda_cyc, self.cfg.lambda_tv)
        log_path = self.out_dir / f"{self.which}_log.csv"
        history = []
        t0 = time.perf_counter()
        writer_file = log_path.open("a", newline="")
        try:
            writer = None
            while self.iteration < until:
                try:
                    lr, losses = self.step()
                except TrainingDiverged:
                    self.checkpoint(f"{self.which}_diverged.pt")
                    raise
                if writer is None:
                    cols = ["iter", "lr"] + sorted(losses) + ["wall_time"]
                    writer = csv.DictWriter(writer_file, fieldnames=cols)
                    if log_path.stat().st_size == 0:
                        writer.writeheader()
                row = {"iter": self.iteration - 1, "lr": lr, "wall_time": time.perf_counter() - t0, **losses}
                writer.writerow(row)
                history.append(row)
                if self.iteration % self.cfg.checkpoint_every == 0:
                    self.checkpoint()
                    writer_file.flush()
                    recent = history[-self.cfg.log_window:]
                    avg = np.mean([r["total"] for r in recent])
                    log.info("%s iter %d lr %.3g avg total %.4f", self.which, self.iteration, lr, avg)
        finally:
            writer_file.close()
        final = self.checkpoint()
        return final, history


def run_training(which, cfg, data_root, out_dir, resume=None, force=False, until=None):
    """Train ``which`` ('warper' or 'styler'); returns ``(final checkpoint path, loss history)``."""
    trainer = Trainer(which, cfg, data_root, out_dir)
    if resume is not None:
        trainer.restore(load_checkpoint(resume, cfg, force=force, module=which))
    return trainer.run(until)
