"""Multi-exaggeration warper.

A warp encoder maps a (half-resolution) deformation field to a warp code, a
photo encoder maps a photo to a content code plus a spatial feature tap, and
a warp decoder turns the concatenated codes back into a field. At test time
the warp code is drawn from N(0, 1).
"""
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .geometry import (
    DeformationField, GeometryError, field_from_landmarks, field_to_tensor, image_to_tensor,
    resize_residual, scale_field, tensor_to_field, warp_image, warp_torch,
)


class TrainingDiverged(RuntimeError):
    pass


class CodeNorm(nn.Module):
    """Pushes emitted codes towards N(0, 1).

    ``batch``: per-dimension batch standardization, running stats frozen in eval.
    ``sample``: each code standardized across its own dimensions.
    ``none``: identity.
    """

    def __init__(self, dim, mode="batch"):
        super().__init__()
        if mode not in ("batch", "sample", "none"):
            raise ValueError(f"unknown code normalization {mode!r}")
        self.mode = mode
        self.bn = nn.BatchNorm1d(dim, affine=False) if mode == "batch" else None

    def forward(self, z):
        if self.mode == "batch":
            return self.bn(z)
        if self.mode == "sample":
            mu = z.mean(dim=1, keepdim=True)
            sd = z.var(dim=1, keepdim=True, unbiased=False).add(1e-5).sqrt()
            return (z - mu) / sd
        return z


def _down_block(cin, cout, norm=False):
    layers = [nn.Conv2d(cin, cout, 4, 2, 1)]
    if norm:
        layers.append(nn.InstanceNorm2d(cout, affine=True))
    layers.append(nn.LeakyReLU(0.2, inplace=True))
    return nn.Sequential(*layers)


def _up_block(cin, cout):
    return nn.Sequential(
        nn.Upsample(scale_factor=2, mode="nearest"),
        nn.Conv2d(cin, cout, 3, 1, 1),
        nn.LeakyReLU(0.2, inplace=True),
    )


def _widths(base, n, cap):
    return [min(base * 2 ** i, cap) for i in range(n)]


class WarpEncoder(nn.Module):
    def __init__(self, in_ch, code_dim, width=32, n_down=5, cap=256, norm=False):
        super().__init__()
        chans = _widths(width, n_down, cap)
        blocks, cin = [], in_ch
        for c in chans:
            blocks.append(_down_block(cin, c, norm))
            cin = c
        self.convs = nn.Sequential(*blocks)
        self.fc = nn.Linear(cin, code_dim)
        self.out_channels = cin

    def forward(self, x):
        feat = self.convs(x)
        return self.fc(feat.mean(dim=(2, 3))), feat


class PhotoDecoder(nn.Module):
    def __init__(self, in_ch, n_up, width=32, cap=256):
        super().__init__()
        chans = list(reversed(_widths(width, n_up, cap)))
        blocks, cin = [], in_ch
        for c in chans:
            blocks.append(_up_block(cin, c))
            cin = c
        self.body = nn.Sequential(*blocks)
        self.head = nn.Sequential(nn.Conv2d(cin, 3, 3, 1, 1), nn.Tanh())

    def forward(self, feat):
        return self.head(self.body(feat))


class WarpDecoder(nn.Module):
    """Codes -> 8×8 map -> upsample blocks -> 2-channel residual head (zero-initialized)."""

    def __init__(self, code_dim, out_size, width=32, cap=256, base=8):
        super().__init__()
        n_up = int(round(math.log2(out_size / base)))
        if n_up < 0 or base * 2 ** n_up != out_size:
            raise ValueError(f"field size {out_size} is not {base}·2^k")
        chans = list(reversed(_widths(width, n_up + 1, cap)))
        self.base, self.c0 = base, chans[0]
        self.fc = nn.Linear(code_dim, chans[0] * base * base)
        blocks = [_up_block(chans[i], chans[i + 1]) for i in range(n_up)]
        self.body = nn.Sequential(*blocks)
        self.head = nn.Conv2d(chans[-1], 2, 3, 1, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, z):
        x = torch.relu(self.fc(z)).view(-1, self.c0, self.base, self.base)
        return self.head(self.body(x))


class WarperModel(nn.Module):
    def __init__(self, image_size=256, code_dim_w=64, code_dim_p=64, width=32, cap=256,
                 n_down=5, code_norm="batch"):
        super().__init__()
        if image_size % 2 or image_size // 2 < 8:
            raise ValueError(f"unsupported image size {image_size}")
        self.image_size = image_size
        self.field_size = image_size // 2
        self.code_dim_w, self.code_dim_p = code_dim_w, code_dim_p
        self.E_w = WarpEncoder(2, code_dim_w, width, n_down, cap)
        self.E_p = WarpEncoder(3, code_dim_p, width, n_down, cap, norm=True)
        self.G_p = PhotoDecoder(self.E_p.out_channels, n_down, width, cap)
        self.G_w = WarpDecoder(code_dim_w + code_dim_p, self.field_size, width, cap)
        self.norm_w = CodeNorm(code_dim_w, code_norm)
        self.norm_p = CodeNorm(code_dim_p, code_norm)

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg.image_size, cfg.code_dim_w, cfg.code_dim_p, cfg.width, cfg.max_width,
                   cfg.warper_downsamples, cfg.code_norm)

    def encode_warp(self, field):
        """(N, 2, S/2, S/2) residual -> normalized warp code."""
        if field.shape[-2:] != (self.field_size, self.field_size) or field.shape[1] != 2:
            raise GeometryError(f"warp encoder expects (N, 2, {self.field_size}, {self.field_size}) "
                                f"fields, got {tuple(field.shape)}")
        z, _ = self.E_w(field)
        return self.norm_w(z)

    def encode_photo(self, photo):
        """(N, 3, S, S) photo -> (normalized content code, last-conv feature map)."""
        if photo.shape[-2:] != (self.image_size, self.image_size) or photo.shape[1] != 3:
            raise GeometryError(f"photo encoder expects (N, 3, {self.image_size}, {self.image_size}), "
                                f"got {tuple(photo.shape)}")
        z, feat = self.E_p(photo)
        return self.norm_p(z), feat

    def decode_field(self, z_w, z_p):
        """Codes -> half-resolution residual (N, 2, S/2, S/2)."""
        if z_w.shape[-1] != self.code_dim_w or z_p.shape[-1] != self.code_dim_p:
            raise GeometryError(f"code sizes {z_w.shape[-1]}/{z_p.shape[-1]} do not match "
                                f"{self.code_dim_w}/{self.code_dim_p}")
        return self.G_w(torch.cat([z_w, z_p], dim=1))

    def full_field(self, z_w, z_p):
        return resize_residual(self.decode_field(z_w, z_p), (self.image_size, self.image_size))

    def sample_codes(self, n, generator=None, dtype=torch.float32):
        return torch.randn(n, self.code_dim_w, generator=generator, dtype=dtype)


# -- losses ---------------------------------------------------------------------------

def warp_recon_loss(pred, target):
    """Mean absolute error between two residuals (tensors or DeformationFields)."""
    if isinstance(pred, DeformationField):
        if pred.resolution != target.resolution:
            raise GeometryError("fields differ in resolution")
        return float(np.abs(pred.residual - target.residual).mean())
    return (pred - target).abs().mean()


def photo_recon_loss(model, photo, feat):
    return (model.G_p(feat) - photo).abs().mean()


def tv_loss(img):
    """Sum of squared vertical and horizontal neighbour differences, averaged over the batch.

    Accepts (C, H, W) or (N, C, H, W) tensors, or an H×W×C array.
    """
    if isinstance(img, np.ndarray):
        img = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))
    if img.dim() == 3:
        img = img.unsqueeze(0)
    dv = (img[:, :, 1:, :] - img[:, :, :-1, :]).pow(2).sum(dim=(1, 2, 3))
    dh = (img[:, :, :, 1:] - img[:, :, :, :-1]).pow(2).sum(dim=(1, 2, 3))
    return (dv + dh).mean()


def warper_losses(model, photo, f_mc, f_pc, z_rand, cfg):
    """All warper loss terms for one batch.

    ``f_mc`` (mean->caricature) feeds the warp encoder; ``f_pc`` (photo->caricature)
    is the reconstruction target. ``z_rand`` drives the TV term.
    """
    half = (model.field_size, model.field_size)
    z_w = model.encode_warp(resize_residual(f_mc, half))
    z_p, feat = model.encode_photo(photo)
    pred = model.full_field(z_w, z_p)
    l_warp = warp_recon_loss(pred, f_pc)
    l_photo = photo_recon_loss(model, photo, feat)
    warped = warp_torch(photo, model.full_field(z_rand, z_p))
    l_tv = tv_loss(warped)
    total = cfg.lambda_rec_warp * l_warp + l_photo + cfg.lambda_tv * l_tv
    return {"warp_rec": l_warp, "photo_rec": l_photo, "tv": l_tv, "total": total}


def check_finite(losses, step=None):
    bad = {k: float(v.detach() if torch.is_tensor(v) else v) for k, v in losses.items()}
    bad = {k: v for k, v in bad.items() if not math.isfinite(v)}
    if bad:
        where = f" at iteration {step}" if step is not None else ""
        raise TrainingDiverged(f"non-finite loss{where}: {bad}")


def warper_train_step(model, opt, batch, cfg, generator=None, step=None):
    """One Adam step on the weighted warper objective; returns float loss components."""
    model.train()
    photo, f_mc, f_pc = batch
    z_rand = model.sample_codes(photo.shape[0], generator, photo.dtype)
    losses = warper_losses(model, photo, f_mc, f_pc, z_rand, cfg)
    check_finite(losses, step)
    opt.zero_grad(set_to_none=True)
    losses["total"].backward()
    opt.step()
    return {k: float(v.detach()) for k, v in losses.items()}


def make_warper_batch(pairs, mean_lm, dtype=torch.float32):
    """Stack photos and ground-truth fields (mean->cari, photo->cari) for a list of pairs."""
    photos, f_mc, f_pc = [], [], []
    for p in pairs:
        if not p.same_identity:
            raise ValueError("warper pairs must share an identity")
        photos.append(image_to_tensor(p.photo, dtype))
        f_mc.append(field_to_tensor(field_from_landmarks(mean_lm, p.cari_landmarks), dtype))
        f_pc.append(field_to_tensor(field_from_landmarks(p.photo_landmarks, p.cari_landmarks), dtype))
    return torch.stack(photos), torch.stack(f_mc), torch.stack(f_pc)


# -- inference --------------------------------------------------------------------------

@dataclass
class WarpSample:
    warp_code: np.ndarray
    field: DeformationField
    warped: np.ndarray
    scale: float


@torch.no_grad()
def photo_field(model, photo, z_w):
    """Full-resolution field for one photo (H×W×3 array) and warp code (1-D array)."""
    model.eval()
    dtype = next(model.parameters()).dtype
    x = image_to_tensor(photo, dtype)[None]
    z_p, _ = model.encode_photo(x)
    z = torch.as_tensor(np.asarray(z_w), dtype=dtype).view(1, -1)
    return tensor_to_field(model.full_field(z, z_p)[0])


def sample_exaggeration(photo, model, z_w=None, scale=1.0, rng=None):
    """Warp ``photo`` with the field decoded from ``z_w`` (drawn from N(0, 1) if omitted)."""
    if z_w is None:
        rng = rng if rng is not None else np.random.default_rng()
        z_w = rng.standard_normal(model.code_dim_w)
    z_w = np.asarray(z_w, dtype=np.float64)
    field = photo_field(model, photo, z_w)
    warped = warp_image(photo, scale_field(field, scale))
    return WarpSample(z_w, field, warped, float(scale))
