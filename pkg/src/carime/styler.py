"""Texture translation with content/style disentanglement and AdaLIN decoding."""
import numpy as np
import torch
import torch.nn as nn

from .geometry import image_to_tensor, tensor_to_image
from .warper import check_finite

ADALIN_EPS = 1e-6


def adalin(x, gamma, beta, rho, eps=ADALIN_EPS):
    """gamma * (rho * IN(x) + (1 - rho) * LN(x)) + beta.

    ``x`` is (N, C, H, W); ``gamma``/``beta`` are (N, C); ``rho`` is (C,).
    Both normalizations use biased variance.
    """
    rho = torch.as_tensor(rho, dtype=x.dtype)
    if bool((rho < 0).any()) or bool((rho > 1).any()):
        raise ValueError("AdaLIN mixing weight rho must lie in [0, 1]")
    in_mean = x.mean(dim=(2, 3), keepdim=True)
    in_var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
    a_in = (x - in_mean) / torch.sqrt(in_var + eps)
    ln_mean = x.mean(dim=(1, 2, 3), keepdim=True)
    ln_var = x.var(dim=(1, 2, 3), keepdim=True, unbiased=False)
    a_ln = (x - ln_mean) / torch.sqrt(ln_var + eps)
    r = rho.view(1, -1, 1, 1)
    mixed = r * a_in + (1 - r) * a_ln
    return gamma[:, :, None, None] * mixed + beta[:, :, None, None]


class AdaLIN(nn.Module):
    def __init__(self, channels, rho_init=0.9):
        super().__init__()
        self.channels = channels
        self.rho = nn.Parameter(torch.full((channels,), rho_init))

    def forward(self, x, gamma, beta):
        return adalin(x, gamma, beta, self.rho)


class LayerInstanceNorm(nn.Module):
    """Non-adaptive counterpart of AdaLIN with learned per-channel gamma/beta."""

    def __init__(self, channels, rho_init=0.0):
        super().__init__()
        self.rho = nn.Parameter(torch.full((channels,), rho_init))
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        n = x.shape[0]
        return adalin(x, self.gamma.expand(n, -1), self.beta.expand(n, -1), self.rho)


def _conv(cin, cout, k, s=1):
    return nn.Sequential(nn.ReflectionPad2d(k // 2), nn.Conv2d(cin, cout, k, s))


class ResBlock(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.body = nn.Sequential(
            _conv(dim, dim, 3), nn.InstanceNorm2d(dim), nn.ReLU(inplace=True),
            _conv(dim, dim, 3), nn.InstanceNorm2d(dim),
        )

    def forward(self, x):
        return x + self.body(x)


class AdaLINResBlock(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.conv1 = _conv(dim, dim, 3)
        self.norm1 = AdaLIN(dim)
        self.conv2 = _conv(dim, dim, 3)
        self.norm2 = AdaLIN(dim)

    def forward(self, x, params):
        g1, b1, g2, b2 = params
        h = torch.relu(self.norm1(self.conv1(x), g1, b1))
        return x + self.norm2(self.conv2(h), g2, b2)


class ContentEncoder(nn.Module):
    def __init__(self, width=64, n_down=2, n_res=4):
        super().__init__()
        layers = [_conv(3, width, 7), nn.InstanceNorm2d(width), nn.ReLU(inplace=True)]
        dim = width
        for _ in range(n_down):
            layers += [nn.Conv2d(dim, dim * 2, 4, 2, 1), nn.InstanceNorm2d(dim * 2), nn.ReLU(inplace=True)]
            dim *= 2
        layers += [ResBlock(dim) for _ in range(n_res)]
        self.model = nn.Sequential(*layers)
        self.out_channels = dim

    def forward(self, x):
        return self.model(x)


class StyleEncoder(nn.Module):
    def __init__(self, style_dim=8, width=64, n_down=4, cap=256):
        super().__init__()
        layers = [_conv(3, width, 7), nn.ReLU(inplace=True)]
        dim = width
        for _ in range(n_down):
            nxt = min(dim * 2, cap)
            layers += [nn.Conv2d(dim, nxt, 4, 2, 1), nn.ReLU(inplace=True)]
            dim = nxt
        self.convs = nn.Sequential(*layers)
        self.fc = nn.Linear(dim, style_dim)

    def forward(self, x):
        return self.fc(self.convs(x).mean(dim=(2, 3)))


class StyleDecoder(nn.Module):
    def __init__(self, dim, style_dim=8, n_res=4, n_up=2, mlp_dim=256):
        super().__init__()
        self.blocks = nn.ModuleList(AdaLINResBlock(dim) for _ in range(n_res))
        self.n_params = 4 * dim * n_res
        self.dim = dim
        self.mlp = nn.Sequential(
            nn.Linear(style_dim, mlp_dim), nn.ReLU(inplace=True),
            nn.Linear(mlp_dim, mlp_dim), nn.ReLU(inplace=True),
            nn.Linear(mlp_dim, self.n_params),
        )
        ups = []
        for _ in range(n_up):
            ups += [nn.Upsample(scale_factor=2, mode="nearest"), _conv(dim, dim // 2, 3),
                    LayerInstanceNorm(dim // 2), nn.ReLU(inplace=True)]
            dim //= 2
        ups += [_conv(dim, 3, 7), nn.Tanh()]
        self.up = nn.Sequential(*ups)

    def forward(self, content, style):
        p = self.mlp(style).view(style.shape[0], len(self.blocks), 4, self.dim)
        x = content
        for k, block in enumerate(self.blocks):
            gb = p[:, k]
            # gamma is predicted as an offset from 1
            x = block(x, (1 + gb[:, 0], gb[:, 1], 1 + gb[:, 2], gb[:, 3]))
        return self.up(x)


class PatchDiscriminator(nn.Module):
    """Four conv layers; outputs an (N, 1, S/8, S/8) map of raw least-squares scores."""

    def __init__(self, width=64):
        super().__init__()
        self.model = nn.Sequential(
            nn.Conv2d(3, width, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(width, width * 2, 4, 2, 1), nn.InstanceNorm2d(width * 2), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(width * 2, width * 4, 4, 2, 1), nn.InstanceNorm2d(width * 4), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(width * 4, 1, 3, 1, 1),
        )

    def forward(self, x):
        return self.model(x)


class StylerModel(nn.Module):
    def __init__(self, style_dim=8, width=64, n_res=4, mlp_dim=256, d_width=64):
        super().__init__()
        self.style_dim = style_dim
        self.E_c = ContentEncoder(width, 2, n_res)
        self.E_s = StyleEncoder(style_dim, width)
        self.G_s = StyleDecoder(self.E_c.out_channels, style_dim, n_res, 2, mlp_dim)
        self.D = PatchDiscriminator(d_width)

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg.style_dim, cfg.styler_width, cfg.styler_res_blocks, cfg.styler_mlp_dim,
                   cfg.disc_width)

    def generator_parameters(self):
        for m in (self.E_c, self.E_s, self.G_s):
            yield from m.parameters()

    def rhos(self):
        return [m.rho for m in self.modules() if isinstance(m, (AdaLIN, LayerInstanceNorm))]

    @torch.no_grad()
    def clamp_rho(self):
        for r in self.rhos():
            r.clamp_(0.0, 1.0)

    def generate(self, x, z_s):
        return self.G_s(self.E_c(x), z_s)

    def sample_codes(self, n, generator=None, dtype=torch.float32):
        return torch.randn(n, self.style_dim, generator=generator, dtype=dtype)


# -- losses -----------------------------------------------------------------------------

def lsgan_d_loss(d_real, d_fake):
    return (d_real - 1).pow(2).mean() + d_fake.pow(2).mean()


def lsgan_g_loss(d_fake):
    return (d_fake - 1).pow(2).mean()


def adversarial_losses(real, fake, D):
    """Least-squares objectives with real->1, fake->0 targets. Returns ``(d_loss, g_loss)``."""
    d_fake = D(fake)
    return lsgan_d_loss(D(real), d_fake), lsgan_g_loss(d_fake)


def image_recon_loss(x, model):
    return (model.G_s(model.E_c(x), model.E_s(x)) - x).abs().mean()


def cycle_loss(x_p, z_s, model, content=None):
    """Returns ``(total, content_term, style_term)``."""
    c = model.E_c(x_p) if content is None else content
    fake = model.G_s(c, z_s)
    l_con = (model.E_c(fake) - c).abs().mean()
    l_sty = (model.E_s(fake) - z_s).abs().mean()
    return l_con + l_sty, l_con, l_sty


def styler_generator_losses(model, photo, cari, z_s, cfg):
    c = model.E_c(photo)
    fake = model.G_s(c, z_s)
    g_adv = lsgan_g_loss(model.D(fake))
    rec = 0.5 * (image_recon_loss(photo, model) + image_recon_loss(cari, model))
    l_con = (model.E_c(fake) - c).abs().mean()
    l_sty = (model.E_s(fake) - z_s).abs().mean()
    cyc = l_con + l_sty
    total = g_adv + cfg.lambda_rec_img * rec + cfg.lambda_cyc * cyc
    return {"g_adv": g_adv, "img_rec": rec, "cyc_content": l_con, "cyc_style": l_sty,
            "cyc": cyc, "total": total}


def styler_train_step(model, opt_g, opt_d, batch, cfg, generator=None, step=None):
    """Discriminator step, then generator step. Photos are translated, caricatures are the real set."""
    model.train()
    photo, cari = batch
    z_s = model.sample_codes(photo.shape[0], generator, photo.dtype)

    for p in model.D.parameters():
        p.requires_grad_(True)
    with torch.no_grad():
        fake = model.generate(photo, z_s)
    d_loss = lsgan_d_loss(model.D(cari), model.D(fake))
    check_finite({"d_loss": d_loss}, step)
    opt_d.zero_grad(set_to_none=True)
    d_loss.backward()
    opt_d.step()

    for p in model.D.parameters():
        p.requires_grad_(False)
    losses = styler_generator_losses(model, photo, cari, z_s, cfg)
    check_finite(losses, step)
    opt_g.zero_grad(set_to_none=True)
    losses["total"].backward()
    opt_g.step()
    for p in model.D.parameters():
        p.requires_grad_(True)
    model.clamp_rho()

    out = {k: float(v.detach()) for k, v in losses.items()}
    out["d_loss"] = float(d_loss.detach())
    return out


# -- inference --------------------------------------------------------------------------

@torch.no_grad()
def stylize(img, style, model):
    """Render an H×W×3 image in the style given by ``style`` (1-D code)."""
    model.eval()
    dtype = next(model.parameters()).dtype
    x = image_to_tensor(img, dtype)[None]
    z = torch.as_tensor(np.asarray(style), dtype=dtype).view(1, -1)
    return tensor_to_image(model.generate(x, z)[0])


@torch.no_grad()
def encode_style(img, model):
    model.eval()
    dtype = next(model.parameters()).dtype
    return model.E_s(image_to_tensor(img, dtype)[None])[0].double().numpy()


def save_style_code(path, code):
    np.savetxt(path, np.asarray(code, dtype=np.float64).reshape(1, -1), fmt="%.17g")


def load_style_code(path):
    return np.loadtxt(path, dtype=np.float64).reshape(-1)
