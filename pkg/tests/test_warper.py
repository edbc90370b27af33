import numpy as np
import pytest
import torch
from torch.func import functional_call

from oracles import degree_oracle, fd_relative_error, mean_abs_oracle, tv_oracle
from carime.data import SamplePair
from carime.geometry import DeformationField, GeometryError, LandmarkSet, exaggeration_degree
from carime.synthetic import template_face
from carime.trainer import TrainConfig
from carime.warper import (
    CodeNorm, TrainingDiverged, WarperModel, check_finite, make_warper_batch, photo_field,
    sample_exaggeration, tv_loss, warp_recon_loss, warper_losses, warper_train_step,
)


def small_model(size=32, **kw):
    torch.manual_seed(0)
    kw.setdefault("n_down", 3)
    return WarperModel(size, code_dim_w=8, code_dim_p=8, width=4, cap=16, **kw)


def test_shapes():
    m = small_model(64)
    z_w = m.encode_warp(torch.zeros(3, 2, 32, 32))
    z_p, feat = m.encode_photo(torch.zeros(3, 3, 64, 64))
    assert z_w.shape == (3, 8) and z_p.shape == (3, 8)
    assert m.decode_field(z_w, z_p).shape == (3, 2, 32, 32)
    assert m.full_field(z_w, z_p).shape == (3, 2, 64, 64)
    assert m.G_p(feat).shape == (3, 3, 64, 64)


def test_wrong_resolution_rejected():
    m = small_model(64)
    with pytest.raises(GeometryError):
        m.encode_warp(torch.zeros(1, 2, 64, 64))
    with pytest.raises(GeometryError):
        m.encode_photo(torch.zeros(1, 3, 32, 32))
    with pytest.raises(GeometryError):
        m.decode_field(torch.zeros(1, 5), torch.zeros(1, 8))


def test_unknown_code_norm():
    with pytest.raises(ValueError):
        CodeNorm(4, "layer")


@pytest.mark.parametrize("mode", ["batch", "sample", "none"])
def test_code_norm_modes(mode):
    z = torch.randn(64, 16, generator=torch.Generator().manual_seed(0)) * 3 + 2
    out = CodeNorm(16, mode).train()(z)
    if mode == "batch":
        assert out.mean(dim=0).abs().max() < 1e-5
    elif mode == "sample":
        assert out.mean(dim=1).abs().max() < 1e-5
        assert torch.allclose(out.var(dim=1, unbiased=False), torch.ones(64), atol=1e-3)
    else:
        assert torch.equal(out, z)


def test_untrained_warper_is_identity(rng):
    m = small_model()
    photo = rng.uniform(-1, 1, (32, 32, 3)).astype(np.float32)
    s = sample_exaggeration(photo, m, rng=rng)
    assert exaggeration_degree(s.field) == 0.0
    assert np.array_equal(s.warped, photo)


def test_scale_zero_returns_input(rng):
    m = small_model()
    with torch.no_grad():
        m.G_w.head.bias.copy_(torch.tensor([0.1, -0.05]))
    photo = rng.uniform(-1, 1, (32, 32, 3))
    s = sample_exaggeration(photo, m, z_w=np.zeros(8), scale=0.0)
    assert exaggeration_degree(s.field) > 0
    assert np.array_equal(s.warped, photo)


def test_inference_is_deterministic(rng):
    m = small_model()
    with torch.no_grad():
        m.G_w.head.weight.normal_(0, 0.05)
    photo = rng.uniform(-1, 1, (32, 32, 3))
    z = rng.standard_normal(8)
    a = photo_field(m, photo, z)
    b = photo_field(m, photo, z)
    assert np.array_equal(a.residual, b.residual)
    assert exaggeration_degree(a) == pytest.approx(degree_oracle(a.residual), rel=1e-12)


# -- losses --------------------------------------------------------------------

def test_warp_recon_examples():
    a = DeformationField(np.zeros((4, 4, 2)))
    b = DeformationField(np.full((4, 4, 2), 0.1))
    assert warp_recon_loss(a, b) == pytest.approx(0.1, abs=1e-15)
    assert warp_recon_loss(b, b) == 0.0
    with pytest.raises(GeometryError):
        warp_recon_loss(a, DeformationField(np.zeros((4, 5, 2))))


def test_warp_recon_matches_oracle(rng):
    for _ in range(5):
        p = rng.normal(0, 0.2, (2, 2, 16, 16))
        t = rng.normal(0, 0.2, (2, 2, 16, 16))
        got = float(warp_recon_loss(torch.from_numpy(p), torch.from_numpy(t)))
        assert got == pytest.approx(mean_abs_oracle(p, t), abs=1e-7)


def test_tv_examples():
    step = np.zeros((4, 4, 1))
    step[:, 2:] = 1.0
    assert float(tv_loss(step)) == 4.0
    assert float(tv_loss(np.ones((5, 7, 3)))) == 0.0


def test_tv_matches_oracle(rng):
    img = rng.uniform(-1, 1, (12, 9, 3))
    assert float(tv_loss(img)) == pytest.approx(tv_oracle(img), rel=1e-6)
    batch = torch.from_numpy(np.stack([img.transpose(2, 0, 1), 2 * img.transpose(2, 0, 1)]))
    assert float(tv_loss(batch)) == pytest.approx(2.5 * tv_oracle(img), rel=1e-6)


def _batch(m, rng, n=2, dtype=torch.float32):
    s = m.image_size
    photo = torch.from_numpy(rng.uniform(-1, 1, (n, 3, s, s))).to(dtype)
    f_mc = torch.from_numpy(rng.normal(0, 0.05, (n, 2, s, s))).to(dtype)
    f_pc = torch.from_numpy(rng.normal(0, 0.05, (n, 2, s, s))).to(dtype)
    return photo, f_mc, f_pc


def test_total_is_weighted_sum(rng):
    m = small_model()
    cfg = TrainConfig(lambda_rec_warp=7.0, lambda_tv=0.25)
    photo, f_mc, f_pc = _batch(m, rng)
    out = warper_losses(m, photo, f_mc, f_pc, m.sample_codes(2), cfg)
    expect = 7.0 * out["warp_rec"] + out["photo_rec"] + 0.25 * out["tv"]
    assert out["total"].item() == pytest.approx(expect.item(), rel=1e-6)


class _LossWrapper(torch.nn.Module):
    def __init__(self, m, cfg):
        super().__init__()
        self.m, self.cfg = m, cfg

    def forward(self, photo, f_mc, f_pc, z):
        return warper_losses(self.m, photo, f_mc, f_pc, z, self.cfg)["total"]


def test_gradient_matches_finite_differences(rng):
    m = small_model(code_norm="sample").double()
    with torch.no_grad():
        m.G_w.head.weight.normal_(0, 0.02)
        m.G_w.head.bias.copy_(torch.tensor([0.013, -0.021]))
    cfg = TrainConfig(lambda_rec_warp=10.0, lambda_tv=1e-3)
    photo, f_mc, f_pc = _batch(m, rng, dtype=torch.float64)
    z = m.sample_codes(2, torch.Generator().manual_seed(3), torch.float64)
    names = ["G_w.head.bias", "G_p.head.0.bias"]
    wrapper = _LossWrapper(m, cfg)
    base = dict(m.named_parameters())

    def fn(probes):
        params = {"m." + n: p for n, p in zip(names, probes)}
        return functional_call(wrapper, params, (photo, f_mc, f_pc, z), strict=False)

    err = fd_relative_error(fn, [base[n] for n in names])
    assert err < 1e-3


# -- batches and training ------------------------------------------------------------------

def test_make_batch_requires_same_identity(rng):
    lm = LandmarkSet(template_face((16, 16), 6), (32, 32))
    img = rng.uniform(-1, 1, (32, 32, 3))
    pair = SamplePair(img, img, lm, lm, False)
    with pytest.raises(ValueError):
        make_warper_batch([pair], lm)
    photo, f_mc, f_pc = make_warper_batch([SamplePair(img, img, lm, lm, True)], lm)
    assert photo.shape == (1, 3, 32, 32) and f_pc.shape == (1, 2, 32, 32)
    assert float(f_pc.abs().max()) < 1e-6


def test_nonfinite_loss_raises():
    with pytest.raises(TrainingDiverged, match="iteration 12"):
        check_finite({"a": torch.tensor(1.0), "b": torch.tensor(float("nan"))}, 12)


def test_train_step_returns_floats_and_updates(rng):
    m = small_model()
    opt = torch.optim.Adam(m.parameters(), lr=1e-3)
    before = m.G_w.head.weight.detach().clone()
    out = warper_train_step(m, opt, _batch(m, rng), TrainConfig(), torch.Generator().manual_seed(0), 0)
    assert set(out) == {"warp_rec", "photo_rec", "tv", "total"}
    assert all(isinstance(v, float) for v in out.values())
    assert not torch.equal(before, m.G_w.head.weight)
