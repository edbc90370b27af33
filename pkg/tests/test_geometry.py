import math
import warnings
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from carime.geometry import (
    FLIP_PERMUTATION, DeformationField, GeometryError, LandmarkSet, SingularTPSError, clamp_landmarks,
    exaggeration_degree, field_from_landmarks, mean_landmarks, read_landmarks, resize_field,
    scale_field, warp_image, warp_torch, write_landmarks,
)
from carime.synthetic import TEMPLATE, template_face
from oracles import bilinear_sample_oracle, degree_oracle, fd_relative_error, tps_pixel_oracle


def face(size=256, jitter=0.0, rng=None):
    pts = template_face((size / 2, size / 2), size * 0.25)
    if jitter:
        pts = pts + rng.normal(0, jitter, pts.shape)
    return LandmarkSet(pts, (size, size))


def sample_field_at(field, pts):
    """Bilinearly interpolate the pixel displacement at (x, y) points."""
    d = field.to_pixels()
    xs, ys = pts[:, 0], pts[:, 1]
    dx = ndimage.map_coordinates(d[..., 0], [ys, xs], order=1)
    dy = ndimage.map_coordinates(d[..., 1], [ys, xs], order=1)
    return np.stack([xs + dx, ys + dy], axis=1)


# -- LandmarkSet / files ----------------------------------------------------------------

def test_landmark_set_validates_count_and_finiteness():
    with pytest.raises(GeometryError):
        LandmarkSet(np.zeros((16, 2)), (10, 10))
    bad = np.zeros((17, 2))
    bad[3, 1] = np.nan
    with pytest.raises(GeometryError):
        LandmarkSet(bad, (10, 10))


def test_landmark_file_roundtrip(tmp_path, rng):
    lm = LandmarkSet(rng.uniform(0, 255, (17, 2)), (256, 256))
    write_landmarks(tmp_path / "a.txt", lm)
    back = read_landmarks(tmp_path / "a.txt")
    assert back.image_size == (256, 256)
    np.testing.assert_allclose(back.points, lm.points, atol=1e-6)


def test_untagged_landmark_file_needs_size(tmp_path):
    (tmp_path / "raw.txt").write_text("".join(f"{i} {i + 1}\n" for i in range(17)))
    with pytest.raises(GeometryError, match="size"):
        read_landmarks(tmp_path / "raw.txt")
    lm = read_landmarks(tmp_path / "raw.txt", (40, 30))
    assert lm.points[5].tolist() == [5.0, 6.0]


def test_flip_permutation_is_an_involution():
    perm = np.array(FLIP_PERMUTATION)
    assert np.array_equal(perm[perm], np.arange(17))
    lm = face(64)
    twice = lm.flipped().flipped()
    np.testing.assert_allclose(twice.points, lm.points)


def test_flipping_the_template_keeps_it_symmetric():
    lm = LandmarkSet(template_face((32.0, 40.0), 16.0), (65, 80))
    np.testing.assert_allclose(lm.flipped().points, lm.points, atol=1e-9)


def test_clamp_warns_when_points_move():
    pts = np.full((17, 2), 5.0)
    pts[0] = (-3, 70)
    with pytest.warns(UserWarning, match="clamped"):
        out = clamp_landmarks(LandmarkSet(pts, (64, 64)))
    assert out.points[0].tolist() == [0.0, 63.0]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        clamp_landmarks(LandmarkSet(np.full((17, 2), 5.0), (64, 64)))


# -- mean_landmarks ------------------------------------------------------------------------

def test_mean_of_identical_sets_is_the_set():
    s = face()
    np.testing.assert_array_equal(mean_landmarks([s, s]).points, s.points)
    np.testing.assert_array_max_ulp(mean_landmarks([s] * 7).points, s.points, maxulp=1)


def test_mean_midpoint():
    a = LandmarkSet(np.zeros((17, 2)), (256, 256))
    b = LandmarkSet(np.full((17, 2), 2.0), (256, 256))
    np.testing.assert_array_equal(mean_landmarks([a, b]).points, np.ones((17, 2)))


def test_mean_matches_exact_rational_mean_and_ignores_order(rng):
    sets = [LandmarkSet(rng.uniform(0, 255, (17, 2)) * 10 ** rng.uniform(-3, 0), (256, 256))
            for _ in range(50)]
    got = mean_landmarks(sets).points
    exact = np.zeros((17, 2))
    for i in range(17):
        for k in range(2):
            exact[i, k] = float(sum(Fraction(s.points[i, k]) for s in sets) / len(sets))
    np.testing.assert_array_max_ulp(got, exact, maxulp=1)
    shuffled = [sets[i] for i in rng.permutation(len(sets))]
    assert mean_landmarks(shuffled).points.tobytes() == got.tobytes()


def test_mean_errors():
    with pytest.raises(GeometryError):
        mean_landmarks([])
    with pytest.raises(GeometryError, match="mixed"):
        mean_landmarks([face(256), face(128)])


# -- field_from_landmarks -----------------------------------------------------------------

@pytest.mark.parametrize("anchor", [True, False])
def test_same_landmarks_give_identity_field(anchor):
    f = field_from_landmarks(face(), face(), anchor_border=anchor)
    assert np.abs(f.residual).max() < 1e-6
    assert exaggeration_degree(f) < 1e-6


def test_translation_reproduced_exactly_without_anchors():
    src = face()
    dst = LandmarkSet(src.points + (10, 0), src.image_size)
    f = field_from_landmarks(dst, src, anchor_border=False)
    np.testing.assert_allclose(f.residual[..., 0], 10 * 2 / 256, atol=1e-5)
    np.testing.assert_allclose(f.residual[..., 1], 0, atol=1e-5)


def test_field_maps_dst_landmarks_to_src(rng):
    for _ in range(5):
        src = face(jitter=3, rng=rng)
        dst = LandmarkSet(src.points + rng.normal(0, 6, (17, 2)), src.image_size)
        f = field_from_landmarks(src, dst)
        err = np.linalg.norm(sample_field_at(f, dst.points) - src.points, axis=1)
        assert err.max() < 0.5


def test_dense_field_matches_independent_tps_solve(rng):
    size = 64
    src = face(size, jitter=1, rng=rng)
    dst = LandmarkSet(src.points + rng.normal(0, 2, (17, 2)), (size, size))
    exact = field_from_landmarks(src, dst, anchor_border=False, regularization=0.0).to_pixels()
    regularized = field_from_landmarks(src, dst, anchor_border=False).to_pixels()
    oracle = tps_pixel_oracle(dst.points, src.points - dst.points)
    for _ in range(20):
        i, j = rng.integers(0, size, 2)
        want = oracle(float(j), float(i))
        np.testing.assert_allclose(exact[i, j], want, atol=1e-6)
        np.testing.assert_allclose(regularized[i, j], want, atol=1e-2)
    for k in range(17):
        x, y = dst.points[k]
        np.testing.assert_allclose(oracle(x, y), src.points[k] - dst.points[k], atol=1e-8)


def test_border_anchors_pin_the_frame(rng):
    src = face(jitter=2, rng=rng)
    dst = LandmarkSet(src.points + rng.normal(0, 5, (17, 2)), src.image_size)
    d = field_from_landmarks(src, dst).to_pixels()
    for i, j in [(0, 0), (0, 255), (255, 0), (255, 255), (0, 127), (127, 0)]:
        assert np.abs(d[i, j]).max() < 0.05


def test_collinear_landmarks_are_rejected():
    pts = np.stack([np.linspace(10, 200, 17), np.linspace(10, 200, 17)], axis=1)
    lm = LandmarkSet(pts, (256, 256))
    with pytest.raises(SingularTPSError, match="condition number") as exc:
        field_from_landmarks(lm, lm, anchor_border=False)
    assert exc.value.condition_number > 1e12


def test_mismatched_sizes_rejected():
    with pytest.raises(GeometryError):
        field_from_landmarks(face(256), face(128))


# -- warp_image -------------------------------------------------------------------------------

def test_identity_warp_is_exact(rng):
    img = rng.uniform(-1, 1, (20, 24, 3))
    out = warp_image(img, DeformationField.identity(24, 20))
    assert np.array_equal(out, img)


def test_one_pixel_shift():
    W, H = 12, 8
    img = np.random.default_rng(0).uniform(-1, 1, (H, W, 3))
    res = np.zeros((H, W, 2))
    res[..., 0] = 2.0 / W
    out = warp_image(img, DeformationField(res))
    np.testing.assert_allclose(out[:, :-1], img[:, 1:], atol=1e-12)
    np.testing.assert_allclose(out[:, -1], img[:, -1], atol=1e-12)


def test_warp_matches_bruteforce_oracle(rng):
    for _ in range(10):
        img = rng.uniform(-1, 1, (16, 16, 3))
        res = rng.normal(0, 0.2, (16, 16, 2))
        ref = bilinear_sample_oracle(img, res)
        np.testing.assert_allclose(warp_image(img, DeformationField(res)), ref, atol=1e-5)
        t = warp_torch(torch.from_numpy(img.transpose(2, 0, 1))[None],
                       torch.from_numpy(res.transpose(2, 0, 1))[None])
        np.testing.assert_allclose(t[0].numpy().transpose(1, 2, 0), ref, atol=1e-5)


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_sampler_on_integer_and_half_integer_probes(data):
    H, W = data.draw(st.integers(2, 9)), data.draw(st.integers(2, 9))
    img = data.draw(arrays(np.float64, (H, W, 2), elements=st.floats(-1, 1)))
    steps = data.draw(arrays(np.int64, (H, W, 2), elements=st.integers(-2 * 12, 2 * 12)))
    # displacements in half-pixel steps, converted to normalized units
    res = steps / 2.0 / np.array([W / 2.0, H / 2.0])
    got = warp_image(img, DeformationField(res))
    np.testing.assert_allclose(got, bilinear_sample_oracle(img, res), atol=1e-12)


def test_warp_resolution_mismatch():
    with pytest.raises(GeometryError):
        warp_image(np.zeros((8, 8, 3)), DeformationField.identity(8, 9))


def test_warp_gradients_match_finite_differences():
    g = torch.Generator().manual_seed(0)
    img = torch.rand(1, 2, 8, 8, generator=g, dtype=torch.float64)
    res = torch.randn(1, 2, 8, 8, generator=g, dtype=torch.float64) * 0.15
    weights = torch.randn(1, 2, 8, 8, generator=g, dtype=torch.float64)
    err = fd_relative_error(lambda t: (warp_torch(t[0], t[1]) * weights).sum(), [img, res])
    assert err < 1e-3


# -- scale / resize / degree ----------------------------------------------------------------

def test_scale_field_endpoints(rng):
    f = DeformationField(rng.normal(0, 0.1, (10, 12, 2)))
    assert np.array_equal(scale_field(f, 0).residual, np.zeros_like(f.residual))
    assert scale_field(f, 1) is f
    with pytest.raises(GeometryError):
        scale_field(f, float("nan"))


@pytest.mark.parametrize("s", [0.3, 1.0, 2.0, -1.0, 0.0])
def test_degree_is_absolutely_homogeneous(rng, s):
    f = DeformationField(rng.normal(0, 0.1, (20, 16, 2)))
    assert abs(exaggeration_degree(scale_field(f, s)) - abs(s) * exaggeration_degree(f)) < 1e-6


def test_degree_examples(rng):
    assert exaggeration_degree(DeformationField.identity(16, 16)) == 0
    d = np.zeros((10, 14, 2))
    d[..., 0], d[..., 1] = 3, 4
    assert exaggeration_degree(DeformationField.from_pixels(d)) == pytest.approx(5.0, abs=1e-12)
    res = rng.normal(0, 0.1, (12, 9, 2))
    assert abs(exaggeration_degree(DeformationField(res)) - degree_oracle(res)) < 1e-6


def test_pixel_conversion_roundtrip(rng):
    res = rng.normal(0, 0.1, (6, 10, 2))
    f = DeformationField(res)
    np.testing.assert_allclose(DeformationField.from_pixels(f.to_pixels()).residual, res, atol=1e-15)
    np.testing.assert_allclose(f.to_pixels()[..., 0], res[..., 0] * 5)
    np.testing.assert_allclose(f.to_pixels()[..., 1], res[..., 1] * 3)


def test_sampling_map_of_identity_is_the_grid():
    grid = DeformationField.identity(4, 2).sampling_map()
    np.testing.assert_allclose(grid[0, :, 0], [-0.75, -0.25, 0.25, 0.75])
    np.testing.assert_allclose(grid[:, 0, 1], [-0.5, 0.5])


def test_resize_same_resolution_is_identity(rng):
    f = DeformationField(rng.normal(0, 0.1, (16, 16, 2)))
    np.testing.assert_allclose(resize_field(f, (16, 16)).residual, f.residual, atol=1e-6)


def test_uniform_field_survives_resize_exactly():
    res = np.empty((64, 64, 2))
    res[..., 0], res[..., 1] = 0.0371, -0.113
    down = resize_field(DeformationField(res), (32, 32))
    up = resize_field(down, (64, 64))
    assert np.array_equal(up.residual, res)


def test_sinusoid_resize_roundtrip():
    y, x = np.mgrid[0:256, 0:256] / 256.0
    res = np.stack([0.05 * np.sin(2 * np.pi * x), 0.05 * np.cos(2 * np.pi * y)], axis=-1)
    back = resize_field(resize_field(DeformationField(res), (128, 128)), (256, 256))
    assert np.abs(back.residual - res).max() < 2e-2


def test_resize_rejects_nonpositive():
    with pytest.raises(GeometryError):
        resize_field(DeformationField.identity(8, 8), (0, 4))


def test_field_rejects_nonfinite():
    bad = np.zeros((4, 4, 2))
    bad[1, 1, 0] = math.inf
    with pytest.raises(GeometryError):
        DeformationField(bad)
