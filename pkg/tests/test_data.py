import numpy as np
import pytest

from carime import data
from carime.data import (
    DatasetError, SamplePair, align_and_crop, alignment_transform, augment, augment_one,
    build_index, eye_angle, flip_image, load_mean_landmarks, make_split, read_split,
    resize_crop, sample_pair, write_split,
)
from carime.geometry import CONTOUR, FLIP_PERMUTATION, NUM_LANDMARKS, LandmarkSet, read_landmarks
from carime.synthetic import template_face

W, H = 200, 220


def face(angle=0.0, center=(100, 110), half_width=40):
    return LandmarkSet(template_face(center, half_width, angle), (W, H))


def blob_stack(lm, sigma=1.5):
    """One channel per landmark, each holding a Gaussian blob at that landmark."""
    yy, xx = np.mgrid[0:lm.image_size[1], 0:lm.image_size[0]].astype(np.float64)
    chans = [np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * sigma ** 2)) for x, y in lm.points]
    return np.stack(chans, axis=-1)


def centroids(stack):
    h, w = stack.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    m = stack.sum(axis=(0, 1))
    return np.stack([(stack * xx[..., None]).sum(axis=(0, 1)) / m,
                     (stack * yy[..., None]).sum(axis=(0, 1)) / m], axis=1)


# -- alignment --------------------------------------------------------------

@pytest.mark.parametrize("angle", [-30.0, 0.0, 12.5, 30.0])
def test_alignment_levels_eyes(angle):
    lm = face(angle)
    assert eye_angle(lm) == pytest.approx(angle, abs=1e-9)
    al = alignment_transform(lm, 64)
    assert al.angle_deg == pytest.approx(-angle, abs=0.1)
    out = lm.transformed(al.matrix, (64, 64))
    assert eye_angle(out) == pytest.approx(0.0, abs=1e-9)


def test_alignment_box_is_enlarged_contour_box():
    lm = face(0.0)
    al = alignment_transform(lm, 256)
    c = lm.points[list(CONTOUR)]
    span = c.max(axis=0) - c.min(axis=0)
    assert al.side == pytest.approx(1.3 * span.max(), rel=1e-12)
    out = lm.transformed(al.matrix, (256, 256)).points[list(CONTOUR)]
    out_span = out.max(axis=0) - out.min(axis=0)
    assert out_span.max() == pytest.approx(256 / 1.3, rel=1e-9)
    # box is centered in the crop
    np.testing.assert_allclose((out.max(axis=0) + out.min(axis=0)) / 2, [127.5, 127.5], atol=1e-9)


def test_aligned_pixels_follow_landmarks():
    lm = face(20.0)
    img = blob_stack(lm)
    out, out_lm = align_and_crop(img, lm, 128)
    assert out.shape == (128, 128, NUM_LANDMARKS)
    err = np.abs(centroids(out) - out_lm.points).max()
    assert err < 1.0


def test_align_rejects_size_mismatch():
    lm = face()
    with pytest.raises(ValueError):
        align_and_crop(np.zeros((10, 10, 3)), lm, 32)


# -- augmentation --------------------------------------------------------------

def test_flip_moves_blobs_to_permuted_indices():
    lm = face(7.0)
    img, flm = flip_image(blob_stack(lm), lm)
    c = centroids(img)
    for k in range(NUM_LANDMARKS):
        np.testing.assert_allclose(c[k], flm.points[FLIP_PERMUTATION[k]], atol=1e-6)


def test_double_flip_restores():
    lm = face(3.0)
    img = np.random.default_rng(0).uniform(-1, 1, (H, W, 3))
    a, alm = flip_image(*flip_image(img, lm))
    assert np.array_equal(a, img)
    np.testing.assert_allclose(alm.points, lm.points, rtol=0, atol=1e-12)


def test_resize_crop_keeps_landmarks_on_pixels():
    lm = LandmarkSet(template_face((32, 32), 12, 5.0), (64, 64))
    img = blob_stack(lm, sigma=1.2)
    out, out_lm = resize_crop(img, lm, 72, (3, 5))
    assert out.shape == img.shape
    err = np.abs(centroids(out) - out_lm.points).max()
    assert err < 1.0


def test_augment_noop_when_probabilities_zero(rng):
    lm = face()
    img = rng.uniform(-1, 1, (H, W, 3))
    pair = SamplePair(img, img * 0.5, lm, lm, True)
    out = augment(pair, rng, p_flip=0.0, p_crop=0.0)
    assert np.array_equal(out.photo, pair.photo)
    assert np.array_equal(out.caricature, pair.caricature)
    assert np.array_equal(out.photo_landmarks.points, lm.points)


def test_flip_frequency():
    rng = np.random.default_rng(7)
    lm = LandmarkSet(template_face((4, 4), 2), (9, 9))
    img = np.arange(81, dtype=np.float64).reshape(9, 9, 1)
    flips = 0
    for _ in range(10_000):
        out, _ = augment_one(img, lm, rng, p_flip=0.5, p_crop=0.0)
        flips += out[0, 0, 0] != img[0, 0, 0]
    assert 0.47 <= flips / 10_000 <= 0.53


# -- index, split, sampling ----------------------------------------------------------

def test_index_counts(raw_root):
    idx = build_index(raw_root)
    assert len(idx.identities) == 4
    assert idx.num_photos == 12 and idx.num_caricatures == 12


def test_missing_landmarks_rejected(tmp_path, raw_root):
    import shutil
    root = tmp_path / "broken"
    shutil.copytree(raw_root, root)
    victim = next((root / "landmarks" / "Photo").rglob("*.txt"))
    victim.unlink()
    with pytest.raises(DatasetError, match="missing landmark"):
        build_index(root)


def test_split_is_deterministic_and_disjoint(tmp_path):
    names = [f"id{k}" for k in range(20)]
    a = make_split(names)
    assert a == make_split(list(reversed(names)))
    assert not set(a["train"]) & set(a["test"])
    assert sorted(a["train"] + a["test"]) == sorted(names)
    write_split(tmp_path / "s.txt", a)
    assert read_split(tmp_path / "s.txt") == a
    assert make_split(names, seed=1) != a


def test_split_overlap_rejected(tmp_path):
    p = tmp_path / "s.txt"
    p.write_text("train:\na\nb\ntest:\nb\n")
    with pytest.raises(DatasetError):
        read_split(p)


def test_same_identity_pairs(raw_root):
    idx = build_index(raw_root)
    idx.identities = idx.identities[:1]
    rng = np.random.default_rng(0)
    for _ in range(5):
        pair = sample_pair(idx, "same_identity", rng)
        assert pair.same_identity and pair.photo_id == pair.cari_id


def test_random_pairs_cross_identity_rate(raw_root):
    idx = build_index(raw_root, validate=False)
    idx.identities = idx.identities[:2]
    rng = np.random.default_rng(3)
    n = 4000
    cross = sum(not sample_pair(idx, "random", rng, load=False)[2] for _ in range(n))
    assert abs(cross / n - 0.5) <= 0.03


def test_unknown_policy(raw_root):
    with pytest.raises(ValueError):
        sample_pair(build_index(raw_root, validate=False), "nearest", np.random.default_rng(0))


# -- preprocessing ------------------------------------------------------------------

def test_preprocessed_layout(data_root):
    split = read_split(data_root / "split.txt")
    assert len(split["train"]) == 2 and len(split["test"]) == 2
    idx = build_index(data_root, split="train")
    assert idx.names() == split["train"]
    img, lm = data.load_entry(idx.photo_entries()[0][1])
    assert img.shape == (64, 64, 3) and img.dtype == np.float32
    assert lm.image_size == (64, 64)
    assert eye_angle(lm) == pytest.approx(0.0, abs=0.5)


def test_mean_landmarks_file_matches_training_caricatures(data_root):
    stored = load_mean_landmarks(data_root)
    idx = build_index(data_root, split="train")
    sets = [read_landmarks(e.landmarks) for e in idx.caricature_entries()]
    np.testing.assert_allclose(stored.points, np.mean([s.points for s in sets], axis=0), atol=1e-6)
