import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcbn_sr import data
from mcbn_sr import metrics
from oracles import bicubic_dense


# ---------------------------------------------------------------- bicubic


@pytest.mark.parametrize("size", [(5, 5), (16, 16), (7, 40), (64, 3)])
def test_constant_image_stays_constant(size):
    out = data.bicubic_resize(np.full((12, 9), 0.37), *size)
    assert out.shape == (size[1], size[0])
    np.testing.assert_allclose(out, 0.37, rtol=0, atol=1e-12)


def test_linear_ramp_upscale_stays_linear():
    x = np.arange(20) / 40.0
    ramp = np.tile(x, (20, 1)) * 0.5 + np.tile(x[:, None], (1, 20)) * 0.3
    up = data.bicubic_resize(ramp, 40, 40)
    xs = (np.arange(40) + 0.5) / 2 - 0.5  # source coordinates of output centres
    expected = (xs[None, :] / 40.0) * 0.5 + (xs[:, None] / 40.0) * 0.3
    assert np.max(np.abs(up - expected)[4:-4, 4:-4]) < 1e-6


def test_matches_dense_kernel_summation(rng):
    img = rng.uniform(0, 1, (16, 16))
    np.testing.assert_allclose(data.bicubic_resize(img, 37, 23), bicubic_dense(img, 37, 23), atol=1e-6)


def test_minify_matches_dense_kernel_summation(rng):
    img = rng.uniform(0, 1, (24, 30))
    np.testing.assert_allclose(data.bicubic_resize(img, 10, 8), bicubic_dense(img, 10, 8), atol=1e-6)


def test_resize_rows_sum_to_one():
    for i, o in ((5, 13), (13, 5), (8, 8), (1, 4)):
        np.testing.assert_allclose(data.resize_weights(i, o).sum(axis=1), 1.0, atol=1e-12)


def test_resize_zero_size():
    with pytest.raises(ValueError):
        data.bicubic_resize(np.zeros((4, 4)), 0, 3)


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 20), w=st.integers(1, 20), oh=st.integers(1, 30), ow=st.integers(1, 30),
       seed=st.integers(0, 1000))
def test_resize_stays_in_unit_range(h, w, oh, ow, seed):
    img = np.random.default_rng(seed).uniform(0, 1, (h, w))
    out = data.bicubic_resize(img, ow, oh)
    assert out.shape == (oh, ow) and out.min() >= 0 and out.max() <= 1


@settings(max_examples=30, deadline=None)
@given(h=st.integers(2, 20), w=st.integers(2, 20), oh=st.integers(1, 30), ow=st.integers(1, 30),
       v=st.floats(0, 1))
def test_resize_round_trip_of_constant(h, w, oh, ow, v):
    img = np.full((h, w), v)
    back = data.bicubic_resize(data.bicubic_resize(img, ow, oh), w, h)
    np.testing.assert_allclose(back, v, rtol=0, atol=1e-12)


def test_interpolated_lr_constant_and_identity(rng):
    c = np.full((16, 24), 0.6)
    np.testing.assert_allclose(data.make_interpolated_lr(c, 2), 0.6, atol=1e-12)
    img = rng.uniform(0, 1, (10, 10))
    out = data.make_interpolated_lr(img, 1)
    assert np.array_equal(out, img) and out is not img


def test_interpolated_lr_scale2_better_than_scale4():
    hr = data.crop_to_multiple(data.synthetic_image(96, 96, np.random.default_rng(4)), 4)
    assert metrics.psnr(data.make_interpolated_lr(hr, 2), hr) > metrics.psnr(data.make_interpolated_lr(hr, 4), hr)


def test_interpolated_lr_requires_divisible():
    with pytest.raises(ValueError, match="divisible"):
        data.make_interpolated_lr(np.zeros((9, 8)), 2)


def test_crop_to_multiple():
    assert data.crop_to_multiple(np.zeros((3, 11, 14)), 4).shape == (3, 8, 12)


# ---------------------------------------------------------------- colour


@pytest.mark.parametrize("rgb,y", [((1, 1, 1), 1.0), ((0, 0, 0), 0.0), ((0.5, 0.5, 0.5), 0.5)])
def test_luma(rgb, y):
    assert abs(data.rgb_to_y(np.array(rgb, float).reshape(1, 1, 3))[0, 0] - y) < 1e-6


def test_ycbcr_round_trip(rng):
    rgb = rng.uniform(0, 1, (5, 6, 3))
    ycc = data.rgb_to_ycbcr(rgb)
    np.testing.assert_allclose(data.y_to_rgb_merge(ycc[..., 0], ycc[..., 1], ycc[..., 2]), rgb, atol=1e-9)


def test_gray_has_neutral_chroma():
    ycc = data.rgb_to_ycbcr(np.full((2, 2, 3), 0.3))
    np.testing.assert_allclose(ycc[..., 1:], 0.5, atol=1e-12)


# ---------------------------------------------------------------- crop, patches, augmentation


def test_crop_boundary():
    assert data.crop_boundary(np.zeros((64, 64)), 4).shape == (56, 56)
    img = np.full((10, 12), 0.2)
    assert data.crop_boundary(img, 0) is img
    assert np.all(data.crop_boundary(img, 3) == 0.2)


def test_crop_boundary_too_large():
    with pytest.raises(ValueError):
        data.crop_boundary(np.zeros((6, 6)), 3)


def test_full_size_patches_equal_image(rng):
    hr = rng.uniform(0, 1, (16, 16))
    lr = rng.uniform(0, 1, (16, 16))
    for p in data.extract_patch_pairs(hr, lr, 16, 5, rng):
        assert np.array_equal(p.hr, hr) and np.array_equal(p.lr, lr)


def test_patches_in_bounds_and_aligned():
    h, w, n = 23, 31, 7
    hr = np.arange(h * w, dtype=float).reshape(h, w)
    for seed in range(100):
        corners = data.random_corners(h, w, n, 8, np.random.default_rng(seed))
        assert np.all(corners >= 0) and np.all(corners[:, 0] <= h - n) and np.all(corners[:, 1] <= w - n)
        for p in data.extract_patch_pairs(hr, hr + 0.5, n, 3, np.random.default_rng(seed)):
            assert p.hr.shape == (n, n) and np.array_equal(p.lr, p.hr + 0.5)


def test_patch_corners_deterministic():
    a = data.random_corners(50, 40, 8, 10, np.random.default_rng(3))
    b = data.random_corners(50, 40, 8, 10, np.random.default_rng(3))
    assert np.array_equal(a, b)


def test_patch_too_large():
    with pytest.raises(ValueError):
        data.extract_patch_pairs(np.zeros((8, 8)), np.zeros((8, 8)), 9, 1, np.random.default_rng(0))


class _Coins:
    def __init__(self, value):
        self.value = value

    def random(self, n):
        return np.full(n, self.value)


def test_augment_all_heads_is_invertible(rng):
    pair = data.PatchPair(rng.uniform(size=(6, 6)), rng.uniform(size=(6, 6)))
    out = data.augment(pair, _Coins(0.0))
    expected = np.rot90(pair.hr[::-1, ::-1], 1)
    assert np.array_equal(out.hr, expected)
    assert np.array_equal(data.invert_transforms(out.hr, True, True, True), pair.hr)
    assert np.array_equal(data.invert_transforms(out.lr, True, True, True), pair.lr)


def test_augment_all_tails_is_identity(rng):
    pair = data.PatchPair(rng.uniform(size=(6, 6)), rng.uniform(size=(6, 6)))
    out = data.augment(pair, _Coins(0.9))
    assert np.array_equal(out.hr, pair.hr) and np.array_equal(out.lr, pair.lr)


@pytest.mark.parametrize("flags", [(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)])
def test_transforms_invert(flags, rng):
    a = rng.uniform(size=(2, 5, 7))
    assert np.array_equal(data.invert_transforms(data.apply_transforms(a, *flags), *flags), a)


def test_augment_rates():
    # the 8 flag triples give 8 distinct images of an index grid, so each draw can be decoded
    idx = np.arange(16.0).reshape(4, 4)
    combos = [(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)]
    images = {apply.tobytes(): flags for flags in combos
              for apply in [data.apply_transforms(idx, *map(bool, flags))]}
    assert len(images) == 8
    rng = np.random.default_rng(0)
    counts = np.zeros(3)
    for _ in range(10_000):
        out = data.augment(data.PatchPair(idx, idx), rng)
        counts += images[np.ascontiguousarray(out.hr).tobytes()]
    rates = counts / 10_000
    assert np.all((rates >= 0.47) & (rates <= 0.53))


def test_augment_keeps_lr_hr_correspondence():
    h = w = 6
    coord = np.arange(h * w, dtype=float).reshape(h, w)
    rng = np.random.default_rng(5)
    for _ in range(50):
        out = data.augment(data.PatchPair(coord, coord * 2 + 1), rng)
        assert np.array_equal(out.hr, out.lr * 2 + 1)


def test_high_variance_patches_prefer_texture():
    img = np.full((32, 32), 0.5)
    img[16:, 16:] = np.random.default_rng(0).uniform(size=(16, 16))
    best = data.high_variance_patches(img, img, 16, 1, stride=8)[0]
    assert np.array_equal(best.hr, img[16:, 16:])


def test_sample_stats_batches_shapes_and_error(rng):
    imgs = [rng.uniform(size=(20, 20)) for _ in range(3)]
    batches = data.sample_stats_batches(imgs, 4, 5, 8, np.random.default_rng(0))
    assert len(batches) == 4 and all(b.shape == (5, 1, 8, 8) and b.dtype == np.float32 for b in batches)
    with pytest.raises(data.InsufficientPatchesError, match="40 patches"):
        data.sample_stats_batches(imgs, 8, 5, 8, np.random.default_rng(0), patches_per_image=2)


def test_sample_stats_batches_order_independent(rng):
    imgs = [rng.uniform(size=(20, 20)) for _ in range(3)]
    a = data.sample_stats_batches(imgs, 3, 4, 6, np.random.default_rng(2))
    b = data.sample_stats_batches(imgs, 3, 4, 6, np.random.default_rng(2))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_patch_dataset_pure_function_of_seed():
    imgs = [data.synthetic_image(24, 24, np.random.default_rng(i)) for i in range(3)]

    def draw():
        ds = data.PatchDataset(imgs, 2, 8, 4)
        it = ds.batches(np.random.default_rng(11))
        return [next(it) for _ in range(5)]

    for (a_lr, a_hr), (b_lr, b_hr) in zip(draw(), draw()):
        assert np.array_equal(a_lr, b_lr) and np.array_equal(a_hr, b_hr)
        assert a_lr.shape == (4, 1, 8, 8)


def test_patch_dataset_rejects_small_images():
    with pytest.raises(ValueError):
        data.PatchDataset([np.zeros((6, 6))], 2, 8, 4)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_emitted_planes_in_unit_range(seed):
    img = data.synthetic_image(20, 20, np.random.default_rng(seed))
    lr = data.make_interpolated_lr(img, 2)
    for a in (img, lr):
        assert a.min() >= 0 and a.max() <= 1


# ---------------------------------------------------------------- files


def test_png_round_trip(tmp_path, rng):
    for shape in ((9, 7), (9, 7, 3)):
        img = rng.uniform(0, 1, shape)
        data.save_png(img, tmp_path / "a.png")
        back = data.load_png(tmp_path / "a.png")
        assert back.shape == shape
        assert np.max(np.abs(back - img)) <= 1 / 510 + 1e-12


@pytest.mark.parametrize("v,byte", [(1.0, 255), (0.5, 128), (0.0, 0), (1.7, 255), (-0.2, 0), (0.25, 64)])
def test_png_quantisation(v, byte):
    assert data.to_uint8(np.array([v]))[0] == byte


def test_manifest_round_trip(tmp_path):
    (tmp_path / "a.png").touch()
    data.write_manifest(["b.png", "sub/c.png"], tmp_path / "m.txt", header="two images")
    text = (tmp_path / "m.txt").read_text()
    assert text.startswith("# two images")
    assert data.read_manifest(tmp_path / "m.txt") == ["b.png", "sub/c.png"]
    assert data.list_images(tmp_path, tmp_path / "m.txt") == [tmp_path / "b.png", tmp_path / "sub/c.png"]
    assert data.list_images(tmp_path) == [tmp_path / "a.png"]
