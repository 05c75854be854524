import numpy as np
import pytest

from learned_isp import nn, raw
from learned_isp.raw import BayerImage, UnprocessConfig
from learned_isp.losses import psnr
from learned_isp.tensor import ShapeError, Tensor, philox

from oracles import unprocess_pixelwise

IDENTITY = dict(ccm=np.eye(3), wb_gains=(1.0, 1.0), noise=(0.0, 0.0))


def test_normalize_and_pack():
    b = BayerImage(np.array([[1023, 0], [0, 0]]))
    assert raw.normalize(b).data[0, 0, 0, 0] == 1.0
    codes = np.array([[100, 200], [300, 400]])
    packed = raw.pack_bayer(BayerImage(codes))
    assert packed.shape == (1, 4, 1, 1)
    assert np.allclose(packed.data.reshape(-1), np.array([100, 200, 300, 400]) / 1023)


def test_unpack_pack_bitwise():
    codes = philox(0).integers(0, 1024, (8, 12))
    b = BayerImage(codes)
    assert np.array_equal(raw.unpack_bayer(raw.pack_bayer(b)).data, raw.normalize(b).data)


def test_bayer_validation():
    with pytest.raises(ShapeError):
        BayerImage(np.zeros((3, 4)))
    with pytest.raises(ValueError):
        BayerImage(np.full((2, 2), 1024))


def test_unprocess_gray_float_path():
    rgb = np.full((4, 6, 3), float(raw.linear_to_srgb(0.5)))
    codes = raw.unprocess(rgb, UnprocessConfig(**IDENTITY)).data
    assert np.all(np.abs(codes.astype(int) - 512) <= 1)


def test_unprocess_gray_8bit_path():
    # 8-bit quantization of the sRGB code shifts linear 0.5 by a few codes
    code8 = int(np.round(float(raw.linear_to_srgb(0.5)) * 255))
    expected = int(np.round(float(raw.srgb_to_linear(code8 / 255)) * 1023))
    rgb = np.full((4, 4, 3), code8, np.uint8)
    codes = raw.unprocess(rgb, UnprocessConfig(**IDENTITY)).data
    assert np.all(codes == expected)


def test_unprocess_pure_red_sites():
    rgb = np.zeros((4, 4, 3), np.uint8)
    rgb[..., 0] = 255
    cfg = UnprocessConfig(ccm=np.eye(3), wb_gains=(2.0, 1.5), noise=(0.0, 0.0))
    codes = raw.unprocess(rgb, cfg).data
    masks = raw.cfa_masks(4, 4)
    assert np.all(codes[masks[0]] == 512)  # round(0.5 * 1023)
    assert np.all(codes[~masks[0]] == 0)


@pytest.mark.parametrize("channel", [0, 1, 2])
def test_cfa_site_purity(channel):
    rgb = np.zeros((6, 8, 3), np.uint8)
    rgb[..., channel] = 200
    codes = raw.unprocess(rgb, UnprocessConfig(**IDENTITY)).data
    mask = raw.cfa_masks(6, 8)[channel]
    assert np.all(codes[mask] > 0) and np.all(codes[~mask] == 0)


def test_unprocess_deterministic():
    rgb = raw.synthetic_scene(32, 32, 3)
    cfg = UnprocessConfig.sample(philox(4))
    a = raw.unprocess(rgb, cfg).data
    assert a.tobytes() == raw.unprocess(rgb, cfg).data.tobytes()


def test_unprocess_matches_pixel_oracle():
    rng = philox(9)
    rgb = rng.integers(0, 256, (10, 12, 3)).astype(np.uint8)
    cfg = UnprocessConfig.sample(rng)
    z = philox(cfg.seed).standard_normal((10, 12))
    ref = unprocess_pixelwise(rgb, cfg.ccm.tolist(), cfg.wb_gains, cfg.noise, z)
    assert np.max(np.abs(raw.unprocess(rgb, cfg).data.astype(int) - ref)) <= 1


def test_quantization_bound():
    rng = philox(2)
    rgb = rng.uniform(0, 1, (16, 16, 3))
    cfg = UnprocessConfig(**IDENTITY)
    codes = raw.unprocess(rgb, cfg).data
    lin = raw.srgb_to_linear(rgb)
    mosaic = (lin.transpose(2, 0, 1) * raw.cfa_masks(16, 16)).sum(axis=0)
    assert np.all(np.abs(codes / 1023 - mosaic) <= 0.5 / 1023 + 1e-12)


def test_unprocess_config_validation():
    with pytest.raises(ValueError, match="invertible"):
        UnprocessConfig(ccm=np.ones((3, 3)))
    with pytest.raises(ValueError):
        UnprocessConfig(wb_gains=(0.5, 1.0))
    assert np.allclose(raw.DEFAULT_CCM.sum(axis=1), 1.0)


def test_flip_keep_and_double():
    r = Tensor(philox(1).uniform(0, 1, (1, 4, 3, 5)))
    g = Tensor(philox(2).uniform(0, 1, (1, 3, 6, 10)))
    assert raw.augment_flip(r, g, False) == (r, g)
    r2, g2 = raw.augment_flip(*raw.augment_flip(r, g, True), True)
    assert np.array_equal(r2.data, r.data) and np.array_equal(g2.data, g.data)


def test_flip_matches_per_plane_oracle():
    rgb = raw.synthetic_scene(16, 20, 5)
    b = raw.unprocess(rgb, UnprocessConfig(**IDENTITY))
    r_t, g_t = raw.pack_bayer(b), raw.rgb_to_tensor(rgb)
    fr, fg = raw.augment_flip(r_t, g_t, True)
    # every CFA plane (R, G_r, G_b, B) is mirrored in place, none swap roles
    assert np.array_equal(fr.data, r_t.data[..., ::-1])
    assert np.array_equal(fg.data, raw.rgb_to_tensor(rgb[:, ::-1].copy()).data)
    # R plane of the flipped mosaic, read straight from the full-resolution flip
    mirrored = b.data[:, ::-1]
    assert np.array_equal(fr.data[0, 0] * 1023, np.round(mirrored[0::2, 1::2].astype(np.float32)))


def test_bilinear_sanity_floor():
    rgb = raw.synthetic_scene(128, 128, 7).astype(np.float64) / 255
    from scipy import ndimage
    smooth = ndimage.gaussian_filter(rgb, sigma=(2, 2, 0))
    b = raw.unprocess(smooth, UnprocessConfig(**IDENTITY))
    assert psnr(raw.bilinear_baseline(b), smooth) >= 30.0


def test_make_dataset_contract(scene_dir, tmp_path):
    m = raw.make_dataset(scene_dir, tmp_path / "a", 10, patch=64, seed=3)
    man = raw.read_manifest(m)
    assert len(man) == 10
    assert man.header["seed"] == "3" and "ccm" in man.header
    for rp, gp in man.paths():
        b = raw.read_raw_png(rp)
        assert (b.height, b.width) == (64, 64)
        assert raw.read_rgb_png(gp).shape == (64, 64, 3)


def test_make_dataset_deterministic(scene_dir, tmp_path):
    a = raw.make_dataset(scene_dir, tmp_path / "a", 4, patch=32, seed=5)
    b = raw.make_dataset(scene_dir, tmp_path / "b", 4, patch=32, seed=5)
    assert a.read_bytes() == b.read_bytes()
    for name in ("raw/000003.png", "rgb/000000.png"):
        assert (a.parent / name).read_bytes() == (b.parent / name).read_bytes()


def test_make_dataset_errors(scene_dir, tmp_path):
    with pytest.raises(FileNotFoundError):
        raw.make_dataset(tmp_path / "missing", tmp_path / "o", 1)
    with pytest.raises(ValueError, match="smaller"):
        raw.make_dataset(scene_dir, tmp_path / "o", 1, patch=512)


def test_png_roundtrip(tmp_path):
    rgb = raw.synthetic_scene(24, 32, 1)
    raw.write_rgb_png(tmp_path / "x.png", rgb)
    assert np.array_equal(raw.read_rgb_png(tmp_path / "x.png"), rgb)
    b = BayerImage(philox(0).integers(0, 1024, (8, 6)))
    raw.write_raw_png(tmp_path / "r.png", b)
    assert np.array_equal(raw.read_raw_png(tmp_path / "r.png").data, b.data)


def test_tensor_rgb8_roundtrip():
    rgb = raw.synthetic_scene(8, 10, 2)
    assert np.array_equal(raw.tensor_to_rgb8(raw.rgb_to_tensor(rgb)), rgb)
