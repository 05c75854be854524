"""Bayer-domain data: packing, synthetic RAW generation, dataset files, flips.

RAW frames are RGGB mosaics with 10-bit codes and black level 0.  The
synthetic generator inverts a simple ISP (sRGB transfer, colour matrix,
white balance) and adds heteroscedastic Gaussian noise.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage, special

from . import nn
from .tensor import ShapeError, Tensor, philox

log = logging.getLogger(__name__)

BIT_DEPTH = 10
WHITE = (1 << BIT_DEPTH) - 1

# rows sum to 1; diagonal 1.6, off-diagonal -0.3
DEFAULT_CCM = np.array(
    [[1.6, -0.3, -0.3],
     [-0.3, 1.6, -0.3],
     [-0.3, -0.3, 1.6]]
)
R_GAIN_RANGE = (1.5, 2.5)
B_GAIN_RANGE = (1.3, 2.0)
READ_VAR_RANGE = (1e-6, 1e-4)
SHOT_RANGE = (1e-4, 1e-2)
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass
class BayerImage:
    data: np.ndarray  # (H, W) uint16 codes
    bit_depth: int = BIT_DEPTH
    cfa: str = "RGGB"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint16)
        if self.data.ndim != 2:
            raise ShapeError(f"BayerImage data must be 2-D, got {self.data.shape}")
        h, w = self.data.shape
        if h % 2 or w % 2:
            raise ShapeError(f"BayerImage extents must be even, got {h}x{w}")
        if self.data.size and int(self.data.max()) > (1 << self.bit_depth) - 1:
            raise ValueError(f"code {int(self.data.max())} exceeds {self.bit_depth}-bit range")
        if self.cfa != "RGGB":
            raise ValueError(f"only RGGB is supported, got {self.cfa}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class UnprocessConfig:
    ccm: np.ndarray = field(default_factory=lambda: DEFAULT_CCM.copy())
    wb_gains: tuple[float, float] = (2.0, 1.65)
    noise: tuple[float, float] = (0.0, 0.0)  # (read variance, shot coefficient)
    seed: int = 0

    def __post_init__(self):
        self.ccm = np.asarray(self.ccm, dtype=np.float64)
        if self.ccm.shape != (3, 3):
            raise ValueError(f"ccm must be 3x3, got {self.ccm.shape}")
        if abs(np.linalg.det(self.ccm)) < 1e-9:
            raise ValueError("ccm is not invertible")
        if min(self.wb_gains) < 1.0:
            raise ValueError(f"white-balance gains must be >= 1, got {self.wb_gains}")
        if min(self.noise) < 0:
            raise ValueError(f"noise parameters must be non-negative, got {self.noise}")

    @classmethod
    def sample(cls, rng: np.random.Generator, ccm: np.ndarray | None = None, noise: bool = True) -> "UnprocessConfig":
        """Random gains and log-uniform noise levels; ccm stays fixed."""
        r = rng.uniform(*R_GAIN_RANGE)
        b = rng.uniform(*B_GAIN_RANGE)
        read = math.exp(rng.uniform(math.log(READ_VAR_RANGE[0]), math.log(READ_VAR_RANGE[1])))
        shot = math.exp(rng.uniform(math.log(SHOT_RANGE[0]), math.log(SHOT_RANGE[1])))
        seed = int(rng.integers(0, 2**63 - 1))
        return cls(
            ccm=DEFAULT_CCM.copy() if ccm is None else ccm,
            wb_gains=(r, b),
            noise=(read, shot) if noise else (0.0, 0.0),
            seed=seed,
        )


def srgb_to_linear(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(v: np.ndarray) -> np.ndarray:
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)
    return np.where(v <= 0.0031308, 12.92 * v, 1.055 * v ** (1 / 2.4) - 0.055)


def cfa_masks(height: int, width: int) -> np.ndarray:
    """(3, H, W) boolean site masks for R, G, B under RGGB."""
    m = np.zeros((3, height, width), bool)
    m[0, 0::2, 0::2] = True
    m[1, 0::2, 1::2] = True
    m[1, 1::2, 0::2] = True
    m[2, 1::2, 1::2] = True
    return m


def _as_float_rgb(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeError(f"RGB image must be (H, W, 3), got {rgb.shape}")
    if rgb.dtype == np.uint8:
        return rgb.astype(np.float64) / 255.0
    return np.clip(rgb.astype(np.float64), 0.0, 1.0)


def unprocess(rgb: np.ndarray, cfg: UnprocessConfig) -> BayerImage:
    """Turn an sRGB image (uint8, or float in [0, 1]) into a noisy RGGB mosaic.

    Steps: sRGB decode, inverse colour matrix, divide R/B by the white-balance
    gains, sample the mosaic, add N(0, read + shot * v) noise, clamp, and
    quantize to 10-bit codes.  Noise draws come from a Philox stream seeded by
    ``cfg.seed``, one standard normal per mosaic site in raster order.
    """
    img = _as_float_rgb(rgb)
    H, W, _ = img.shape
    if H % 2 or W % 2:
        raise ShapeError(f"unprocess needs even extents, got {H}x{W}")
    lin = srgb_to_linear(img)
    cam = lin @ np.linalg.inv(cfg.ccm).T
    cam = cam / np.array([cfg.wb_gains[0], 1.0, cfg.wb_gains[1]])
    masks = cfa_masks(H, W)
    mosaic = (cam.transpose(2, 0, 1) * masks).sum(axis=0)
    read, shot = cfg.noise
    if read > 0 or shot > 0:
        z = philox(cfg.seed).standard_normal((H, W))
        var = np.maximum(read + shot * mosaic, 0.0)
        mosaic = mosaic + np.sqrt(var) * z
    mosaic = np.clip(mosaic, 0.0, 1.0)
    return BayerImage(np.round(mosaic * WHITE).astype(np.uint16))


def normalize(b: BayerImage) -> Tensor:
    """(1, 1, H, W) float tensor of codes / (2^bits - 1)."""
    white = (1 << b.bit_depth) - 1
    return Tensor((b.data.astype(np.float32) / np.float32(white))[None, None])


def pack_bayer(b: BayerImage) -> Tensor:
    """(1, 4, H/2, W/2) with channels (R, G_r, G_b, B)."""
    return nn.space_to_depth(normalize(b), 2)


def unpack_bayer(t: Tensor) -> Tensor:
    if t.shape[1] != 4:
        raise ShapeError(f"packed Bayer tensor needs 4 channels, got {t.shape}")
    return nn.pixel_shuffle(t, 2)


def rgb_to_tensor(rgb: np.ndarray) -> Tensor:
    return Tensor(_as_float_rgb(rgb).transpose(2, 0, 1)[None].astype(np.float32))


def tensor_to_rgb8(t: Tensor) -> np.ndarray:
    if t.shape[0] != 1 or t.shape[1] != 3:
        raise ShapeError(f"expected a (1, 3, H, W) tensor, got {t.shape}")
    return np.round(np.clip(t.data[0].transpose(1, 2, 0), 0, 1) * 255).astype(np.uint8)


_FLIP_CHANNELS = (1, 0, 3, 2)


def augment_flip(raw_t: Tensor, rgb_t: Tensor, flip: bool) -> tuple[Tensor, Tensor]:
    """Horizontal flip of a packed RAW / RGB pair that keeps the RGGB channel order.

    The mosaic is flipped at full resolution and repacked; an even-width
    mirror turns RGGB into GRBG, so the (R, G_r) and (G_b, B) channels are
    swapped back afterwards.
    """
    if not flip:
        return raw_t, rgb_t
    raw = nn.space_to_depth(nn.flip_width(unpack_bayer(raw_t)), 2)
    return nn.permute_channels(raw, _FLIP_CHANNELS), nn.flip_width(rgb_t)


def bilinear_demosaic(mosaic: np.ndarray) -> np.ndarray:
    """Classic bilinear demosaic of a float RGGB mosaic -> (H, W, 3)."""
    mosaic = np.asarray(mosaic, dtype=np.float64)
    H, W = mosaic.shape
    masks = cfa_masks(H, W)
    k_g = np.array([[0, 1, 0], [1, 4, 1], [0, 1, 0]]) / 4.0
    k_rb = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]]) / 4.0
    out = np.empty((H, W, 3))
    for c, k in ((0, k_rb), (1, k_g), (2, k_rb)):
        # normalized convolution so image borders stay unbiased
        num = ndimage.convolve(mosaic * masks[c], k, mode="constant")
        den = ndimage.convolve(masks[c].astype(np.float64), k, mode="constant")
        out[..., c] = num / den
    return out


def bilinear_baseline(raw: BayerImage | np.ndarray) -> np.ndarray:
    """Fixed non-learned ISP: bilinear demosaic followed by sRGB encoding, float (H, W, 3)."""
    if isinstance(raw, BayerImage):
        mosaic = raw.data.astype(np.float64) / ((1 << raw.bit_depth) - 1)
    else:
        mosaic = np.asarray(raw, dtype=np.float64)
    return linear_to_srgb(bilinear_demosaic(mosaic))


# ---------------------------------------------------------------- file IO

def read_raw_png(path: str | Path) -> BayerImage:
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim != 2:
        raise ShapeError(f"{path}: RAW PNG must be single-channel, got shape {arr.shape}")
    return BayerImage(arr.astype(np.uint16))


def write_raw_png(path: str | Path, b: BayerImage) -> None:
    Image.fromarray(b.data.astype(np.uint16)).save(path, format="PNG")


def read_rgb_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("RGB"))


def write_rgb_png(path: str | Path, rgb: np.ndarray) -> None:
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def synthetic_scene(height: int, width: int, seed: int) -> np.ndarray:
    """Smooth procedural sRGB scene: gradients, soft blobs and mild texture, uint8 (H, W, 3)."""
    rng = philox(seed)
    yy, xx = np.mgrid[0:height, 0:width] / max(height, width)
    img = np.empty((height, width, 3))
    for c in range(3):
        a, b, c0 = rng.uniform(-0.5, 0.5, 3)
        img[..., c] = 0.45 + a * xx + b * yy + 0.1 * c0
    for _ in range(int(rng.integers(6, 14))):
        cy, cx = rng.uniform(0, 1, 2) * (height / max(height, width), width / max(height, width))
        r = rng.uniform(0.04, 0.25)
        colour = rng.uniform(0.05, 0.95, 3)
        weight = special.expit((r * r - (yy - cy) ** 2 - (xx - cx) ** 2) / (0.15 * r * r))
        img = img * (1 - weight[..., None]) + colour * weight[..., None]
    freq = rng.uniform(8, 30, 2)
    phase = rng.uniform(0, 2 * np.pi, 2)
    texture = 0.04 * np.sin(freq[0] * 2 * np.pi * xx + phase[0]) * np.sin(freq[1] * 2 * np.pi * yy + phase[1])
    img = img + texture[..., None]
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def write_synthetic_scenes(out_dir: str | Path, count: int, size: tuple[int, int] = (512, 512), seed: int = 0) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        p = out_dir / f"scene_{i:04d}.png"
        write_rgb_png(p, synthetic_scene(size[0], size[1], seed * 100003 + i))
        paths.append(p)
    return paths


# ------------------------------------------------------------ datasets

@dataclass
class Manifest:
    root: Path
    pairs: list[tuple[str, str]]
    header: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.pairs)

    def paths(self):
        for raw, rgb in self.pairs:
            yield self.root / raw, self.root / rgb

    def load_pair(self, i: int) -> tuple[BayerImage, np.ndarray]:
        raw, rgb = self.pairs[i]
        return read_raw_png(self.root / raw), read_rgb_png(self.root / rgb)

    def subset(self, start: int, stop: int | None = None) -> "Manifest":
        return Manifest(self.root, self.pairs[start:stop], dict(self.header))


def write_manifest(path: str | Path, pairs: list[tuple[str, str]], header: dict[str, str]) -> None:
    lines = [f"# {k}={v}" for k, v in header.items()]
    lines += [f"{raw}\t{rgb}" for raw, rgb in pairs]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    header: dict[str, str] = {}
    pairs: list[tuple[str, str]] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, sep, value = line[1:].strip().partition("=")
            if sep:
                header[key.strip()] = value.strip()
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected raw_path<TAB>rgb_path")
        pairs.append((parts[0], parts[1]))
    return Manifest(path.parent, pairs, header)


def _format_ccm(ccm: np.ndarray) -> str:
    return ";".join(",".join(f"{v:.6g}" for v in row) for row in ccm)


def make_dataset(
    src_dir: str | Path,
    out_dir: str | Path,
    count: int,
    patch: int = 256,
    seed: int = 0,
    noise: bool = True,
    read_var_range: tuple[float, float] | None = None,
    shot_range: tuple[float, float] | None = None,
) -> Path:
    """Cut ``count`` aligned RAW/RGB patch pairs from the images in ``src_dir``.

    Pair ``i`` draws its source image, crop offset, gains and noise from a
    Philox stream keyed by ``(seed, i)``, so output does not depend on
    processing order.  Returns the manifest path.
    """
    src_dir, out_dir = Path(src_dir), Path(out_dir)
    if not src_dir.is_dir():
        raise FileNotFoundError(f"source directory {src_dir} does not exist")
    sources = sorted(p for p in src_dir.iterdir() if p.suffix.lower() in IMAGE_EXTS)
    if not sources:
        raise FileNotFoundError(f"no RGB images found in {src_dir}")
    if patch <= 0 or patch % 2:
        raise ValueError(f"patch size must be positive and even, got {patch}")
    images = []
    for p in sources:
        try:
            img = read_rgb_png(p)
        except OSError as exc:
            raise OSError(f"cannot read source image {p}: {exc}") from exc
        if min(img.shape[:2]) < patch:
            raise ValueError(f"source image {p} ({img.shape[1]}x{img.shape[0]}) smaller than patch {patch}")
        images.append(img)

    (out_dir / "raw").mkdir(parents=True, exist_ok=True)
    (out_dir / "rgb").mkdir(parents=True, exist_ok=True)
    pairs = []
    for i in range(count):
        rng = philox([seed, i])
        img = images[int(rng.integers(len(images)))]
        y = int(rng.integers(0, img.shape[0] - patch + 1)) & ~1
        x = int(rng.integers(0, img.shape[1] - patch + 1)) & ~1
        crop = img[y:y + patch, x:x + patch]
        cfg = UnprocessConfig.sample(rng, noise=noise)
        if noise and (read_var_range or shot_range):
            read, shot = cfg.noise
            if read_var_range:
                read = math.exp(rng.uniform(*np.log(read_var_range)))
            if shot_range:
                shot = math.exp(rng.uniform(*np.log(shot_range)))
            cfg.noise = (read, shot)
        raw = unprocess(crop, cfg)
        name = f"{i:06d}.png"
        write_raw_png(out_dir / "raw" / name, raw)
        write_rgb_png(out_dir / "rgb" / name, crop)
        pairs.append((f"raw/{name}", f"rgb/{name}"))
    header = {
        "format": "learned-isp-manifest-1",
        "seed": str(seed),
        "count": str(count),
        "patch": str(patch),
        "bit_depth": str(BIT_DEPTH),
        "cfa": "RGGB",
        "black_level": "0",
        "ccm": _format_ccm(DEFAULT_CCM),
        "r_gain": f"{R_GAIN_RANGE[0]:g}-{R_GAIN_RANGE[1]:g}",
        "b_gain": f"{B_GAIN_RANGE[0]:g}-{B_GAIN_RANGE[1]:g}",
        "noise": "on" if noise else "off",
        "read_var": "{:g}-{:g}".format(*(read_var_range or READ_VAR_RANGE)),
        "shot": "{:g}-{:g}".format(*(shot_range or SHOT_RANGE)),
        "sources": ",".join(p.name for p in sources),
    }
    manifest = out_dir / "manifest.txt"
    write_manifest(manifest, pairs, header)
    log.info("wrote %d pairs to %s", count, out_dir)
    return manifest
