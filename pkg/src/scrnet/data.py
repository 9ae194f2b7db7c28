"""Image/mask datasets: PPM/PGM codecs, resizing, splits, augmentation and a synthetic generator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

IMAGE_EXTS = (".ppm", ".png")
MASK_EXTS = (".pgm", ".png")


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float64 in [0, 1]
    mask: np.ndarray  # (1, H, W) float64 in {0, 1}
    id: str
    origin: str = ""
    meta: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DatasetError(f"sample {self.id}: image must be (3,H,W), got {self.image.shape}")
        if self.mask.shape != (1,) + self.image.shape[1:]:
            raise DatasetError(f"sample {self.id}: mask {self.mask.shape} does not match image {self.image.shape}")

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


# ---------------------------------------------------------------------------
# netpbm codecs
# ---------------------------------------------------------------------------


def _header_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ValueError("malformed header")
        tokens.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise ValueError("missing whitespace after header")
    return tokens, pos + 1


def decode_netpbm(buf: bytes) -> np.ndarray:
    """Decode binary P6 (-> H,W,3) or P5 (-> H,W) with maxval 255 into uint8."""
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported magic {magic!r}")
    (w, h, maxval), pos = _header_tokens(buf, 3)
    if maxval != 255 or w < 1 or h < 1:
        raise ValueError(f"unsupported geometry {w}x{h} maxval {maxval}")
    ch = 3 if magic == b"P6" else 1
    n = w * h * ch
    if len(buf) - pos < n:
        raise ValueError(f"pixel data truncated: {len(buf) - pos} of {n} bytes")
    arr = np.frombuffer(buf, np.uint8, n, pos)
    return arr.reshape(h, w, 3) if ch == 3 else arr.reshape(h, w)


def encode_netpbm(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    elif arr.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError(f"cannot encode array of shape {arr.shape}")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(arr).tobytes()


def read_image_file(path) -> np.ndarray:
    """Read a PPM/PGM/PNG file into uint8 (H,W) or (H,W,3); errors name the path."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".png":
            from PIL import Image

            with Image.open(path) as im:
                if im.mode not in ("L", "RGB"):
                    im = im.convert("RGB")
                return np.asarray(im, dtype=np.uint8)
        return decode_netpbm(path.read_bytes())
    except ImportError:
        raise DatasetError(f"{path}: PNG support needs Pillow") from None
    except Exception as exc:  # noqa: BLE001 - any decoder failure is reported with the path
        raise DatasetError(f"cannot decode {path}: {exc}") from None


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, image: np.ndarray) -> None:
    """Write a (3,H,W) float image in [0,1] as P6."""
    Path(path).write_bytes(encode_netpbm(to_uint8(image).transpose(1, 2, 0)))


def write_mask(path, mask: np.ndarray) -> None:
    """Write a binary (1,H,W) or (H,W) mask as P5 with values 0/255."""
    m = np.asarray(mask).reshape(np.shape(mask)[-2:])
    Path(path).write_bytes(encode_netpbm(np.where(m > 0.5, 255, 0).astype(np.uint8)))


# ---------------------------------------------------------------------------
# resizing
# ---------------------------------------------------------------------------


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres, edge-clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a (C,H,W) array with half-pixel alignment."""
    c, h, w = img.shape
    oh, ow = size
    if (h, w) == (oh, ow):
        return img.copy()
    y0, y1, fy = _axis_weights(h, oh)
    x0, x1, fx = _axis_weights(w, ow)
    rows = img[:, y0, :] * (1 - fy)[None, :, None] + img[:, y1, :] * fy[None, :, None]
    return rows[:, :, x0] * (1 - fx) + rows[:, :, x1] * fx


def resize_nearest(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    c, h, w = img.shape
    oh, ow = size
    ys = np.minimum((np.arange(oh) * h) // oh, h - 1)
    xs = np.minimum((np.arange(ow) * w) // ow, w - 1)
    return img[:, ys][:, :, xs]


def image_from_uint8(raw: np.ndarray) -> np.ndarray:
    x = raw.astype(np.float64) / 255.0
    if x.ndim == 2:
        return np.repeat(x[None], 3, axis=0)
    return x.transpose(2, 0, 1)


def mask_from_uint8(raw: np.ndarray) -> np.ndarray:
    if raw.ndim == 3:
        raw = raw.max(axis=2)
    return (raw > 127).astype(np.float64)[None]


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def _index(folder: Path, exts) -> dict[str, Path]:
    out = {}
    for p in sorted(folder.iterdir()):
        if p.is_file() and p.suffix.lower() in exts:
            out.setdefault(p.stem, p)
    return out


def load_dataset(root, resize_to: tuple[int, int] | None = (256, 256)) -> list[Sample]:
    """Load ``root/images/<id>`` with ``root/masks/<id>`` pairs, sorted by id."""
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise DatasetError(f"{root}: expected images/ and masks/ subdirectories")
    images = _index(img_dir, IMAGE_EXTS)
    masks = _index(mask_dir, MASK_EXTS)
    if not images:
        raise DatasetError(f"{root}: no samples (images/ is empty)")
    samples = []
    for stem in sorted(images):
        if stem not in masks:
            raise DatasetError(f"image {stem!r} has no mask in {mask_dir}")
        img = image_from_uint8(read_image_file(images[stem]))
        mask = mask_from_uint8(read_image_file(masks[stem]))
        if mask.shape[1:] != img.shape[1:]:
            raise DatasetError(f"{stem!r}: mask {mask.shape[1:]} and image {img.shape[1:]} sizes differ")
        if resize_to is not None:
            img = np.clip(resize_bilinear(img, resize_to), 0.0, 1.0)
            mask = (resize_nearest(mask, resize_to) > 0.5).astype(np.float64)
        samples.append(Sample(img, mask, stem, str(images[stem])))
    return samples


def write_dataset(samples, root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_image(root / "images" / f"{s.id}.ppm", s.image)
        write_mask(root / "masks" / f"{s.id}.pgm", s.mask)


def split_counts(n: int, fractions) -> tuple[int, int, int]:
    """Floor each share; whatever is left over goes to the first (training) split."""
    fr = [float(f) for f in fractions]
    if len(fr) != 3 or any(f <= 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise DatasetError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    counts = [math.floor(n * f) for f in fr]
    counts[0] += n - sum(counts)
    if min(counts) == 0:
        raise DatasetError(f"{n} samples are too few for splits {fractions}: counts {counts}")
    return tuple(counts)


def split_dataset(samples, fractions=(0.7, 0.1, 0.2), seed: int = 0):
    counts = split_counts(len(samples), fractions)
    order = np.random.default_rng(seed).permutation(len(samples))
    a, b = counts[0], counts[0] + counts[1]
    pick = lambda idx: [samples[i] for i in idx]  # noqa: E731
    return pick(order[:a]), pick(order[a:b]), pick(order[b:])


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentConfig:
    p: float = 0.5
    rotation: float = 30.0
    hflip: bool = True
    vflip: bool = True
    elastic_alpha: float = 34.0
    elastic_sigma: float = 4.0
    brightness: float = 0.2
    contrast: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"augmentation probability must lie in [0, 1], got {self.p}")
        if self.elastic_sigma <= 0:
            raise ValueError("elastic sigma must be positive")


def sample_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator per (seed, epoch, sample index...)."""
    return np.random.default_rng([int(seed), *(int(s) for s in stream)])


def rotate(sample: Sample, angle: float) -> Sample:
    """Counter-clockwise rotation about the centre; exact for multiples of 90 degrees."""
    quarter = angle / 90.0
    if float(quarter).is_integer():
        k = int(quarter) % 4
        return replace(sample, image=np.rot90(sample.image, k, (1, 2)).copy(),
                       mask=np.rot90(sample.mask, k, (1, 2)).copy())
    img = ndimage.rotate(sample.image, angle, axes=(2, 1), reshape=False, order=1, mode="constant")
    mask = ndimage.rotate(sample.mask, angle, axes=(2, 1), reshape=False, order=0, mode="constant")
    return replace(sample, image=np.clip(img, 0, 1), mask=(mask > 0.5).astype(np.float64))


def hflip(sample: Sample) -> Sample:
    return replace(sample, image=sample.image[:, :, ::-1].copy(), mask=sample.mask[:, :, ::-1].copy())


def vflip(sample: Sample) -> Sample:
    return replace(sample, image=sample.image[:, ::-1].copy(), mask=sample.mask[:, ::-1].copy())


def elastic(sample: Sample, alpha: float, sigma: float, rng: np.random.Generator) -> Sample:
    """Smooth random displacement field; bilinear for the image, nearest for the mask."""
    h, w = sample.size
    dy = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma, mode="constant") * alpha
    dx = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma, mode="constant") * alpha
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = np.array([yy + dy, xx + dx])
    img = np.stack([ndimage.map_coordinates(c, coords, order=1, mode="reflect") for c in sample.image])
    mask = ndimage.map_coordinates(sample.mask[0], coords, order=0, mode="reflect")[None]
    return replace(sample, image=np.clip(img, 0, 1), mask=(mask > 0.5).astype(np.float64))


def light(sample: Sample, brightness: float, contrast: float) -> Sample:
    """Additive brightness shift and multiplicative contrast about the image mean."""
    img = sample.image
    img = (img - img.mean()) * (1.0 + contrast) + img.mean() + brightness
    return replace(sample, image=np.clip(img, 0, 1))


def augment(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Rotation, flips, elastic warp and light changes, each applied with probability ``cfg.p``."""
    out = sample
    if cfg.rotation > 0 and rng.random() < cfg.p:
        out = rotate(out, rng.uniform(-cfg.rotation, cfg.rotation))
    if cfg.hflip and rng.random() < cfg.p:
        out = hflip(out)
    if cfg.vflip and rng.random() < cfg.p:
        out = vflip(out)
    if cfg.elastic_alpha > 0 and rng.random() < cfg.p:
        out = elastic(out, cfg.elastic_alpha, cfg.elastic_sigma, rng)
    if rng.random() < cfg.p:
        out = light(out, rng.uniform(-cfg.brightness, cfg.brightness), rng.uniform(-cfg.contrast, cfg.contrast))
    return out


# ---------------------------------------------------------------------------
# synthetic ultrasound-like data
# ---------------------------------------------------------------------------

FG_BAND = (0.02, 0.40)
SPECKLE_SHAPE = 4.0  # gamma shape of the multiplicative speckle; std = 1/sqrt(shape)


def ellipse_mask(h: int, w: int, ellipses) -> np.ndarray:
    """Union of axis-aligned ellipses ((x-cx)/a)^2 + ((y-cy)/b)^2 <= 1 on pixel indices."""
    yy, xx = np.mgrid[0:h, 0:w]
    m = np.zeros((h, w), dtype=bool)
    for cx, cy, a, b in ellipses:
        m |= ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0
    return m


def _draw_ellipses(rng, h, w):
    count = int(rng.integers(1, 3))
    short = min(h, w)
    out = []
    for _ in range(count):
        a = rng.uniform(0.08, 0.25) * short
        b = rng.uniform(0.08, 0.25) * short
        cx = rng.uniform(a, w - 1 - a)
        cy = rng.uniform(b, h - 1 - b)
        out.append((float(cx), float(cy), float(a), float(b)))
    return out


def synth_sample(index: int, size: tuple[int, int], seed: int) -> Sample:
    h, w = size
    rng = sample_rng(seed, index)
    for _ in range(100):
        ellipses = _draw_ellipses(rng, h, w)
        mask = ellipse_mask(h, w, ellipses)
        if FG_BAND[0] <= mask.mean() <= FG_BAND[1]:
            break
    else:  # pragma: no cover - the axis ranges make this practically unreachable
        raise RuntimeError(f"synthetic sample {index}: no ellipse set within the foreground band")
    level = rng.uniform(0.35, 0.55)
    shade = ndimage.gaussian_filter(rng.normal(0, 1, (h, w)), max(h, w) / 8) * 0.05
    blend = ndimage.gaussian_filter(mask.astype(np.float64), 1.5)
    clean = (level + shade) * (1.0 - 0.7 * blend)
    speckle = rng.gamma(SPECKLE_SHAPE, 1.0 / SPECKLE_SHAPE, (h, w))
    img = np.clip(clean * speckle, 0.0, 1.0)
    return Sample(
        np.repeat(img[None], 3, axis=0),
        mask.astype(np.float64)[None],
        f"synth_{seed}_{index:05d}",
        f"synthetic:seed={seed}:index={index}",
        {"ellipses": ellipses},
    )


def synth_generate(n: int, size: tuple[int, int] = (64, 64), seed: int = 0) -> list[Sample]:
    """``n`` speckled images with 1-2 darker elliptical nodules and their exact masks."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if min(size) < 32:
        raise ValueError(f"synthetic images must be at least 32x32, got {size}")
    return [synth_sample(i, tuple(size), seed) for i in range(n)]
