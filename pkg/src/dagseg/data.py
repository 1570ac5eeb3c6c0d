"""Samples, on-disk dataset layout, augmentation and the synthetic data generator.

Dataset directory layout::

    images/<id>.png    8-bit RGB
    masks/<id>.png     8-bit index mask (0=background, 1=tumor, 2=inflammation, 3=cystite)
    manifest.txt       one "split<TAB>id" line per sample
    palette.txt        index, class name and display colour per class
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from dagseg.model import CLASS_NAMES

PALETTE = ((0, 0, 0), (255, 64, 64), (255, 200, 0), (64, 160, 255))
SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    pass


@dataclass
class SampleRecord:
    image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) uint8
    id: str

    def __post_init__(self):
        validate_record(self)

    def image_float(self) -> np.ndarray:
        return self.image.astype(np.float64) / 255.0


def validate_record(rec: SampleRecord, num_classes: int = len(CLASS_NAMES)) -> None:
    if rec.image.ndim != 3 or rec.image.shape[2] != 3:
        raise DatasetError(f"{rec.id}: image must be HxWx3, got {rec.image.shape}")
    if rec.image.dtype != np.uint8 or rec.mask.dtype != np.uint8:
        raise DatasetError(f"{rec.id}: image and mask must be uint8")
    if rec.image.shape[:2] != rec.mask.shape:
        raise DatasetError(f"{rec.id}: image size {rec.image.shape[:2]} != mask size {rec.mask.shape}")
    top = int(rec.mask.max()) if rec.mask.size else 0
    if top >= num_classes:
        raise DatasetError(f"{rec.id}: mask value {top} out of range for {num_classes} classes")


def stack_batch(records: list[SampleRecord]) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([r.image_float() for r in records])
    masks = np.stack([r.mask for r in records]).astype(np.int64)
    return images, masks


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def load_sample(image_path, mask_path, num_classes: int = len(CLASS_NAMES)) -> SampleRecord:
    image_path, mask_path = Path(image_path), Path(mask_path)
    image = np.asarray(Image.open(image_path).convert("RGB"), dtype=np.uint8)
    with Image.open(mask_path) as m:
        if m.mode not in ("L", "P"):
            raise DatasetError(f"{mask_path}: mask must be single-channel, got mode {m.mode}")
        mask = np.asarray(m, dtype=np.uint8)
    rec = SampleRecord.__new__(SampleRecord)
    rec.image, rec.mask, rec.id = image, mask, image_path.stem
    validate_record(rec, num_classes)
    return rec


def save_sample(rec: SampleRecord, root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    Image.fromarray(rec.image, mode="RGB").save(root / "images" / f"{rec.id}.png")
    save_mask(rec.mask, root / "masks" / f"{rec.id}.png")


def save_mask(mask: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="L").save(path)


def colorize(mask: np.ndarray) -> np.ndarray:
    return np.asarray(PALETTE, dtype=np.uint8)[mask]


def overlay(image: np.ndarray, mask: np.ndarray, alpha: float = 0.45) -> np.ndarray:
    color = colorize(mask).astype(np.float64)
    base = image.astype(np.float64)
    fg = (mask > 0)[..., None]
    out = np.where(fg, (1 - alpha) * base + alpha * color, base)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def write_palette(root) -> None:
    lines = [f"{i}\t{name}\t{r},{g},{b}" for i, (name, (r, g, b)) in enumerate(zip(CLASS_NAMES, PALETTE))]
    Path(root, "palette.txt").write_text("\n".join(lines) + "\n")


@dataclass
class SplitManifest:
    train: list[str] = field(default_factory=list)
    val: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)

    def __post_init__(self):
        seen: set[str] = set()
        for split in SPLITS:
            ids = getattr(self, split)
            if seen.intersection(ids) or len(set(ids)) != len(ids):
                raise DatasetError("manifest splits must be disjoint")
            seen.update(ids)

    def ids(self, split: str) -> list[str]:
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}")
        return getattr(self, split)

    def to_text(self) -> str:
        return "".join(f"{s}\t{i}\n" for s in SPLITS for i in getattr(self, s))

    @classmethod
    def from_text(cls, text: str) -> "SplitManifest":
        parts: dict[str, list[str]] = {s: [] for s in SPLITS}
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                split, sid = line.split("\t")
            except ValueError:
                raise DatasetError(f"manifest line {n}: expected 'split<TAB>id'") from None
            if split not in parts:
                raise DatasetError(f"manifest line {n}: unknown split {split!r}")
            parts[split].append(sid)
        return cls(**parts)


def make_split(ids: list[str], seed: int = 0, fractions=(0.7, 0.1, 0.2)) -> SplitManifest:
    """Seeded shuffle, then cut into train/val/test by rounded fractions."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    order = sorted(ids)
    np.random.default_rng(seed).shuffle(order)
    n = len(order)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    return SplitManifest(
        order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]
    )


def write_dataset(records: list[SampleRecord], root, manifest: SplitManifest) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for rec in records:
        save_sample(rec, root)
    (root / "manifest.txt").write_text(manifest.to_text())
    write_palette(root)


def read_manifest(root) -> SplitManifest:
    path = Path(root, "manifest.txt")
    if not path.is_file():
        raise DatasetError(f"{root}: missing manifest.txt")
    return SplitManifest.from_text(path.read_text())


def load_split(root, split: str, num_classes: int = len(CLASS_NAMES)) -> list[SampleRecord]:
    root = Path(root)
    return [
        load_sample(root / "images" / f"{sid}.png", root / "masks" / f"{sid}.png", num_classes)
        for sid in read_manifest(root).ids(split)
    ]


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentationConfig:
    contrast_range: tuple[float, float] = (0.8, 1.25)
    rotation_degrees: float = 15.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    seed: int = 0

    def __post_init__(self):
        self.contrast_range = tuple(float(v) for v in self.contrast_range)
        self.scale_range = tuple(float(v) for v in self.scale_range)
        lo, hi = self.contrast_range
        if not lo <= 1.0 <= hi:
            raise ValueError("contrast range must bracket 1")
        if self.rotation_degrees < 0:
            raise ValueError("rotation_degrees must be >= 0")
        if not 0 < self.scale_range[0] <= self.scale_range[1]:
            raise ValueError("invalid scale range")


def sample_rng(seed: int, sample_id: str, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(sample_id.encode()), epoch])


def apply_augmentation(rec: SampleRecord, angle_deg: float, scale: float, contrast: float) -> SampleRecord:
    """Rotate/scale about the image centre, then adjust contrast (image only)."""
    image, mask = rec.image, rec.mask
    if angle_deg != 0.0 or scale != 1.0:
        h, w = mask.shape
        t = math.radians(angle_deg)
        # maps output coordinates back to input coordinates
        inv = np.array([[math.cos(t), math.sin(t)], [-math.sin(t), math.cos(t)]]) / scale
        centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        offset = centre - inv @ centre
        channels = [
            ndimage.affine_transform(image[..., c].astype(np.float64), inv, offset, order=1, mode="nearest")
            for c in range(3)
        ]
        image = np.clip(np.rint(np.stack(channels, axis=-1)), 0, 255).astype(np.uint8)
        mask = ndimage.affine_transform(mask, inv, offset, order=0, mode="constant", cval=0).astype(np.uint8)
    if contrast != 1.0:
        f = image.astype(np.float64)
        mu = f.mean(axis=(0, 1), keepdims=True)
        image = np.clip(np.rint((f - mu) * contrast + mu), 0, 255).astype(np.uint8)
    if image is rec.image and mask is rec.mask:
        return rec
    return SampleRecord(image, mask, rec.id)


def augment(rec: SampleRecord, config: AugmentationConfig, epoch: int) -> SampleRecord:
    rng = sample_rng(config.seed, rec.id, epoch)
    angle = rng.uniform(-config.rotation_degrees, config.rotation_degrees)
    scale = rng.uniform(*config.scale_range)
    contrast = rng.uniform(*config.contrast_range)
    return apply_augmentation(rec, angle, scale, contrast)


# ---------------------------------------------------------------------------
# synthetic cystoscopy-like data
# ---------------------------------------------------------------------------


def _smooth_noise(rng, shape, sigma) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.normal(size=shape), sigma, mode="wrap")
    return field_ / (field_.std() + 1e-12)


def _blob(rng, h, w, cy, cx, ry, rx) -> np.ndarray:
    """Ellipse with a wobbly boundary (low-order angular harmonics)."""
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = (yy - cy) / ry, (xx - cx) / rx
    r = np.hypot(dy, dx)
    theta = np.arctan2(dy, dx)
    wobble = np.ones_like(r)
    for k in (2, 3, 5):
        wobble += rng.uniform(-0.12, 0.12) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    return r <= wobble


def _background(rng, h, w) -> np.ndarray:
    s = min(h, w)
    base = np.array([0.78, 0.36, 0.30]) + rng.uniform(-0.05, 0.05, 3)
    tex = _smooth_noise(rng, (h, w), s / 16)
    img = base + 0.05 * tex[..., None] * np.array([1.0, 0.6, 0.6])
    # thin dark vessels
    vessels = np.abs(_smooth_noise(rng, (h, w), s / 24)) < 0.08
    img[vessels] *= np.array([0.8, 0.55, 0.55])
    yy, xx = np.mgrid[0:h, 0:w]
    rad = np.hypot((yy - h / 2) / (h / 2), (xx - w / 2) / (w / 2))
    img *= (1.0 - 0.45 * np.clip(rad - 0.35, 0, None) ** 1.5)[..., None]
    return img


def _paint(rng, img, region, cls, h, w) -> None:
    s = min(h, w)
    if cls == 1:  # tumor: pale, bumpy, high contrast
        bumps = _smooth_noise(rng, (h, w), max(s / 48, 0.8))
        color = np.array([0.96, 0.78, 0.62]) + 0.12 * bumps[..., None] * np.array([1.0, 1.0, 0.8])
    elif cls == 2:  # inflammation: deep red, diffuse, low contrast
        dist = ndimage.distance_transform_edt(region)
        depth = np.clip(dist / (dist.max() + 1e-12), 0, 1)
        color = np.array([0.62, 0.12, 0.14]) - 0.08 * depth[..., None]
    else:  # cystite: whitish patch with dark speckles
        color = np.broadcast_to(np.array([0.90, 0.62, 0.58]), (h, w, 3)).copy()
        speckle = rng.random((h, w)) < 0.18
        color[speckle] = np.array([0.45, 0.18, 0.20])
    img[region] = color[region]


def synth_sample(rng: np.random.Generator, size=(256, 256), sample_id: str = "synth") -> SampleRecord:
    h, w = size
    s = min(h, w)
    img = _background(rng, h, w)
    mask = np.zeros((h, w), dtype=np.uint8)

    if rng.random() < 0.05:
        # lesion filling most of the frame
        lesions = [(1, 0.42, 0.5)]
    else:
        count = rng.choice(4, p=[0.1, 0.4, 0.3, 0.2])
        lesions = [(int(rng.integers(1, 4)), rng.uniform(0.1, 0.24), None) for _ in range(count)]

    for cls, radius, centred in lesions:
        for _ in range(30):
            ry = radius * s * rng.uniform(0.75, 1.25)
            rx = radius * s * rng.uniform(0.75, 1.25)
            if centred is not None:
                cy, cx = h * centred, w * centred
            else:
                cy = rng.uniform(ry * 0.6, h - ry * 0.6)
                cx = rng.uniform(rx * 0.6, w - rx * 0.6)
            region = _blob(rng, h, w, cy, cx, ry, rx)
            # keep lesions apart so every painted region stays visible in the mask
            grown = ndimage.binary_dilation(region, iterations=2)
            if region.any() and not (grown & (mask > 0)).any():
                _paint(rng, img, region, cls, h, w)
                mask[region] = cls
                break

    img += 0.015 * rng.normal(size=img.shape)
    image = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return SampleRecord(image, mask, sample_id)


def synth_generate(n: int, size=(256, 256), seed: int = 0) -> list[SampleRecord]:
    """``n`` synthetic samples; sample ``i`` depends only on ``(seed, i)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return [
        synth_sample(np.random.default_rng([seed, i]), tuple(size), f"synth_{i:05d}")
        for i in range(n)
    ]
