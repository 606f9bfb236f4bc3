"""Data pipeline: volume preprocessing, augmentation, splits and disk layout.

Images are grayscale 2D arrays (slices of 3D volumes or standalone rasters);
masks are integer class maps of the same shape. All operations are pure and
deterministic given their inputs and an explicit generator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .seeding import substream

CT_CLIP_RANGE = (-275.0, 125.0)
MRI_PERCENTILE = 99.5


class Modality(Enum):
    CT = "CT"
    MRI = "MRI"
    OTHER = "OTHER"


class ModalityError(ValueError):
    """Raised when a preprocessing op is applied to the wrong modality."""


@dataclass
class Volume:
    """A 3D grayscale volume, axial slices stacked along axis 0."""

    voxels: np.ndarray  # [depth, H, W]
    spacing: tuple[float, float, float] | None = None
    modality: Modality = Modality.OTHER

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float64)
        if self.voxels.ndim != 3:
            raise ValueError(f"volume must be rank-3, got shape {self.voxels.shape}")
        if self.voxels.shape[0] < 1:
            raise ValueError("volume depth must be >= 1")


@dataclass
class Sample:
    """One 2D image/mask pair belonging to a named domain.

    `volume_id` groups slices that came from the same volume so that splits
    and evaluation can operate per volume instead of per slice.
    """

    image: np.ndarray  # [H, W] float
    mask: np.ndarray  # [H, W] int, values in [0, K-1]
    domain_tag: str
    volume_id: str | None = None

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = np.asarray(self.mask)
        if self.mask.dtype.kind not in "iu":
            raise ValueError("mask must be an integer array")
        self.mask = self.mask.astype(np.int64)
        if self.image.shape != self.mask.shape:
            raise ValueError(
                f"image/mask shape mismatch: {self.image.shape} vs {self.mask.shape}"
            )


@dataclass
class DatasetSplit:
    train: list[Sample]
    val: list[Sample]
    seed: int


def clip_ct(volume: Volume) -> Volume:
    """Clamp CT intensities to the fixed abdominal window."""
    if volume.modality is not Modality.CT:
        raise ModalityError(f"clip_ct requires a CT volume, got {volume.modality.value}")
    lo, hi = CT_CLIP_RANGE
    return replace(volume, voxels=np.clip(volume.voxels, lo, hi))


def clip_mri_percentile(volume: Volume, percentile: float = MRI_PERCENTILE) -> Volume:
    """Cut intensities above the given percentile (linear-interpolation definition)."""
    if volume.modality is not Modality.MRI:
        raise ModalityError(
            f"clip_mri_percentile requires an MRI volume, got {volume.modality.value}"
        )
    q = np.percentile(volume.voxels, percentile)
    return replace(volume, voxels=np.minimum(volume.voxels, q))


def _linear_sample_1d(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Pixel-center convention: output center j maps to (j + 0.5) * n_in/n_out - 0.5,
    # clamped to the edge.
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    i0c = np.clip(i0, 0, n_in - 1)
    i1c = np.clip(i0 + 1, 0, n_in - 1)
    return i0c, i1c, frac


def _resize2d_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = image.shape
    r0, r1, rf = _linear_sample_1d(h, out_h)
    c0, c1, cf = _linear_sample_1d(w, out_w)
    rows = image[r0] * (1 - rf)[:, None] + image[r1] * rf[:, None]
    return rows[:, c0] * (1 - cf)[None, :] + rows[:, c1] * cf[None, :]


def _resize2d_nearest(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = image.shape
    ri = np.clip(np.floor((np.arange(out_h) + 0.5) * (h / out_h)).astype(np.int64), 0, h - 1)
    ci = np.clip(np.floor((np.arange(out_w) + 0.5) * (w / out_w)).astype(np.int64), 0, w - 1)
    return image[np.ix_(ri, ci)]


def resize_axial(volume: Volume, target: int = 192) -> Volume:
    """Bilinearly resize every axial slice to `target` x `target`."""
    if target < 8:
        raise ValueError(f"target size must be >= 8, got {target}")
    out = np.stack([_resize2d_bilinear(s, target, target) for s in volume.voxels])
    return replace(volume, voxels=out)


def resize_axial_mask(mask_volume: np.ndarray, target: int = 192) -> np.ndarray:
    """Nearest-neighbor resize for a [depth, H, W] integer mask volume."""
    if target < 8:
        raise ValueError(f"target size must be >= 8, got {target}")
    mask_volume = np.asarray(mask_volume)
    return np.stack([_resize2d_nearest(s, target, target) for s in mask_volume])


def normalize_zscore(image: np.ndarray) -> np.ndarray:
    """Standardize to zero mean / unit variance; constant inputs map to zeros."""
    image = np.asarray(image, dtype=np.float64)
    std = image.std()
    if std < 1e-12:
        return np.zeros_like(image)
    return (image - image.mean()) / std


@dataclass
class AugmentConfig:
    """Probabilities and parameter ranges for the predefined augmentations."""

    gamma_prob: float = 0.5
    gamma_range: tuple[float, float] = (0.5, 2.0)
    noise_prob: float = 0.25
    noise_sigma: float = 0.05
    affine_prob: float = 0.25
    rotate_deg: float = 10.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    translate_frac: float = 0.05
    elastic_prob: float = 0.15
    elastic_alpha: float = 8.0
    elastic_sigma: float = 6.0


def _gamma_contrast(image: np.ndarray, gamma: float) -> np.ndarray:
    lo, hi = image.min(), image.max()
    if hi - lo < 1e-12:
        return image
    unit = (image - lo) / (hi - lo)
    return unit**gamma * (hi - lo) + lo


def _affine_pair(image, mask, angle_deg, scale, tx, ty):
    # ndimage.affine_transform maps output coords to input coords, so we pass
    # the inverse of the forward (rotate+scale around center, then translate).
    h, w = image.shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    theta = np.deg2rad(angle_deg)
    fwd = scale * np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    inv = np.linalg.inv(fwd)
    offset = center - inv @ (center + np.array([ty, tx]))
    img_out = ndimage.affine_transform(image, inv, offset=offset, order=1, mode="nearest")
    mask_out = ndimage.affine_transform(
        mask, inv, offset=offset, order=0, mode="nearest", output=mask.dtype
    )
    return img_out, mask_out


def _elastic_pair(image, mask, rng, alpha, sigma):
    h, w = image.shape
    dy = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma) * alpha
    dx = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma) * alpha
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = np.stack([yy + dy, xx + dx])
    img_out = ndimage.map_coordinates(image, coords, order=1, mode="nearest")
    mask_out = ndimage.map_coordinates(mask, coords, order=0, mode="nearest")
    return img_out, mask_out.astype(mask.dtype)


def augment(sample: Sample, rng: np.random.Generator, config: AugmentConfig | None = None) -> Sample:
    """Apply the predefined augmentation chain, then z-score normalization.

    Stage order: gamma contrast, additive Gaussian noise, random affine,
    2D elastic deformation. Geometric stages transform image and mask with a
    shared field (image bilinear, mask nearest), so mask labels can only
    disappear, never appear.
    """
    cfg = config or AugmentConfig()
    image = sample.image.copy()
    mask = sample.mask.copy()

    if rng.random() < cfg.gamma_prob:
        gamma = rng.uniform(*cfg.gamma_range)
        image = _gamma_contrast(image, gamma)
    if rng.random() < cfg.noise_prob:
        image = image + rng.normal(0.0, cfg.noise_sigma, image.shape)
    if rng.random() < cfg.affine_prob:
        angle = rng.uniform(-cfg.rotate_deg, cfg.rotate_deg)
        scale = rng.uniform(*cfg.scale_range)
        h, w = image.shape
        ty = rng.uniform(-cfg.translate_frac, cfg.translate_frac) * h
        tx = rng.uniform(-cfg.translate_frac, cfg.translate_frac) * w
        image, mask = _affine_pair(image, mask, angle, scale, tx, ty)
    if rng.random() < cfg.elastic_prob:
        image, mask = _elastic_pair(image, mask, rng, cfg.elastic_alpha, cfg.elastic_sigma)

    image = normalize_zscore(image)
    return Sample(image=image, mask=mask, domain_tag=sample.domain_tag,
                  volume_id=sample.volume_id)


def split_source(samples: list[Sample], ratio: float = 0.7, seed: int = 0) -> DatasetSplit:
    """Shuffle and split into train/val; slices of one volume never straddle."""
    if len(samples) < 2:
        raise ValueError(f"need at least 2 samples to split, got {len(samples)}")
    if not 0.0 < ratio < 1.0 + 1e-12:
        raise ValueError(f"split ratio must be in (0, 1], got {ratio}")

    groups: dict[object, list[int]] = {}
    for i, s in enumerate(samples):
        key = s.volume_id if s.volume_id is not None else ("__slice__", i)
        groups.setdefault(key, []).append(i)

    keys = list(groups)
    rng = substream(seed, "split")
    rng.shuffle(keys)

    target = int(round(ratio * len(samples)))
    train_idx: list[int] = []
    val_idx: list[int] = []
    for key in keys:
        bucket = train_idx if len(train_idx) < target else val_idx
        bucket.extend(groups[key])
    if not val_idx or not train_idx:
        raise ValueError(
            f"split ratio {ratio} leaves an empty partition for {len(samples)} samples"
        )
    return DatasetSplit(
        train=[samples[i] for i in sorted(train_idx)],
        val=[samples[i] for i in sorted(val_idx)],
        seed=seed,
    )


def volume_to_samples(
    volume: Volume, mask_volume: np.ndarray, domain_tag: str, volume_id: str
) -> list[Sample]:
    """Slice a preprocessed volume/mask pair into per-slice samples."""
    mask_volume = np.asarray(mask_volume)
    if mask_volume.shape != volume.voxels.shape:
        raise ValueError("mask volume shape must match image volume shape")
    return [
        Sample(image=volume.voxels[d], mask=mask_volume[d], domain_tag=domain_tag,
               volume_id=volume_id)
        for d in range(volume.voxels.shape[0])
    ]


def read_volume(path: str | Path, modality: Modality = Modality.OTHER) -> Volume:
    """Load a rank-3 volume from a .npy or .npz file (key `voxels`)."""
    path = Path(path)
    if path.suffix == ".npy":
        return Volume(voxels=np.load(path), modality=modality)
    if path.suffix == ".npz":
        with np.load(path) as f:
            spacing = tuple(f["spacing"]) if "spacing" in f else None
            return Volume(voxels=f["voxels"], spacing=spacing, modality=modality)
    raise ValueError(f"unsupported volume format: {path.suffix!r}")


# ---------------------------------------------------------------------------
# Disk layout: <root>/<domain_tag>/images/*.png, <root>/<domain_tag>/masks/*.png
# with matching stems, plus one manifest.json at the root.
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"


def _load_manifest(root: Path) -> dict:
    path = root / MANIFEST_NAME
    if not path.exists():
        return {"num_classes": None, "label_names": [], "modality": "OTHER", "domains": {}}
    return json.loads(path.read_text())


def _write_manifest(root: Path, manifest: dict) -> None:
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def save_domain(
    root: str | Path,
    tag: str,
    samples: list[Sample],
    num_classes: int,
    label_names: list[str] | None = None,
    modality: Modality = Modality.OTHER,
    intensity_range: tuple[float, float] = (0.0, 1.0),
) -> None:
    """Write samples as 16-bit image / 8-bit mask PNG pairs and update the manifest."""
    root = Path(root)
    img_dir = root / tag / "images"
    mask_dir = root / tag / "masks"
    img_dir.mkdir(parents=True, exist_ok=True)
    mask_dir.mkdir(parents=True, exist_ok=True)

    lo, hi = intensity_range
    for i, s in enumerate(samples):
        if s.mask.max(initial=0) >= num_classes:
            raise ValueError(f"sample {i} has mask label >= num_classes ({num_classes})")
        unit = np.clip((s.image - lo) / (hi - lo), 0.0, 1.0)
        Image.fromarray(np.round(unit * 65535.0).astype(np.uint16)).save(
            img_dir / f"{i:05d}.png"
        )
        Image.fromarray(s.mask.astype(np.uint8)).save(mask_dir / f"{i:05d}.png")

    manifest = _load_manifest(root)
    manifest["num_classes"] = num_classes
    if label_names is not None:
        manifest["label_names"] = label_names
    manifest["modality"] = modality.value
    manifest.setdefault("domains", {})[tag] = {
        "count": len(samples),
        "intensity_range": [float(lo), float(hi)],
    }
    _write_manifest(root, manifest)


def load_domain(root: str | Path, tag: str) -> list[Sample]:
    """Load every image/mask pair of one domain, in stem order."""
    root = Path(root)
    img_dir = root / tag / "images"
    mask_dir = root / tag / "masks"
    if not img_dir.is_dir():
        raise FileNotFoundError(f"missing domain directory: {img_dir}")
    manifest = _load_manifest(root)
    lo, hi = manifest.get("domains", {}).get(tag, {}).get("intensity_range", (0.0, 1.0))

    samples = []
    for img_path in sorted(img_dir.glob("*.png")) + sorted(img_dir.glob("*.tif")):
        mask_path = next(
            (mask_dir / f"{img_path.stem}{ext}" for ext in (".png", ".tif")
             if (mask_dir / f"{img_path.stem}{ext}").exists()),
            None,
        )
        if mask_path is None:
            raise FileNotFoundError(f"no mask for image {img_path.name} in {mask_dir}")
        with Image.open(img_path) as im:
            denom = 255.0 if im.mode == "L" else 65535.0
            raw = np.asarray(im, dtype=np.float64)
        image = raw / denom * (hi - lo) + lo
        mask = np.asarray(Image.open(mask_path)).astype(np.int64)
        samples.append(Sample(image=image, mask=mask, domain_tag=tag))
    if not samples:
        raise FileNotFoundError(f"domain {tag!r} has no images under {img_dir}")
    return samples


def load_manifest(root: str | Path) -> dict:
    """Public manifest accessor (num_classes, label_names, modality, domains)."""
    return _load_manifest(Path(root))
