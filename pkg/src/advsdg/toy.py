"""Synthetic shape dataset with swappable texture families.

Each sample is a 96x96 grayscale image of 1-3 non-overlapping "organs"
(disk, ellipse, rounded rectangle) on a background. The geometry stream
depends only on (seed, index), so the same seed renders identical masks
under every texture family; families differ only in how the scene is shaded.
That makes each family a distinct domain with shared semantics: train on one
family, test on the others.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .data import Sample
from .seeding import substream

TEXTURE_FAMILIES = ("flat", "striped", "noisy", "gradient", "inverted-contrast")

TOY_IMAGE_SIZE = 96
TOY_NUM_CLASSES = 4
TOY_LABEL_NAMES = ["background", "disk", "ellipse", "rounded_rect"]

# Per-class base shading of the "flat" family; the other families perturb it.
# Organ outlines are deliberately near-indistinguishable blobs, so shading is
# the class cue — mirroring intensity-coded anatomy rather than silhouette-coded
# icons. Bands are spaced ~0.21 apart so moderate texture shifts scramble a
# pure intensity classifier without erasing the cue entirely.
_BASE_INTENSITY = {0: 0.15, 1: 0.80, 2: 0.58, 3: 0.37}

_MARGIN = 6
_MAX_PLACEMENT_TRIES = 120


# All three organ types draw from overlapping size ranges and stay close to
# circular (mild eccentricity, heavy corner rounding): silhouettes alone should
# not separate the classes once boundaries are smoothed.


def _disk_region(yy, xx, geom, scale, size) -> np.ndarray | None:
    r = geom.uniform(11, 17) * scale
    cy, cx = _place_center(geom, r, r, scale, size)
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2


def _ellipse_region(yy, xx, geom, scale, size) -> np.ndarray | None:
    a = geom.uniform(11, 17) * scale
    b = a / geom.uniform(1.05, 1.25)
    phi = geom.uniform(0, np.pi)
    cy, cx = _place_center(geom, a, a, scale, size)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(phi) + dy * np.sin(phi)
    v = -dx * np.sin(phi) + dy * np.cos(phi)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _rounded_rect_region(yy, xx, geom, scale, size) -> np.ndarray | None:
    hy = geom.uniform(10, 15) * scale
    hx = hy * geom.uniform(0.85, 1.18)
    rho = geom.uniform(0.55, 0.85) * min(hy, hx)
    phi = geom.uniform(0, np.pi)
    cy, cx = _place_center(geom, max(hy, hx), max(hy, hx), scale, size)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(phi) + dy * np.sin(phi)
    v = -dx * np.sin(phi) + dy * np.cos(phi)
    qu = np.maximum(np.abs(u) - (hx - rho), 0.0)
    qv = np.maximum(np.abs(v) - (hy - rho), 0.0)
    return qu**2 + qv**2 <= rho**2


def _place_center(geom, extent_y, extent_x, scale, size):
    # shape extents and margins scale with the canvas so every size renders
    # the same scenes proportionally
    margin = _MARGIN * scale
    lo_y, hi_y = margin + extent_y, size - margin - extent_y
    lo_x, hi_x = margin + extent_x, size - margin - extent_x
    return geom.uniform(lo_y, hi_y), geom.uniform(lo_x, hi_x)


_SHAPE_FNS = {1: _disk_region, 2: _ellipse_region, 3: _rounded_rect_region}


def _render_geometry(seed: int, index: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (mask, base image) for sample `index`; texture-family independent."""
    geom = substream(seed, "geometry", index)
    scale = size / TOY_IMAGE_SIZE
    yy, xx = np.meshgrid(np.arange(size, dtype=float), np.arange(size, dtype=float),
                         indexing="ij")
    mask = np.zeros((size, size), dtype=np.int64)
    occupied = np.zeros((size, size), dtype=bool)

    shading = np.full((size, size), _BASE_INTENSITY[0] + geom.uniform(-0.03, 0.03))
    # one organ of each type per scene (placement failure may rarely drop one,
    # keeping counts within 1-3): with silhouettes deliberately uninformative,
    # class identity must be read off relative shading, which is only
    # well-posed when reference organs share the scene
    labels = geom.permutation([1, 2, 3])
    for label in labels:
        label = int(label)
        for _attempt in range(_MAX_PLACEMENT_TRIES):
            region = _SHAPE_FNS[label](yy, xx, geom, scale, size)
            # keep shapes apart so boundary smoothing never merges them
            padded = ndimage.binary_dilation(region, iterations=3)
            if not (padded & occupied).any():
                mask[region] = label
                occupied |= padded
                shading[region] = _BASE_INTENSITY[label] + geom.uniform(-0.03, 0.03)
                break

    # boundary softening scales with the render so small canvases keep the
    # same interior-band fraction as the reference 96px scene
    base = ndimage.gaussian_filter(shading, sigma=0.8 * scale)
    return mask, base


def _apply_texture(base: np.ndarray, family: str, tex: np.random.Generator) -> np.ndarray:
    size = base.shape[0]
    coords = np.meshgrid(np.arange(size, dtype=float), np.arange(size, dtype=float),
                         indexing="ij")
    if family == "flat":
        img = base
    elif family == "striped":
        amp = tex.uniform(0.22, 0.40)
        freq = tex.uniform(5, 12)
        theta = tex.uniform(0, np.pi)
        phase = tex.uniform(0, 2 * np.pi)
        axis = coords[0] * np.sin(theta) + coords[1] * np.cos(theta)
        img = base + amp * np.sin(2 * np.pi * freq * axis / size + phase)
    elif family == "noisy":
        img = base + tex.normal(0.0, tex.uniform(0.20, 0.32), base.shape)
    elif family == "gradient":
        gain = tex.uniform(0.3, 0.5)
        theta = tex.uniform(0, 2 * np.pi)
        axis = coords[0] * np.sin(theta) + coords[1] * np.cos(theta)
        img = base + gain * (axis - axis.mean()) / size
    elif family == "inverted-contrast":
        # solarize: fold intensities above a pivot so the brightest organs land
        # near or below the background band while dark regions keep their shading
        pivot = tex.uniform(0.42, 0.48)
        img = np.where(base > pivot, 2.0 * pivot - base, base)
    else:
        raise ValueError(f"unknown texture family {family!r}; known: {TEXTURE_FAMILIES}")
    img = img + tex.normal(0.0, 0.01, base.shape)
    return np.clip(img, 0.0, 1.0)


def make_toy_dataset(
    n_samples: int,
    texture_family: str = "flat",
    seed: int = 0,
    image_size: int = TOY_IMAGE_SIZE,
) -> list[Sample]:
    """Generate `n_samples` shape-scene samples shaded with one texture family."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if image_size < 16:
        raise ValueError("image_size must be >= 16")
    if texture_family not in TEXTURE_FAMILIES:
        raise ValueError(f"unknown texture family {texture_family!r}; known: {TEXTURE_FAMILIES}")

    samples = []
    for i in range(n_samples):
        mask, base = _render_geometry(seed, i, image_size)
        tex = substream(seed, "texture", i, texture_family)
        image = _apply_texture(base, texture_family, tex)
        samples.append(Sample(image=image, mask=mask, domain_tag=texture_family))
    return samples
