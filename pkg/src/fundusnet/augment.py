"""Data augmentation: random shift/rotation, channel-statistics color
transfer toward randomly sampled targets, and PCA-based color jitter.

Every operation takes an explicit numpy Generator, never global state, so
augmentation workers stay reproducible.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import map_coordinates

from .dataset import FundusSample
from .errors import DegenerateSample

COLOR_EPS = 1e-3  # floor of the source std in the transfer denominator


@dataclass
class AugmentConfig:
    max_shift: float = 20.0  # pixels at 400 x 400
    max_rotation: float = 15.0  # degrees
    # per-channel (mean, std) priors for sampling target statistics;
    # None means "derive from the training set" (done by the pipeline)
    color_mean_prior: tuple = None
    color_std_prior: tuple = None
    pca_scale: float = 0.1
    enable_geometric: bool = True
    enable_color_transfer: bool = True
    enable_pca: bool = True

    def __post_init__(self):
        if self.max_shift < 0 or self.max_rotation < 0 or self.pca_scale < 0:
            raise ValueError("augmentation magnitudes must be nonnegative")


@dataclass
class ColorStats:
    mean: np.ndarray  # (3,) intensity units
    std: np.ndarray  # (3,) nonnegative

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.std = np.asarray(self.std, dtype=float)
        if (self.std < 0).any():
            raise ValueError("std components must be nonnegative")


@dataclass
class PcaBasis:
    """Channel-covariance eigendecomposition in unit-scaled RGB."""

    eigenvalues: np.ndarray  # (3,) descending, >= 0
    eigenvectors: np.ndarray  # (3, 3), orthonormal columns

    def __post_init__(self):
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=float)
        self.eigenvectors = np.asarray(self.eigenvectors, dtype=float)


def image_color_stats(image):
    """Per-channel mean/std of a uint8 image."""
    pixels = np.asarray(image, dtype=np.float64).reshape(-1, 3)
    return ColorStats(pixels.mean(0), pixels.std(0))


def apply_geometric(sample, dx, dy, angle_deg):
    """Rotate about the image center, then shift by (dx, dy).

    The image is resampled bilinearly with channel-mean fill, masks with
    nearest-neighbor and zero fill; the label is untouched.
    """
    image = np.asarray(sample.image)
    h, w = image.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(angle_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)

    ys, xs = np.mgrid[0:h, 0:w]
    # inverse map: undo the shift, then rotate backwards about the center
    xq = xs - dx - cx
    yq = ys - dy - cy
    src_x = cos_t * xq + sin_t * yq + cx
    src_y = -sin_t * xq + cos_t * yq + cy
    grid = (src_y, src_x)

    out = np.empty_like(image, dtype=np.float64)
    for ch in range(image.shape[2]):
        fill = float(image[..., ch].mean())
        out[..., ch] = map_coordinates(
            image[..., ch].astype(np.float64), grid, order=1, mode="constant", cval=fill
        )
    out = np.clip(np.round(out), 0, 255).astype(np.uint8)

    def warp_mask(mask):
        if mask is None:
            return None
        vals = map_coordinates(
            np.asarray(mask).astype(np.float64), grid, order=0, mode="constant", cval=0.0
        )
        return vals >= 0.5

    return FundusSample(
        sample.id, out, warp_mask(sample.od_mask), warp_mask(sample.oc_mask),
        sample.label, dict(sample.meta),
    )


def random_geometric(sample, cfg, rng):
    dx = rng.uniform(-cfg.max_shift, cfg.max_shift)
    dy = rng.uniform(-cfg.max_shift, cfg.max_shift)
    angle = rng.uniform(-cfg.max_rotation, cfg.max_rotation)
    if dx == 0 and dy == 0 and angle == 0:
        return sample
    return apply_geometric(sample, dx, dy, angle)


def color_affine(image, target):
    """Per-channel affine remap to the target statistics, unclipped float.

    Before clipping the output channel means/stds equal the target exactly
    (up to the epsilon floor on constant channels).
    """
    pixels = np.asarray(image, dtype=np.float64)
    mean = pixels.reshape(-1, 3).mean(0)
    std = pixels.reshape(-1, 3).std(0)
    scale = target.std / np.maximum(std, COLOR_EPS)
    return (pixels - mean) * scale + target.mean


def color_transfer(image, target):
    """uint8 color transfer: affine remap then clip to [0, 255]."""
    out = color_affine(image, target)
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def sample_target_stats(cfg, rng):
    """Draw target channel statistics from the configured Gaussian priors."""
    mean_prior = np.asarray(cfg.color_mean_prior, dtype=float)
    std_prior = np.asarray(cfg.color_std_prior, dtype=float)
    mean = rng.normal(mean_prior[:, 0], mean_prior[:, 1])
    std = np.maximum(rng.normal(std_prior[:, 0], std_prior[:, 1]), 1.0)
    return ColorStats(mean, std)


def fit_pca_basis(pixels):
    """Eigendecompose the 3x3 channel covariance of a pixel sample.

    uint8 input is scaled to [0, 1] first. Eigenvectors follow a
    deterministic sign convention: the largest-magnitude component of each
    column is positive.
    """
    raw = np.asarray(pixels)
    if raw.ndim != 2 or raw.shape[1] != 3 or raw.shape[0] < 3:
        raise DegenerateSample("need an N x 3 pixel sample with N >= 3")
    pixels = raw.astype(np.float64)
    if raw.dtype == np.uint8:
        pixels = pixels / 255.0
    cov = np.cov(pixels, rowvar=False)
    w, v = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1]
    w = np.clip(w[order], 0.0, None)
    v = v[:, order]
    for col in range(3):
        peak = np.argmax(np.abs(v[:, col]))
        if v[peak, col] < 0:
            v[:, col] = -v[:, col]
    return PcaBasis(w, v)


def fit_pca_basis_from_images(images, max_pixels=1_000_000):
    """Fit the jitter basis over a uniform pixel subsample of many images."""
    chunks = []
    total = sum(im.shape[0] * im.shape[1] for im in images)
    stride = max(1, int(np.ceil(total / max_pixels)))
    for im in images:
        flat = np.asarray(im, dtype=np.float64).reshape(-1, 3) / 255.0
        chunks.append(flat[::stride])
    return fit_pca_basis(np.concatenate(chunks, axis=0))


def pca_offset(basis, cfg, rng):
    """One RGB offset P @ (alpha * lambda) in unit-scaled intensity."""
    alpha = rng.normal(0.0, cfg.pca_scale, size=3)
    return basis.eigenvectors @ (alpha * basis.eigenvalues)


def pca_color_jitter(image, basis, cfg, rng):
    """Add a single random principal-component offset to every pixel."""
    offset = pca_offset(basis, cfg, rng)
    if not offset.any():
        return np.asarray(image).copy()
    out = np.asarray(image, dtype=np.float64) + offset * 255.0
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def augment_sample(sample, cfg, rng, basis=None):
    """Apply the full chain: geometric, then color transfer, then PCA
    jitter. Masks follow the geometric transform only; the label never
    changes.
    """
    out = sample
    if cfg.enable_geometric and (cfg.max_shift > 0 or cfg.max_rotation > 0):
        out = random_geometric(out, cfg, rng)
    if cfg.enable_color_transfer and cfg.color_mean_prior is not None:
        target = sample_target_stats(cfg, rng)
        out = replace_image(out, color_transfer(out.image, target))
    if cfg.enable_pca and basis is not None and cfg.pca_scale > 0:
        out = replace_image(out, pca_color_jitter(out.image, basis, cfg, rng))
    return out


def replace_image(sample, image):
    return FundusSample(sample.id, image, sample.od_mask, sample.oc_mask, sample.label, dict(sample.meta))


def priors_from_stats(stats, mean_spread=15.0, std_spread=5.0):
    """Default Gaussian priors centered on the dataset statistics."""
    mean_prior = tuple((float(m), mean_spread) for m in stats.mean)
    std_prior = tuple((float(s), std_spread) for s in stats.std)
    return mean_prior, std_prior


def with_dataset_priors(cfg, images):
    """Fill unset color priors from the training images."""
    if cfg.color_mean_prior is not None and cfg.color_std_prior is not None:
        return cfg
    pixels = np.concatenate(
        [np.asarray(im, dtype=np.float64).reshape(-1, 3)[:: max(1, im.size // (3 * 100_000))] for im in images]
    )
    stats = ColorStats(pixels.mean(0), pixels.std(0))
    mean_prior, std_prior = priors_from_stats(stats)
    return replace(
        cfg,
        color_mean_prior=cfg.color_mean_prior or mean_prior,
        color_std_prior=cfg.color_std_prior or std_prior,
    )
