"""Optic-disc localization and square ROI cropping.

The disc is found with intensity thresholding on the red channel followed
by a circular Hough transform over the resulting edge map; the crop stores
the exact affine transform so results can be mapped back to source
coordinates.

Coordinate convention: points are (x, y) = (column, row) in index space,
the center of pixel [i, j] sits at (j, i), and a box of side s centered at
c spans the continuous interval [c - s/2, c + s/2].
"""

import json
from dataclasses import dataclass, asdict

import numpy as np
from scipy.ndimage import binary_erosion, gaussian_filter, map_coordinates
from scipy.signal import fftconvolve

from .dataset import FundusSample
from .errors import NoDiscFound


@dataclass(frozen=True)
class RoiBox:
    """Square region around the disc, in source-image pixels."""

    center_x: float
    center_y: float
    side: float

    def __post_init__(self):
        if self.side <= 0:
            raise ValueError("box side must be positive")


@dataclass
class RoiCrop:
    """A resampled square crop plus the transform back to source pixels."""

    image: np.ndarray  # out_size x out_size x 3 uint8
    box: RoiBox
    out_size: int

    @property
    def scale(self):
        return self.box.side / self.out_size

    def roi_to_src(self, x, y):
        """Map ROI pixel coordinates to source pixel coordinates."""
        x0 = self.box.center_x - self.box.side / 2.0
        y0 = self.box.center_y - self.box.side / 2.0
        s = self.scale
        return x0 + (np.asarray(x) + 0.5) * s, y0 + (np.asarray(y) + 0.5) * s

    def src_to_roi(self, x, y):
        x0 = self.box.center_x - self.box.side / 2.0
        y0 = self.box.center_y - self.box.side / 2.0
        s = self.scale
        return (np.asarray(x) - x0) / s - 0.5, (np.asarray(y) - y0) / s - 0.5

    def transform_dict(self):
        d = asdict(self.box)
        d.update(out_size=self.out_size, scale=self.scale)
        return d

    def save_transform(self, path):
        with open(path, "w") as fh:
            json.dump(self.transform_dict(), fh, indent=2, sort_keys=True)


def _downsample(channel, factor):
    """Bilinear downsample by a float factor, pixel-center aligned."""
    h, w = channel.shape
    out_h = max(1, int(round(h / factor)))
    out_w = max(1, int(round(w / factor)))
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    grid = np.meshgrid(ys, xs, indexing="ij")
    return map_coordinates(channel, grid, order=1, mode="nearest"), h / out_h, w / out_w


def _hough_circles(edge, radii, ring_width):
    """Vote each radius with an annulus kernel; return the best
    (fill_fraction, x, y, r) where fill is votes normalized by perimeter.
    """
    edge_f = edge.astype(np.float64)
    best = (-1.0, 0.0, 0.0, 0.0)
    for r in radii:
        size = int(np.ceil(r + ring_width)) * 2 + 1
        c = size // 2
        yy, xx = np.mgrid[0:size, 0:size]
        dist = np.hypot(xx - c, yy - c)
        kernel = (np.abs(dist - r) <= ring_width / 2.0).astype(np.float64)
        votes = fftconvolve(edge_f, kernel, mode="same")
        fill = votes / (2.0 * np.pi * r)
        idx = np.unravel_index(np.argmax(fill), fill.shape)
        score = float(fill[idx])
        if score > best[0]:
            best = (score, float(idx[1]), float(idx[0]), float(r))
    return best


def locate_disc(
    image,
    margin_factor=2.5,
    threshold_percentile=99.0,
    radius_range=(0.02, 0.12),
    n_radii=10,
    min_fill=0.25,
    max_work_side=512,
):
    """Find the strongest circular bright structure in the red channel.

    The returned box side is margin_factor * detected diameter; the
    contract is containment of the disc, not precise centering.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.shape[0] == 0 or image.shape[1] == 0:
        raise ValueError("expected a nonempty H x W x 3 image")

    red = image[..., 0].astype(np.float64)
    factor = max(red.shape) / max_work_side
    if factor > 1.0:
        red, fy, fx = _downsample(red, factor)
    else:
        fy = fx = 1.0

    width = red.shape[1]
    smooth = gaussian_filter(red, sigma=max(1.0, 0.005 * width))
    t = np.percentile(smooth, threshold_percentile)
    mask = smooth >= t
    frac = mask.mean()
    if frac == 0.0 or frac > 0.3:
        raise NoDiscFound("no distinct bright region above the intensity threshold")

    edge = mask & ~binary_erosion(mask)
    r_lo = max(2.0, radius_range[0] * width)
    r_hi = max(r_lo + 1.0, radius_range[1] * width)
    radii = np.linspace(r_lo, r_hi, n_radii)
    ring_width = max(2.0, (r_hi - r_lo) / max(1, n_radii - 1))

    fill, x, y, r = _hough_circles(edge, radii, ring_width)
    if fill < min_fill:
        raise NoDiscFound(f"accumulator fill {fill:.3f} below floor {min_fill}")

    # map back to source coordinates (pixel-center aligned downsampling)
    cx = (x + 0.5) * fx - 0.5
    cy = (y + 0.5) * fy - 0.5
    side = margin_factor * 2.0 * r * (fx + fy) / 2.0
    return RoiBox(float(cx), float(cy), float(side))


def _sample_grid(box, out_size):
    x0 = box.center_x - box.side / 2.0
    y0 = box.center_y - box.side / 2.0
    scale = box.side / out_size
    xs = x0 + (np.arange(out_size) + 0.5) * scale
    ys = y0 + (np.arange(out_size) + 0.5) * scale
    return np.meshgrid(ys, xs, indexing="ij")


def crop_roi(image, box, out_size=400):
    """Resample the box to a square crop; out-of-bounds regions take the
    channel-wise image mean, interior samples are bilinear.
    """
    image = np.asarray(image)
    grid = _sample_grid(box, out_size)
    out = np.empty((out_size, out_size, image.shape[2]), dtype=np.float64)
    for ch in range(image.shape[2]):
        fill = float(image[..., ch].mean())
        out[..., ch] = map_coordinates(
            image[..., ch].astype(np.float64), grid, order=1, mode="constant", cval=fill
        )
    out = np.clip(np.round(out), 0, 255).astype(np.uint8)
    return RoiCrop(out, box, out_size)


def crop_mask(mask, box, out_size=400):
    """Nearest-neighbor crop of a binary mask (zeros outside the image)."""
    grid = _sample_grid(box, out_size)
    out = map_coordinates(
        np.asarray(mask).astype(np.float64), grid, order=0, mode="constant", cval=0.0
    )
    return out >= 0.5


def crop_sample(sample, box, out_size=400):
    """Crop image and masks identically; label and id are preserved."""
    crop = crop_roi(sample.image, box, out_size)
    od = crop_mask(sample.od_mask, box, out_size) if sample.od_mask is not None else None
    oc = crop_mask(sample.oc_mask, box, out_size) if sample.oc_mask is not None else None
    meta = dict(sample.meta)
    meta["roi_box"] = asdict(box)
    return FundusSample(sample.id, crop.image, od, oc, sample.label, meta), crop


def map_mask_back(mask, crop, source_h, source_w):
    """Map an ROI-sized mask back to source resolution.

    Soft (float) masks are interpolated bilinearly, binary masks with
    nearest-neighbor; everything outside the box is zero.
    """
    mask = np.asarray(mask)
    binary = mask.dtype == bool
    x0 = crop.box.center_x - crop.box.side / 2.0
    y0 = crop.box.center_y - crop.box.side / 2.0
    s = crop.scale
    xs = (np.arange(source_w) - x0) / s - 0.5
    ys = (np.arange(source_h) - y0) / s - 0.5
    grid = np.meshgrid(ys, xs, indexing="ij")
    if binary:
        out = map_coordinates(mask.astype(np.float64), grid, order=0, mode="constant", cval=0.0)
        return out >= 0.5
    return map_coordinates(mask.astype(np.float64), grid, order=1, mode="constant", cval=0.0)
