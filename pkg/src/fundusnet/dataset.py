"""Dataset handling: REFUGE-style directory loading, mask label encoding,
stratified folds, imbalance-aware oversampling, and a synthetic fundus
generator used for desk-scale end-to-end testing.

Directory layout::

    <root>/images/*.png|jpg     color fundus images
    <root>/masks/*.png          indexed masks, same stem as the image
    <root>/labels.csv           header "id,label", label 1 = glaucoma
"""

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    CorruptImage,
    CupOutsideDisc,
    MissingLabel,
    MissingMask,
    SingleClass,
    TooFewSamples,
    UnknownLabelValue,
)

NORMAL = 0
GLAUCOMA = 1

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


@dataclass
class FundusSample:
    """One fundus image with optional ground-truth masks and label."""

    id: str
    image: np.ndarray  # H x W x 3 uint8
    od_mask: np.ndarray = None  # H x W bool
    oc_mask: np.ndarray = None
    label: int = None  # NORMAL / GLAUCOMA
    meta: dict = field(default_factory=dict)

    @property
    def has_masks(self):
        return self.od_mask is not None and self.oc_mask is not None


@dataclass(frozen=True)
class LabelEncoding:
    """Pixel values of the indexed mask files (cup inside disc inside bg)."""

    cup_value: int = 0
    disc_value: int = 128
    background_value: int = 255

    def __post_init__(self):
        values = {self.cup_value, self.disc_value, self.background_value}
        if len(values) != 3:
            raise ValueError("cup, disc and background values must be distinct")


@dataclass
class FoldSplit:
    fold_id: int
    train_ids: list
    val_ids: list


@dataclass
class SynthParams:
    """Knobs of the synthetic fundus generator."""

    image_size: int = 640
    disc_radius_range: tuple = (0.08, 0.11)  # fraction of image size
    cdr_range: tuple = (0.3, 0.85)
    glaucoma_cdr_threshold: float = 0.6
    noise_level: float = 5.0
    rng_seed: int = 0

    def __post_init__(self):
        lo, hi = self.cdr_range
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError("cdr_range must lie inside (0, 1)")
        if self.disc_radius_range[1] >= 0.45:
            raise ValueError("disc must fit inside the image")


def decode_mask(indexed, enc=LabelEncoding()):
    """Split an indexed mask into (od, oc) boolean masks.

    Disc pixels are those carrying the cup or disc value; cup pixels carry
    the cup value alone.
    """
    indexed = np.asarray(indexed)
    known = (
        (indexed == enc.cup_value)
        | (indexed == enc.disc_value)
        | (indexed == enc.background_value)
    )
    if not known.all():
        bad = np.unique(indexed[~known])
        raise UnknownLabelValue(f"mask contains unknown values {bad.tolist()}")
    oc = indexed == enc.cup_value
    od = oc | (indexed == enc.disc_value)
    return od, oc


def encode_mask(od_mask, oc_mask, enc=LabelEncoding()):
    """Inverse of decode_mask; requires the cup to lie inside the disc."""
    od = np.asarray(od_mask).astype(bool)
    oc = np.asarray(oc_mask).astype(bool)
    if (oc & ~od).any():
        raise CupOutsideDisc("cup pixels found outside the disc")
    out = np.full(od.shape, enc.background_value, dtype=np.uint8)
    out[od] = enc.disc_value
    out[oc] = enc.cup_value
    return out


def _read_image(path):
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"))
    except (UnidentifiedImageError, OSError) as exc:
        raise CorruptImage(f"cannot decode {path}: {exc}") from exc


def _read_mask(path, enc):
    try:
        with Image.open(path) as img:
            indexed = np.asarray(img.convert("L"))
    except (UnidentifiedImageError, OSError) as exc:
        raise CorruptImage(f"cannot decode {path}: {exc}") from exc
    return decode_mask(indexed, enc)


def _read_labels(path):
    labels = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            labels[row["id"]] = int(row["label"])
    return labels


def load_dataset(root, enc=LabelEncoding(), supervised=False):
    """Load every image under ``root``, in lexicographic filename order.

    With ``supervised=True`` a missing mask or label raises; otherwise the
    corresponding fields stay None.
    """
    root = Path(root)
    image_dir = root / "images"
    mask_dir = root / "masks"
    labels_file = root / "labels.csv"
    labels = _read_labels(labels_file) if labels_file.exists() else {}

    samples = []
    paths = sorted(p for p in image_dir.glob("*") if p.suffix.lower() in IMAGE_EXTENSIONS)
    for path in paths:
        sample_id = path.stem
        image = _read_image(path)
        od = oc = None
        mask_path = mask_dir / f"{sample_id}.png"
        if mask_path.exists():
            od, oc = _read_mask(mask_path, enc)
        elif supervised:
            raise MissingMask(f"no mask for {sample_id}")
        label = labels.get(sample_id)
        if label is None and supervised:
            raise MissingLabel(f"no label for {sample_id}")
        samples.append(FundusSample(sample_id, image, od, oc, label))
    return samples


def save_dataset(samples, root, enc=LabelEncoding()):
    """Write samples in the standard directory layout (PNG, lossless)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    labeled = [s for s in samples if s.label is not None]
    for sample in samples:
        Image.fromarray(sample.image).save(root / "images" / f"{sample.id}.png")
        if sample.has_masks:
            encoded = encode_mask(sample.od_mask, sample.oc_mask, enc)
            Image.fromarray(encoded).save(root / "masks" / f"{sample.id}.png")
    if labeled:
        with open(root / "labels.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "label"])
            for sample in sorted(labeled, key=lambda s: s.id):
                writer.writerow([sample.id, sample.label])


def stratified_kfold(labels, k, seed, ids=None):
    """Deterministic stratified k-fold splits.

    Each class is shuffled with the seed and dealt round-robin, so per-fold
    class counts differ from perfect stratification by at most one.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    labels = list(labels)
    if ids is None:
        ids = list(range(len(labels)))
    rng = np.random.default_rng(seed)

    by_class = {}
    for idx, lab in enumerate(labels):
        by_class.setdefault(lab, []).append(idx)
    for lab, members in sorted(by_class.items()):
        if len(members) < k:
            raise TooFewSamples(f"class {lab} has {len(members)} member(s), need >= {k}")

    val_folds = [[] for _ in range(k)]
    for lab, members in sorted(by_class.items()):
        members = [members[i] for i in rng.permutation(len(members))]
        for pos, idx in enumerate(members):
            val_folds[pos % k].append(idx)

    splits = []
    all_idx = set(range(len(labels)))
    for fold_id, val in enumerate(val_folds):
        val_set = set(val)
        train = sorted(all_idx - val_set)
        splits.append(
            FoldSplit(fold_id, [ids[i] for i in train], [ids[i] for i in sorted(val_set)])
        )
    return splits


def oversample_plan(labels, target_minority_fraction=0.5, ids=None):
    """Repeat counts that lift the minority class to the target fraction.

    Majority samples keep count 1; every minority sample is repeated the
    same (minimal) number of times.
    """
    if not 0.0 < target_minority_fraction <= 0.5:
        raise ValueError("target_minority_fraction must be in (0, 0.5]")
    labels = list(labels)
    if ids is None:
        ids = list(range(len(labels)))
    counts = {}
    for lab in labels:
        counts[lab] = counts.get(lab, 0) + 1
    if len(counts) < 2:
        raise SingleClass("oversampling needs both classes present")

    minority = min(sorted(counts), key=lambda lab: counts[lab])
    n_min = counts[minority]
    n_maj = len(labels) - n_min
    t = target_minority_fraction
    repeat = max(1, int(np.ceil(t * n_maj / ((1.0 - t) * n_min))))
    return [(ids[i], repeat if labels[i] == minority else 1) for i in range(len(labels))]


def _raster_ellipse(size, cx, cy, a, b, theta):
    y, x = np.mgrid[0:size, 0:size]
    dx = x - cx
    dy = y - cy
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def render_fundus(
    image_size,
    disc_center,
    disc_axes,
    theta,
    cdr,
    noise_level,
    rng,
):
    """Draw a fundus-like image: dark surround, circular field, a bright
    disc with radial falloff, and a brighter concentric cup scaled by cdr.

    Returns (image, od_mask, oc_mask). The cup is an exact scaled copy of
    the disc ellipse, so its vertical extent ratio equals cdr up to
    rasterization.
    """
    size = image_size
    cx, cy = disc_center
    a, b = disc_axes

    y, x = np.mgrid[0:size, 0:size]
    half = (size - 1) / 2.0
    field = (x - half) ** 2 + (y - half) ** 2 <= (0.47 * size) ** 2

    image = np.zeros((size, size, 3), dtype=np.float64)
    image[...] = (16.0, 10.0, 8.0)
    image[field] = (168.0, 72.0, 30.0)

    od_mask = _raster_ellipse(size, cx, cy, a, b, theta)
    oc_mask = _raster_ellipse(size, cx, cy, cdr * a, cdr * b, theta)

    # radial brightness falloff keeps percentile thresholds inside the disc
    dx = x - cx
    dy = y - cy
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    rho2 = (u / a) ** 2 + (v / b) ** 2
    profile = np.clip(1.0 - 0.35 * rho2, 0.0, None)
    disc_color = np.array([72.0, 108.0, 82.0])
    image[od_mask] += disc_color * profile[od_mask, None]
    image[oc_mask] += (14.0, 32.0, 36.0)

    if noise_level > 0:
        image += rng.normal(0.0, noise_level, image.shape)
    image = np.clip(np.round(image), 0, 255).astype(np.uint8)
    return image, od_mask, oc_mask


def synth_sample(params, rng, sample_id="synth", cdr_range=None):
    """Generate one synthetic sample; glaucoma iff the drawn CDR exceeds
    the threshold. Generator truth is stored in ``sample.meta``.
    """
    size = params.image_size
    r_lo, r_hi = params.disc_radius_range
    r = rng.uniform(r_lo, r_hi) * size
    aspect = rng.uniform(0.9, 1.1)
    a, b = r * aspect, r
    theta = rng.uniform(-0.3, 0.3)

    lo, hi = cdr_range if cdr_range is not None else params.cdr_range
    cdr = rng.uniform(lo, hi)

    max_off = max(0.0, 0.45 * size - max(a, b) - 2.0)
    jitter = min(0.12 * size, max_off)
    half = (size - 1) / 2.0
    cx = half + rng.uniform(-jitter, jitter)
    cy = half + rng.uniform(-jitter, jitter)

    image, od, oc = render_fundus(size, (cx, cy), (a, b), theta, cdr, params.noise_level, rng)
    label = GLAUCOMA if cdr > params.glaucoma_cdr_threshold else NORMAL
    meta = {
        "cdr": float(cdr),
        "disc_center": (float(cx), float(cy)),
        "disc_axes": (float(a), float(b)),
        "theta": float(theta),
    }
    return FundusSample(sample_id, image, od, oc, label, meta)


def make_synthetic_dataset(params, n, glaucoma_fraction=0.1, seed=None, class_margin=0.03):
    """A list of n synthetic samples with an exact glaucoma count.

    Per-sample CDR draws are restricted to the correct side of the
    threshold (with a small margin) so the class counts are exact.
    """
    seed = params.rng_seed if seed is None else seed
    n_glaucoma = int(round(n * glaucoma_fraction))
    rng_assign = np.random.default_rng(sample_rng_seed(seed, "assign"))
    flags = np.zeros(n, dtype=bool)
    flags[rng_assign.permutation(n)[:n_glaucoma]] = True

    lo, hi = params.cdr_range
    thr = params.glaucoma_cdr_threshold
    samples = []
    for i in range(n):
        rng = np.random.default_rng(sample_rng_seed(seed, "sample", i))
        if flags[i]:
            rng_range = (min(thr + class_margin, hi), hi)
        else:
            rng_range = (lo, max(thr - class_margin, lo))
        samples.append(synth_sample(params, rng, sample_id=f"synth_{i:04d}", cdr_range=rng_range))
    return samples


def sample_rng_seed(*keys):
    """Stable integer seed material from mixed int/str keys."""
    parts = []
    for key in keys:
        if isinstance(key, str):
            parts.append(zlib.crc32(key.encode()))
        else:
            parts.append(int(key) & 0xFFFFFFFF)
    return tuple(parts)
