"""Soft-mask refinement: threshold at 0.5, morphological opening, largest
connected component, and (disc only) replacement by a least-squares
ellipse fit of the boundary.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import DegenerateFit, InsufficientBoundary


@dataclass(frozen=True)
class Ellipse:
    """Parametric ellipse: center, semi-axes (a >= b), rotation in [0, pi)."""

    cx: float
    cy: float
    a: float
    b: float
    theta: float

    def __post_init__(self):
        if not (self.a >= self.b > 0):
            raise ValueError("semi-axes must satisfy a >= b > 0")
        if not (0.0 <= self.theta < np.pi):
            raise ValueError("theta must be normalized to [0, pi)")


@dataclass(frozen=True)
class PostprocessParams:
    threshold: float = 0.5
    opening_radius: int = 5  # calibrated for 400 x 400 maps
    connectivity: int = 8
    fit_ellipse_od: bool = True
    enforce_cup_in_disc: bool = False

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if self.opening_radius < 0:
            raise ValueError("opening_radius must be nonnegative")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")

    def scaled(self, out_size, reference=400):
        """Proportionally rescale the opening radius for other map sizes."""
        radius = max(1, int(round(self.opening_radius * out_size / reference)))
        return replace(self, opening_radius=radius)


@dataclass
class PostprocessResult:
    od_mask: np.ndarray
    oc_mask: np.ndarray
    warnings: list


def binarize(soft, threshold=0.5):
    """Pixels at or above the threshold become foreground."""
    return np.asarray(soft) >= threshold


def disk_structure(radius):
    if radius <= 0:
        return np.ones((1, 1), dtype=bool)
    span = np.arange(-radius, radius + 1)
    yy, xx = np.meshgrid(span, span, indexing="ij")
    return xx**2 + yy**2 <= radius**2


def morphological_opening(mask, radius):
    """Erosion then dilation with a discrete disk; anti-extensive and
    idempotent."""
    mask = np.asarray(mask).astype(bool)
    if radius <= 0:
        return mask.copy()
    structure = disk_structure(radius)
    return ndimage.binary_opening(mask, structure=structure)


def _connectivity_structure(connectivity):
    return ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)


def largest_component(mask, connectivity=8):
    """Keep only the maximum-area component; empty input stays empty.

    Equal areas break toward the component whose first pixel in raster
    order is smallest.
    """
    mask = np.asarray(mask).astype(bool)
    labeled, n = ndimage.label(mask, structure=_connectivity_structure(connectivity))
    if n == 0:
        return np.zeros_like(mask)
    areas = np.bincount(labeled.ravel())[1:]
    # scipy labels components in raster-scan discovery order, so the first
    # label among ties is the lexicographically smallest first pixel
    keep = int(np.argmax(areas)) + 1
    return labeled == keep


def _boundary_points(mask):
    """(x, y) coordinates of inner-boundary pixels (8-connected curve)."""
    mask = np.asarray(mask).astype(bool)
    eroded = ndimage.binary_erosion(mask, structure=_connectivity_structure(4))
    boundary = mask & ~eroded
    ys, xs = np.nonzero(boundary)
    return xs.astype(np.float64), ys.astype(np.float64)


def fit_ellipse(mask):
    """Direct least-squares conic fit (ellipse-constrained) to the
    boundary pixels of a mask."""
    xs, ys = _boundary_points(mask)
    if xs.size < 5:
        raise InsufficientBoundary(f"need >= 5 boundary pixels, got {xs.size}")
    coeffs = fit_ellipse_conic(xs, ys)
    return conic_to_ellipse(coeffs)


def fit_ellipse_conic(xs, ys):
    """Stable direct least-squares fit of a*x^2+b*xy+c*y^2+d*x+e*y+f=0
    with the ellipse constraint 4ac - b^2 = 1 (Halir-Flusser scheme)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    mx, my = x.mean(), y.mean()
    x = x - mx
    y = y - my

    d1 = np.column_stack([x * x, x * y, y * y])
    d2 = np.column_stack([x, y, np.ones_like(x)])
    s1 = d1.T @ d1
    s2 = d1.T @ d2
    s3 = d2.T @ d2
    try:
        t = -np.linalg.solve(s3, s2.T)
    except np.linalg.LinAlgError as exc:
        raise DegenerateFit("singular scatter matrix") from exc
    m = s1 + s2 @ t
    # inverse of the constraint matrix [[0,0,2],[0,-1,0],[2,0,0]]
    m = np.array([m[2] / 2.0, -m[1], m[0] / 2.0])
    eigval, eigvec = np.linalg.eig(m)
    real = np.abs(np.imag(eigval)) < 1e-9
    vec = np.real(eigvec)
    cond = 4.0 * vec[0] * vec[2] - vec[1] ** 2
    valid = np.where(real & (cond > 0))[0]
    if valid.size == 0:
        raise DegenerateFit("no eigenvector satisfies the ellipse constraint")
    a1 = vec[:, valid[0]]
    a2 = t @ a1
    a, b, c = a1
    d, e, f = a2
    # undo the centering shift
    d0 = d - 2 * a * mx - b * my
    e0 = e - 2 * c * my - b * mx
    f0 = f + a * mx * mx + b * mx * my + c * my * my - d * mx - e * my
    return np.array([a, b, c, d0, e0, f0])


def conic_to_ellipse(coeffs):
    """Convert conic coefficients to a normalized parametric Ellipse."""
    a, b, c, d, e, f = (float(v) for v in coeffs)
    if a + c < 0:  # normalize the overall conic sign
        a, b, c, d, e, f = -a, -b, -c, -d, -e, -f
    mat = np.array([[a, b / 2.0], [b / 2.0, c]])
    det = np.linalg.det(mat)
    if det <= 0:
        raise DegenerateFit("conic is not an ellipse")
    center = np.linalg.solve(2.0 * mat, [-d, -e])
    cx, cy = center
    # value of the quadratic form at the center
    f0 = f + (d * cx + e * cy) / 2.0
    eigval, eigvec = np.linalg.eigh(mat)
    radii2 = -f0 / eigval
    if not np.all(radii2 > 0):
        raise DegenerateFit("degenerate or imaginary ellipse")
    radii = np.sqrt(radii2)
    major = int(np.argmax(radii))
    a_semi = float(radii[major])
    b_semi = float(radii[1 - major])
    vx, vy = eigvec[:, major]
    theta = float(np.arctan2(vy, vx)) % np.pi
    return Ellipse(float(cx), float(cy), a_semi, b_semi, theta)


def ellipse_inclusion(e, h, w):
    """Implicit ellipse values on the pixel grid (<= 1 means inside)."""
    ys, xs = np.mgrid[0:h, 0:w]
    dx = xs - e.cx
    dy = ys - e.cy
    cos_t, sin_t = np.cos(e.theta), np.sin(e.theta)
    u = dx * cos_t + dy * sin_t
    v = -dx * sin_t + dy * cos_t
    return (u / e.a) ** 2 + (v / e.b) ** 2


def rasterize_ellipse(e, h, w):
    """Binary mask of pixel centers inside the ellipse, clipped to bounds."""
    return ellipse_inclusion(e, h, w) <= 1.0


def conic_residual(coeffs, xs, ys):
    """Mean squared algebraic distance of points to a conic."""
    a, b, c, d, e, f = coeffs
    vals = a * xs * xs + b * xs * ys + c * ys * ys + d * xs + e * ys + f
    return float(np.mean(vals**2))


def _refine_structure(soft, params):
    mask = binarize(soft, params.threshold)
    mask = morphological_opening(mask, params.opening_radius)
    return largest_component(mask, params.connectivity)


def postprocess_pair(od_soft, oc_soft, params=PostprocessParams()):
    """Refine both soft maps; the disc is additionally replaced by its
    fitted ellipse when the fit succeeds.

    Failures degrade to the unrefined component mask and are recorded in
    the warning list, never raised.
    """
    warnings = []
    od = _refine_structure(od_soft, params)
    oc = _refine_structure(oc_soft, params)
    if not od.any():
        warnings.append("od: empty mask after refinement")
    if not oc.any():
        warnings.append("oc: empty mask after refinement")

    if params.fit_ellipse_od and od.any():
        try:
            ellipse = fit_ellipse(od)
            od = rasterize_ellipse(ellipse, *od.shape)
        except (InsufficientBoundary, DegenerateFit) as exc:
            warnings.append(f"od: ellipse fit failed ({exc}), kept component mask")
    if params.enforce_cup_in_disc:
        oc = oc & od
    return PostprocessResult(od, oc, warnings)
