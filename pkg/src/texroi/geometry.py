"""Landmark ingestion, patellar alignment, and ROI extraction.

A landmark file carries 21 contour points followed by 2 marginal points
(superior then inferior). Alignment rotates image and landmarks rigidly so
the marginal segment is vertical with the superior point on top; the
superior/inferior ROIs are rectangles 20% of the patella height tall,
anchored at the marginal rows, and the whole-patella ROI is the bounding box
of a spline-contour mask.
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import splev, splprep

from .errors import LandmarkFormatError, MaskDegenerateError, RoiError
from .imaging import ImageGrid, sample_bilinear

N_CONTOUR_POINTS = 21
N_MARGINAL_POINTS = 2
ROI_HEIGHT_FRACTION = 0.20
MASK_BOUNDARY_SAMPLES = 512


@dataclass(frozen=True)
class LandmarkSet:
    """21 contour points plus the 2 marginal alignment points, as (x, y)
    pixel coordinates. Row 0 of `marginal` is the superior point."""

    contour: np.ndarray
    marginal: np.ndarray

    def __post_init__(self):
        contour = np.ascontiguousarray(self.contour, dtype=np.float64)
        marginal = np.ascontiguousarray(self.marginal, dtype=np.float64)
        if contour.shape != (N_CONTOUR_POINTS, 2):
            raise LandmarkFormatError(
                f"expected {N_CONTOUR_POINTS} contour points, got {contour.shape}"
            )
        if marginal.shape != (N_MARGINAL_POINTS, 2):
            raise LandmarkFormatError(
                f"expected {N_MARGINAL_POINTS} marginal points, got {marginal.shape}"
            )
        if not (np.isfinite(contour).all() and np.isfinite(marginal).all()):
            raise LandmarkFormatError("landmark coordinates must be finite")
        if np.array_equal(marginal[0], marginal[1]):
            raise LandmarkFormatError("marginal points must be distinct")
        contour.setflags(write=False)
        marginal.setflags(write=False)
        object.__setattr__(self, "contour", contour)
        object.__setattr__(self, "marginal", marginal)

    @property
    def superior(self) -> np.ndarray:
        return self.marginal[0]

    @property
    def inferior(self) -> np.ndarray:
        return self.marginal[1]


@dataclass(frozen=True)
class RoiPatch:
    """An extracted texture patch; whole-patella patches carry a boolean mask
    of the same shape, superior/inferior patches carry none."""

    pixels: ImageGrid
    kind: str
    knee_id: str = ""
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("superior", "inferior", "whole"):
            raise ValueError(f"bad ROI kind {self.kind!r}")
        if (self.kind == "whole") != (self.mask is not None):
            raise ValueError("mask must be present iff kind == 'whole'")
        if self.mask is not None:
            mask = np.ascontiguousarray(self.mask, dtype=bool)
            if mask.shape != self.pixels.pixels.shape:
                raise ValueError(
                    f"mask shape {mask.shape} != patch shape {self.pixels.pixels.shape}"
                )
            mask.setflags(write=False)
            object.__setattr__(self, "mask", mask)


def load_landmarks(path) -> LandmarkSet:
    """Parse a landmark text file: one `x y` pair per line, 21 contour lines
    then 2 marginal lines; `#` comment lines are ignored."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise LandmarkFormatError(f"{path}: unreadable file ({exc})") from exc
    points = []
    for line_no, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split()
        if len(parts) != 2:
            raise LandmarkFormatError(
                f"{path}:{line_no}: expected 'x y', got {stripped!r}"
            )
        try:
            points.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise LandmarkFormatError(
                f"{path}:{line_no}: non-numeric coordinate in {stripped!r}"
            ) from None
    total = N_CONTOUR_POINTS + N_MARGINAL_POINTS
    if len(points) != total:
        raise LandmarkFormatError(
            f"{path}: expected {total} points "
            f"({N_CONTOUR_POINTS} contour + {N_MARGINAL_POINTS} marginal), "
            f"got {len(points)}"
        )
    pts = np.asarray(points, dtype=np.float64)
    return LandmarkSet(pts[:N_CONTOUR_POINTS], pts[N_CONTOUR_POINTS:])


def rescale_landmarks(lm: LandmarkSet, src_spacing: float, dst_spacing: float) -> LandmarkSet:
    """Map landmark coordinates from one pixel grid to another, consistent
    with the pixel-center convention used by image resampling."""
    if src_spacing <= 0 or dst_spacing <= 0:
        raise ValueError("spacings must be > 0")
    if src_spacing == dst_spacing:
        return lm
    ratio = src_spacing / dst_spacing

    def f(pts):
        return (pts + 0.5) * ratio - 0.5

    return LandmarkSet(f(lm.contour), f(lm.marginal))


def hflip_landmarks(lm: LandmarkSet, width: int) -> LandmarkSet:
    """Mirror landmark x coordinates to match a horizontally flipped image."""

    def f(pts):
        out = pts.copy()
        out[:, 0] = (width - 1) - out[:, 0]
        return out

    return LandmarkSet(f(lm.contour), f(lm.marginal))


def _rotation_angle(lm: LandmarkSet) -> float:
    """Angle rotating the superior->inferior vector onto the +y (downward)
    image axis."""
    v = lm.inferior - lm.superior
    return math.atan2(v[0], v[1])


def align_patella(img: ImageGrid, lm: LandmarkSet) -> tuple[ImageGrid, LandmarkSet]:
    """Rigidly rotate image and landmarks about the marginal midpoint so the
    marginal segment is vertical with the superior point on top.

    The image is resampled bilinearly on its own grid; landmark coordinates
    get the same rotation. Marginal distances are preserved exactly up to
    floating point.
    """
    theta = _rotation_angle(lm)
    center = (lm.superior + lm.inferior) / 2.0
    if theta == 0.0:
        return img, lm
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    rot = np.array([[cos_t, -sin_t], [sin_t, cos_t]])

    def fwd(pts):
        return (pts - center) @ rot.T + center

    # inverse rotation pulls each output pixel back to its source position
    ys, xs = np.mgrid[0:img.height, 0:img.width].astype(np.float64)
    dx = xs - center[0]
    dy = ys - center[1]
    src_x = cos_t * dx + sin_t * dy + center[0]
    src_y = -sin_t * dx + cos_t * dy + center[1]
    rotated = sample_bilinear(img.pixels, src_x, src_y)
    return img.with_pixels(rotated), LandmarkSet(fwd(lm.contour), fwd(lm.marginal))


def patella_height(lm: LandmarkSet, spacing: float) -> float:
    """Vertical contour extent (max y - min y) in millimetres."""
    ys = lm.contour[:, 1]
    return float(ys.max() - ys.min()) * spacing


def _contour_bbox_cols(lm: LandmarkSet) -> tuple[int, int]:
    xs = lm.contour[:, 0]
    return int(round(float(xs.min()))), int(round(float(xs.max())))


def extract_roi(img: ImageGrid, lm: LandmarkSet, kind: str, knee_id: str = "",
                width_mode: str = "bbox") -> RoiPatch:
    """Cut the superior or inferior rectangle from an aligned image.

    The rectangle is 20% of the patella height tall (rounded to pixels) and
    sits flush against the matching marginal landmark row. Horizontally it
    spans the contour bounding box (`width_mode="bbox"`, the default) or a
    square of the ROI height centered on the bounding box
    (`width_mode="square"`). It is clipped to the image bounds.
    """
    if kind not in ("superior", "inferior"):
        raise ValueError(f"kind must be 'superior' or 'inferior', got {kind!r}")
    if width_mode not in ("bbox", "square"):
        raise ValueError(f"width_mode must be 'bbox' or 'square', got {width_mode!r}")
    ys = lm.contour[:, 1]
    height_px = float(ys.max() - ys.min())
    c0, c1 = _contour_bbox_cols(lm)
    if height_px <= 0 or c1 <= c0:
        raise RoiError("degenerate patella: zero height or width")
    roi_h = int(round(ROI_HEIGHT_FRACTION * height_px))
    if roi_h < 1:
        raise RoiError(f"patella too small: ROI height rounds to {roi_h}")
    if width_mode == "square":
        mid = (c0 + c1) // 2
        c0 = mid - roi_h // 2
        c1 = c0 + roi_h - 1
    if kind == "superior":
        r0 = int(round(float(lm.superior[1])))
        r1 = r0 + roi_h - 1
    else:
        r1 = int(round(float(lm.inferior[1])))
        r0 = r1 - roi_h + 1
    r0c, r1c = max(r0, 0), min(r1, img.height - 1)
    c0c, c1c = max(c0, 0), min(c1, img.width - 1)
    if r0c > r1c or c0c > c1c:
        raise RoiError(f"{kind} ROI lies fully outside the image")
    patch = img.pixels[r0c:r1c + 1, c0c:c1c + 1]
    return RoiPatch(ImageGrid(patch, img.spacing), kind, knee_id)


def _sample_contour_spline(lm: LandmarkSet, n_samples: int, smoothing: float) -> np.ndarray:
    """Closed periodic cubic spline through the contour points, sampled at
    `n_samples` boundary positions."""
    pts = lm.contour
    # splprep requires the closing point to wrap around for periodic fits
    closed = np.vstack([pts, pts[:1]])
    tck, _ = splprep([closed[:, 0], closed[:, 1]], s=smoothing, per=True, k=3)
    u = np.linspace(0.0, 1.0, n_samples, endpoint=False)
    x, y = splev(u, tck)
    return np.column_stack([x, y])


def _segments_self_intersect(poly: np.ndarray) -> bool:
    """Check a closed polyline for proper self-intersections between
    non-adjacent segments (vectorized orientation tests)."""
    n = len(poly)
    a = poly
    b = np.roll(poly, -1, axis=0)

    def cross(o, p, q):
        return ((p[..., 0] - o[..., 0]) * (q[..., 1] - o[..., 1])
                - (p[..., 1] - o[..., 1]) * (q[..., 0] - o[..., 0]))

    a_i = a[:, None, :]
    b_i = b[:, None, :]
    a_j = a[None, :, :]
    b_j = b[None, :, :]
    d1 = cross(a_i, b_i, a_j)
    d2 = cross(a_i, b_i, b_j)
    d3 = cross(a_j, b_j, a_i)
    d4 = cross(a_j, b_j, b_i)
    proper = (d1 * d2 < 0) & (d3 * d4 < 0)
    idx = np.arange(n)
    adjacent = (np.abs(idx[:, None] - idx[None, :]) <= 1) | \
               (np.abs(idx[:, None] - idx[None, :]) == n - 1)
    return bool(np.any(proper & ~adjacent))


def _fill_even_odd(poly: np.ndarray, dims: tuple[int, int]) -> np.ndarray:
    """Rasterize a closed polygon: pixel centers (integer lattice) inside by
    the even-odd rule. Uses a per-row crossing-count difference array."""
    height, width = dims
    diff = np.zeros((height, width + 1), dtype=np.int64)
    x1 = poly[:, 0]
    y1 = poly[:, 1]
    x2 = np.roll(x1, -1)
    y2 = np.roll(y1, -1)
    for ax, ay, bx, by in zip(x1, y1, x2, y2):
        if ay == by:
            continue
        if ay > by:
            ax, ay, bx, by = bx, by, ax, ay
        r_lo = max(0, int(math.ceil(ay)))
        r_hi = min(height - 1, int(math.ceil(by)) - 1)  # half-open [ay, by)
        if r_lo > r_hi:
            continue
        rows = np.arange(r_lo, r_hi + 1)
        x_int = ax + (rows - ay) * (bx - ax) / (by - ay)
        # pixel centers with column index < x_int get +1: range [0, ceil(x_int));
        # clipping makes crossings left of the image cancel out
        cols = np.clip(np.ceil(x_int).astype(np.int64), 0, width)
        diff[rows, 0] += 1
        diff[rows, cols] -= 1
    counts = np.cumsum(diff[:, :-1], axis=1)
    return (counts % 2) == 1


def patella_mask(
    lm: LandmarkSet,
    dims: tuple[int, int],
    boundary_samples: int = MASK_BOUNDARY_SAMPLES,
    smoothing: float = 0.0,
) -> np.ndarray:
    """Boolean whole-patella mask for an aligned landmark set.

    The 21 contour points are joined by a closed periodic cubic spline,
    sampled at `boundary_samples` points, and filled by the even-odd rule on
    pixel centers. Raises :class:`MaskDegenerateError` if the sampled
    boundary self-intersects or encloses no pixels.
    """
    if boundary_samples < 512:
        raise ValueError("boundary_samples must be >= 512")
    poly = _sample_contour_spline(lm, boundary_samples, smoothing)
    if _segments_self_intersect(poly):
        raise MaskDegenerateError("sampled contour spline self-intersects")
    mask = _fill_even_odd(poly, dims)
    if not mask.any():
        raise MaskDegenerateError("contour mask is empty within image bounds")
    return mask


def extract_whole_patella(img: ImageGrid, lm: LandmarkSet, knee_id: str = "") -> RoiPatch:
    """Crop the bounding box of the patella mask and attach the cropped mask."""
    mask = patella_mask(lm, (img.height, img.width))
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    r0, r1 = int(rows[0]), int(rows[-1])
    c0, c1 = int(cols[0]), int(cols[-1])
    patch = img.pixels[r0:r1 + 1, c0:c1 + 1]
    return RoiPatch(
        ImageGrid(patch, img.spacing), "whole", knee_id,
        mask=mask[r0:r1 + 1, c0:c1 + 1],
    )
