"""Local binary pattern codes with circular interpolated sampling.

A pixel's code compares its value against `neighbors` samples spaced evenly
on a circle of radius `radius` (bilinear interpolation at non-integer
positions); bit k is set when neighbor k is >= (or >, per tie rule) the
center. Patch texture is the histogram of codes, uniformly range-binned and
L1-normalized.

Comparisons are evaluated on neighbor-minus-center differences, which makes
codes exactly invariant to constant intensity shifts and keeps ties exact on
constant patches.
"""

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import RoiError
from .geometry import RoiPatch
from .imaging import ImageGrid


@dataclass(frozen=True)
class LbpConfig:
    radius: float = 2.0
    neighbors: int = 8
    bins: int = 256
    tie_rule: str = "geq"

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError(f"radius must be > 0, got {self.radius}")
        if self.neighbors < 4:
            raise ValueError(f"neighbors must be >= 4, got {self.neighbors}")
        n_codes = 1 << self.neighbors
        if not (2 <= self.bins <= n_codes):
            raise ValueError(f"bins must be in [2, 2^p], got {self.bins}")
        if n_codes % self.bins != 0:
            raise ValueError(
                f"2^{self.neighbors} is not divisible by {self.bins} bins"
            )
        if self.tie_rule not in ("geq", "gt"):
            raise ValueError(f"tie_rule must be 'geq' or 'gt', got {self.tie_rule!r}")

    @property
    def n_codes(self) -> int:
        return 1 << self.neighbors

    @property
    def margin(self) -> int:
        """Minimum distance of a valid center from every image border."""
        return int(math.ceil(self.radius)) + 1

    def offsets(self) -> np.ndarray:
        """(p, 2) array of (dx, dy) sampling offsets; k = 0 on the +x axis,
        proceeding counter-clockwise (y axis points down)."""
        k = np.arange(self.neighbors)
        ang = 2.0 * np.pi * k / self.neighbors
        return np.column_stack([self.radius * np.cos(ang),
                                -self.radius * np.sin(ang)])


# Profile consistent with an 8-neighbor 256-code histogram.
PAPER_PROFILE = LbpConfig(radius=2.0, neighbors=8, bins=256)
# Alternative reading with p = 8*r = 16 neighbors, range-binned 65536 -> 256.
PAPER_P16_PROFILE = LbpConfig(radius=2.0, neighbors=16, bins=256)
PROFILES = {"paper": PAPER_PROFILE, "paper-p16": PAPER_P16_PROFILE}


@dataclass(frozen=True)
class LbpHistogram:
    values: np.ndarray
    normalized: bool

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError("histogram must be 1-D")
        if (values < 0).any():
            raise ValueError("histogram values must be nonnegative")
        if self.normalized:
            if abs(values.sum() - 1.0) > 1e-9:
                raise ValueError("normalized histogram must sum to 1")
        elif not np.array_equal(values, np.round(values)):
            raise ValueError("unnormalized histogram must hold integral counts")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def bins(self) -> int:
        return self.values.shape[0]


def _neighbor_diffs(pixels: np.ndarray, cfg: LbpConfig) -> np.ndarray:
    """(p, H-2m, W-2m) array of neighbor-minus-center values for every
    interior center, by shifted-slice bilinear interpolation."""
    h, w = pixels.shape
    m = cfg.margin
    if h <= 2 * m or w <= 2 * m:
        raise RoiError(
            f"patch {h}x{w} too small for radius {cfg.radius} (margin {m})"
        )
    center = pixels[m:h - m, m:w - m]
    out = np.empty((cfg.neighbors, h - 2 * m, w - 2 * m))
    for k, (dx, dy) in enumerate(cfg.offsets()):
        ix, iy = int(math.floor(dx)), int(math.floor(dy))
        fx, fy = dx - ix, dy - iy
        y0, x0 = m + iy, m + ix

        def shifted(dr, dc, y0=y0, x0=x0, h=h, w=w, m=m):
            return pixels[y0 + dr:y0 + dr + h - 2 * m,
                          x0 + dc:x0 + dc + w - 2 * m]

        interp = ((1.0 - fx) * (1.0 - fy) * (shifted(0, 0) - center)
                  + fx * (1.0 - fy) * (shifted(0, 1) - center)
                  + (1.0 - fx) * fy * (shifted(1, 0) - center)
                  + fx * fy * (shifted(1, 1) - center))
        out[k] = interp
    return out


def lbp_code_map(pixels: np.ndarray, cfg: LbpConfig) -> np.ndarray:
    """Integer LBP codes for all interior centers (margin ceil(r)+1); output
    shape (H-2m, W-2m) aligned so entry (0, 0) is the center at (m, m)."""
    diffs = _neighbor_diffs(np.asarray(pixels, dtype=np.float64), cfg)
    bits = (diffs >= 0.0) if cfg.tie_rule == "geq" else (diffs > 0.0)
    weights = (1 << np.arange(cfg.neighbors, dtype=np.int64))
    return np.tensordot(weights, bits.astype(np.int64), axes=(0, 0))


def lbp_code(img: ImageGrid, x: int, y: int, cfg: LbpConfig) -> int:
    """LBP code of one center pixel; (x, y) must be at least ceil(radius)+1
    pixels away from every border."""
    m = cfg.margin
    if not (m <= x <= img.width - 1 - m and m <= y <= img.height - 1 - m):
        raise ValueError(
            f"center ({x}, {y}) closer than {m} pixels to a border of "
            f"{img.width}x{img.height}"
        )
    codes = lbp_code_map(img.pixels, cfg)
    return int(codes[y - m, x - m])


def _mask_valid_centers(mask: np.ndarray, cfg: LbpConfig) -> np.ndarray:
    """Centers whose own pixel and every pixel touched by the bilinear
    sampling of the circle lie inside the mask."""
    h, w = mask.shape
    m = cfg.margin
    valid = mask[m:h - m, m:w - m].copy()
    for dx, dy in cfg.offsets():
        ix, iy = int(math.floor(dx)), int(math.floor(dy))
        y0, x0 = m + iy, m + ix
        for dr in (0, 1):
            for dc in (0, 1):
                valid &= mask[y0 + dr:y0 + dr + h - 2 * m,
                              x0 + dc:x0 + dc + w - 2 * m]
    return valid


def lbp_histogram(patch: RoiPatch, cfg: LbpConfig, normalize: bool = True) -> LbpHistogram:
    """Histogram of LBP codes over a patch's valid centers.

    Codes are binned by floor(code / (2^p / bins)). With a masked patch only
    centers whose full sampling circle lies in masked pixels contribute.
    """
    pixels = patch.pixels.pixels
    codes = lbp_code_map(pixels, cfg)
    if patch.mask is not None:
        codes = codes[_mask_valid_centers(patch.mask, cfg)]
    else:
        codes = codes.ravel()
    if codes.size == 0:
        raise RoiError("patch has no valid LBP centers")
    bin_width = cfg.n_codes // cfg.bins
    counts = np.bincount(codes // bin_width, minlength=cfg.bins).astype(np.float64)
    if not normalize:
        return LbpHistogram(counts, normalized=False)
    return LbpHistogram(counts / counts.sum(), normalized=True)


class LbpFeatures(BaseEstimator, TransformerMixin):
    """Stateless transformer turning ROI patches into LBP histogram rows."""

    def __init__(self, radius=2.0, neighbors=8, bins=256, tie_rule="geq"):
        self.radius = radius
        self.neighbors = neighbors
        self.bins = bins
        self.tie_rule = tie_rule

    def _config(self) -> LbpConfig:
        return LbpConfig(self.radius, self.neighbors, self.bins, self.tie_rule)

    def fit(self, X=None, y=None):
        self._config()  # validate parameters
        return self

    def transform(self, X) -> np.ndarray:
        """X: iterable of RoiPatch (or bare 2-D arrays). Returns an
        (n, bins) matrix of normalized histograms."""
        cfg = self._config()
        rows = []
        for patch in X:
            if not isinstance(patch, RoiPatch):
                patch = RoiPatch(ImageGrid(np.asarray(patch), 1.0), "superior")
            rows.append(lbp_histogram(patch, cfg).values)
        return np.vstack(rows) if rows else np.empty((0, cfg.bins))

    def feature_names(self) -> list[str]:
        return [f"bin_{i}" for i in range(self.bins)]
