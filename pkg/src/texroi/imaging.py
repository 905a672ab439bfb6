"""Image raster type, PGM/PNG I/O, and the radiograph preprocessing chain.

The chain applied to every knee image is: percentile truncation (5th-99th),
global contrast normalization (per-image mean 0 / std 1), bilinear resampling
to a 0.2 mm isotropic grid, and a horizontal flip for right knees so all
patellae face the same way.
"""

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FlatImageError, ImageFormatError

DEFAULT_SPACING_MM = 0.2
TRUNCATE_LO_PCT = 5.0
TRUNCATE_HI_PCT = 99.0

# Pillow modes that decode to a single gray channel.
_GRAY_MODES = {"L", "I", "I;16", "I;16B", "I;16L"}


@dataclass(frozen=True)
class ImageGrid:
    """A 2-D real-valued raster with isotropic physical pixel spacing (mm)."""

    pixels: np.ndarray
    spacing: float

    def __post_init__(self):
        px = np.ascontiguousarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ValueError(f"pixels must be 2-D, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"image must be at least 1x1, got {px.shape}")
        if not np.isfinite(px).all():
            raise ValueError("image contains non-finite intensities")
        if not (isinstance(self.spacing, (int, float)) and self.spacing > 0):
            raise ValueError(f"spacing must be > 0, got {self.spacing!r}")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "spacing", float(self.spacing))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def with_pixels(self, pixels: np.ndarray, spacing: float | None = None) -> "ImageGrid":
        return ImageGrid(pixels, self.spacing if spacing is None else spacing)


def _read_pgm(data: bytes, path) -> np.ndarray:
    """Parse a P2 (ascii) or P5 (binary) PGM payload into a float array."""
    magic = data[:2]
    stream = io.BytesIO(data[2:])

    def next_token():
        tok = b""
        while True:
            ch = stream.read(1)
            if ch == b"":
                raise ImageFormatError(f"{path}: truncated PGM header")
            if ch == b"#":
                stream.readline()
                continue
            if ch.isspace():
                if tok:
                    return tok
                continue
            tok += ch

    try:
        width = int(next_token())
        height = int(next_token())
        maxval = int(next_token())
    except ValueError as exc:
        raise ImageFormatError(f"{path}: bad PGM header field") from exc
    if width < 1 or height < 1 or not (0 < maxval < 65536):
        raise ImageFormatError(f"{path}: bad PGM dimensions/maxval")

    n = width * height
    if magic == b"P5":
        raw = stream.read()
        if maxval < 256:
            samples = np.frombuffer(raw, dtype=np.uint8, count=-1)
        else:
            samples = np.frombuffer(raw, dtype=">u2", count=-1)
        if samples.size < n:
            raise ImageFormatError(f"{path}: PGM pixel data truncated")
        samples = samples[:n]
    else:  # P2
        try:
            samples = np.array(stream.read().split()[:n], dtype=np.int64)
        except ValueError as exc:
            raise ImageFormatError(f"{path}: non-numeric PGM sample") from exc
        if samples.size < n:
            raise ImageFormatError(f"{path}: PGM pixel data truncated")
    return samples.astype(np.float64).reshape(height, width)


def _read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in _GRAY_MODES:
                raise ImageFormatError(
                    f"{path}: expected single-channel image, got mode {im.mode!r}"
                )
            arr = np.asarray(im)
    except ImageFormatError:
        raise
    except Exception as exc:
        raise ImageFormatError(f"{path}: cannot decode PNG ({exc})") from exc
    if arr.ndim != 2:
        raise ImageFormatError(f"{path}: expected single-channel image")
    return arr.astype(np.float64)


def load_image(path, spacing: float) -> ImageGrid:
    """Load an 8/16-bit single-channel PGM or PNG; sample values pass through
    unchanged in magnitude and the given physical spacing is attached."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ImageFormatError(f"{path}: unreadable file ({exc})") from exc
    if data[:2] in (b"P2", b"P5"):
        pixels = _read_pgm(data, path)
    elif data[:8] == b"\x89PNG\r\n\x1a\n":
        pixels = _read_png(path)
    else:
        raise ImageFormatError(f"{path}: not a PGM or PNG file")
    return ImageGrid(pixels, spacing)


def write_pgm(path, samples: np.ndarray, maxval: int = 65535) -> None:
    """Write integer samples as a binary (P5) PGM."""
    samples = np.asarray(samples)
    if samples.ndim != 2:
        raise ValueError("samples must be 2-D")
    if samples.min() < 0 or samples.max() > maxval:
        raise ValueError("samples out of range for maxval")
    h, w = samples.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    dtype = np.uint8 if maxval < 256 else ">u2"
    Path(path).write_bytes(header + samples.astype(dtype).tobytes())


def dump_pgm(img: ImageGrid, path) -> None:
    """Write a debug dump of an image, min-max rescaled to 16 bits."""
    px = img.pixels
    lo, hi = float(px.min()), float(px.max())
    scale = 65535.0 / (hi - lo) if hi > lo else 0.0
    write_pgm(path, np.round((px - lo) * scale).astype(np.uint16))


def truncate_percentiles(img: ImageGrid, lo_pct: float, hi_pct: float) -> ImageGrid:
    """Clamp intensities to the [lo_pct, hi_pct] empirical quantile band.

    Quantiles use linear interpolation over all pixels. Raises
    :class:`FlatImageError` when the band collapses to a single value.
    """
    if not (0 <= lo_pct < hi_pct <= 100):
        raise ValueError(f"need 0 <= lo < hi <= 100, got ({lo_pct}, {hi_pct})")
    p_lo, p_hi = np.percentile(img.pixels, [lo_pct, hi_pct])
    if p_lo == p_hi:
        raise FlatImageError(
            f"percentile band [{lo_pct}, {hi_pct}] is degenerate (image flat?)"
        )
    return img.with_pixels(np.clip(img.pixels, p_lo, p_hi))


def global_contrast_normalize(img: ImageGrid) -> ImageGrid:
    """Standardize to per-image mean 0 and population std 1."""
    mean = float(img.pixels.mean())
    std = float(img.pixels.std())
    if std == 0.0:
        raise FlatImageError("cannot contrast-normalize a constant image")
    return img.with_pixels((img.pixels - mean) / std)


def sample_bilinear(pixels: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinearly interpolate `pixels` at (x, y) positions, clamping
    out-of-bounds samples to the nearest edge pixel."""
    h, w = pixels.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    top = pixels[y0, x0] * (1.0 - fx) + pixels[y0, x1] * fx
    bot = pixels[y1, x0] * (1.0 - fx) + pixels[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def resize_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a raster to (out_h, out_w) with pixel-center-aligned bilinear
    interpolation."""
    h, w = pixels.shape
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    return sample_bilinear(pixels, xs[None, :], ys[:, None])


def resample(img: ImageGrid, target_spacing: float) -> ImageGrid:
    """Resample to a new isotropic spacing.

    Output dims are round(dim * spacing / target), at least 1. Pixel centers
    are mapped by their physical position and interpolated bilinearly.
    """
    if target_spacing <= 0:
        raise ValueError(f"target_spacing must be > 0, got {target_spacing}")
    if target_spacing == img.spacing:
        return img
    ratio = img.spacing / target_spacing
    out_h = max(1, int(round(img.height * ratio)))
    out_w = max(1, int(round(img.width * ratio)))
    # physical center of output pixel j sits at (j + 0.5) * target mm
    xs = (np.arange(out_w) + 0.5) / ratio - 0.5
    ys = (np.arange(out_h) + 0.5) / ratio - 0.5
    out = sample_bilinear(img.pixels, xs[None, :], ys[:, None])
    return ImageGrid(out, target_spacing)


def hflip(img: ImageGrid) -> ImageGrid:
    """Mirror columns: x -> width - 1 - x."""
    return img.with_pixels(img.pixels[:, ::-1])


def preprocess(
    img: ImageGrid,
    side: str,
    target_spacing: float = DEFAULT_SPACING_MM,
    order: str = "truncate-first",
) -> ImageGrid:
    """Full preprocessing chain for one knee image.

    Default order: percentile truncation (5/99), contrast normalization,
    resampling to `target_spacing`, then a horizontal flip iff the knee is a
    right knee. `order="normalize-first"` swaps the first two steps.
    """
    if side not in ("left", "right"):
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    if order == "truncate-first":
        out = truncate_percentiles(img, TRUNCATE_LO_PCT, TRUNCATE_HI_PCT)
        out = global_contrast_normalize(out)
    elif order == "normalize-first":
        out = global_contrast_normalize(img)
        out = truncate_percentiles(out, TRUNCATE_LO_PCT, TRUNCATE_HI_PCT)
    else:
        raise ValueError(f"unknown preprocess order {order!r}")
    out = resample(out, target_spacing)
    if side == "right":
        out = hflip(out)
    return out
