"""Deterministic synthetic knee cohort generator.

Each knee gets an ellipse-shaped "patella" on a smooth background plus a
landmark file and a manifest row. Positive knees receive extra fine-grain
noise concentrated near the superior margin of the ellipse (amplitude
`texture_effect`), and their clinical covariates are shifted by
`clinical_effect`, so texture models, clinical models, and their stacking
can all be exercised without real radiographs.
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import resize_bilinear, write_pgm

MANIFEST_NAME = "manifest.csv"

_HEADER = "knee_id,subject_id,side,image_path,landmark_path,age,sex,bmi,womac,kl,label"


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 100
    knees_per_subject: int = 2
    prevalence: float = 0.173
    texture_effect: float = 1.0
    clinical_effect: float = 1.0
    image_size: int = 300
    spacing: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 10:
            raise ValueError("n_subjects must be >= 10")
        if self.knees_per_subject not in (1, 2):
            raise ValueError("knees_per_subject must be 1 or 2")
        if not (0.0 < self.prevalence < 1.0):
            raise ValueError("prevalence must be in (0, 1)")
        if self.texture_effect < 0 or self.clinical_effect < 0:
            raise ValueError("effect sizes must be >= 0")
        if self.image_size < 64:
            raise ValueError("image_size must be >= 64")
        if self.spacing <= 0:
            raise ValueError("spacing must be > 0")

    @property
    def n_knees(self) -> int:
        return self.n_subjects * self.knees_per_subject


def cohort_labels(cfg: SynthConfig) -> np.ndarray:
    """Knee-level labels hitting round(prevalence * n) positives exactly,
    permuted by the seeded label stream."""
    n = cfg.n_knees
    n_pos = int(round(cfg.prevalence * n))
    labels = np.zeros(n, dtype=np.int64)
    labels[:n_pos] = 1
    rng = np.random.default_rng(_streams(cfg)[0])
    return labels[rng.permutation(n)]


def _streams(cfg: SynthConfig):
    """(label_stream, clinical_stream, per-knee image streams)."""
    children = np.random.SeedSequence(cfg.seed).spawn(2 + cfg.n_knees)
    return children[0], children[1], children[2:]


def _smooth_noise(rng, size: int, grain: int, sigma: float) -> np.ndarray:
    """Band-limited low-frequency field: coarse white noise upsampled."""
    coarse = rng.normal(0.0, sigma, size=(grain, grain))
    return resize_bilinear(coarse, size, size)


def _ellipse_geometry(rng, size: int):
    """Random patella ellipse: center, semi-axes (a horizontal, b vertical),
    rotation angle (radians, small)."""
    center = size / 2.0 + rng.uniform(-0.03, 0.03, size=2) * size
    a = size * rng.uniform(0.15, 0.19)
    b = size * rng.uniform(0.24, 0.30)
    phi = math.radians(rng.uniform(-10.0, 10.0))
    return center, a, b, phi


def _ellipse_point(center, a, b, phi, t):
    x = a * np.cos(t)
    y = b * np.sin(t)
    return np.column_stack([
        center[0] + x * math.cos(phi) - y * math.sin(phi),
        center[1] + x * math.sin(phi) + y * math.cos(phi),
    ])


def _marginal_points(center, a, b, phi):
    """Topmost and bottommost points of the rotated ellipse (y axis down, so
    the superior point has the smaller y)."""
    t0 = math.atan2(b * math.cos(phi), a * math.sin(phi))
    cands = _ellipse_point(center, a, b, phi, np.array([t0, t0 + math.pi]))
    if cands[0, 1] <= cands[1, 1]:
        return cands[0], cands[1]
    return cands[1], cands[0]


def _render_knee(rng, cfg: SynthConfig, label: int):
    """One knee image (uint16 samples) and its landmark points."""
    size = cfg.image_size
    center, a, b, phi = _ellipse_geometry(rng, size)

    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    dx = xs - center[0]
    dy = ys - center[1]
    u = dx * math.cos(phi) + dy * math.sin(phi)
    v = -dx * math.sin(phi) + dy * math.cos(phi)
    inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0

    img = 600.0 + _smooth_noise(rng, size, size // 16, 60.0)
    bone = 2500.0 + _smooth_noise(rng, size, size // 8, 350.0)
    img = np.where(inside, img + bone, img)

    # class signal: fine-grain noise weighted toward the superior margin
    superior, inferior = _marginal_points(center, a, b, phi)
    grain = rng.normal(0.0, 1.0, size=(size, size))
    d2 = (xs - superior[0]) ** 2 + (ys - superior[1]) ** 2
    weight = np.exp(-d2 / (2.0 * (0.45 * b) ** 2))
    if label == 1:
        img += cfg.texture_effect * 220.0 * grain * weight * inside

    samples = np.clip(np.round(img), 0, 65535).astype(np.uint16)

    # 21 contour points, offset so none coincides with a marginal point
    t = 2.0 * math.pi * (np.arange(21) + 0.37) / 21.0
    contour = _ellipse_point(center, a, b, phi, t)
    return samples, contour, np.vstack([superior, inferior])


def _clinical_row(rng, effect: float, label: int):
    e = effect * label
    age = float(np.clip(rng.normal(62.0 + 2.5 * e, 8.0), 30.0, 95.0))
    sex = int(rng.integers(0, 2))
    bmi = float(np.clip(rng.normal(28.0 + 1.0 * e, 4.0), 16.0, 55.0))
    womac = float(np.clip(rng.normal(18.0 + 14.0 * e, 12.0), 0.0, 96.0))
    kl = int(np.clip(round(rng.normal(1.1 + 1.1 * e, 0.9)), 0, 4))
    return age, sex, bmi, womac, kl


def generate_cohort(cfg: SynthConfig, out_dir) -> Path:
    """Write images, landmark files, and the manifest; returns the manifest
    path. Fully deterministic for a fixed config."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "landmarks").mkdir(parents=True, exist_ok=True)

    labels = cohort_labels(cfg)
    label_stream, clinical_stream, knee_streams = _streams(cfg)
    clinical_rng = np.random.default_rng(clinical_stream)

    sides = ("L",) if cfg.knees_per_subject == 1 else ("L", "R")
    rows = [_HEADER]
    knee_idx = 0
    for subj in range(cfg.n_subjects):
        subject_id = f"S{subj:04d}"
        for side in sides:
            knee_id = f"{subject_id}-{side}"
            label = int(labels[knee_idx])
            rng = np.random.default_rng(knee_streams[knee_idx])
            samples, contour, marginal = _render_knee(rng, cfg, label)

            image_rel = f"images/{knee_id}.pgm"
            lm_rel = f"landmarks/{knee_id}.txt"
            write_pgm(out_dir / image_rel, samples)
            lines = [f"# landmarks for {knee_id} (21 contour + 2 marginal)"]
            for x, y in np.vstack([contour, marginal]):
                lines.append(f"{x:.4f} {y:.4f}")
            (out_dir / lm_rel).write_text("\n".join(lines) + "\n")

            age, sex, bmi, womac, kl = _clinical_row(
                clinical_rng, cfg.clinical_effect, label
            )
            rows.append(
                f"{knee_id},{subject_id},{side},{image_rel},{lm_rel},"
                f"{age:.2f},{sex},{bmi:.2f},{womac:.2f},{kl},{label}"
            )
            knee_idx += 1

    manifest = out_dir / MANIFEST_NAME
    manifest.write_text("\n".join(rows) + "\n")
    return manifest
