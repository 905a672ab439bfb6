"""Dataset manifest ingestion and the shared per-knee record types.

A dataset is described by a single CSV manifest with header
``knee_id,subject_id,side,image_path,landmark_path,age,sex,bmi,womac,kl,label``
where paths are relative to the manifest's directory. Parsing is strict
(malformed rows are errors); range checks on clinical values and file
readability are reported by :func:`validate_dataset` instead.
"""

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ManifestError

MANIFEST_COLUMNS = (
    "knee_id", "subject_id", "side", "image_path", "landmark_path",
    "age", "sex", "bmi", "womac", "kl", "label",
)
CLINICAL_COLUMNS = ("age", "sex", "bmi", "womac", "kl")

_SIDE_CODES = {"L": "left", "R": "right"}


@dataclass(frozen=True)
class ClinicalRecord:
    """Clinical covariates for one knee: age (years), sex (0=female, 1=male),
    BMI (kg/m2), total WOMAC score, and tibiofemoral KL grade (0-4)."""

    age: float
    sex: int
    bmi: float
    womac_total: float
    kl_grade: int

    def as_vector(self, columns=CLINICAL_COLUMNS) -> list[float]:
        by_name = {
            "age": self.age, "sex": float(self.sex), "bmi": self.bmi,
            "womac": self.womac_total, "kl": float(self.kl_grade),
        }
        return [by_name[c] for c in columns]


@dataclass(frozen=True)
class KneeSample:
    """One knee: identifiers, file paths, covariates, and the binary label."""

    knee_id: str
    subject_id: str
    side: str
    image_path: Path
    landmark_path: Path
    clinical: ClinicalRecord
    label: int


@dataclass(frozen=True)
class Dataset:
    samples: tuple[KneeSample, ...]

    def __post_init__(self):
        if not self.samples:
            raise ManifestError("dataset is empty")
        object.__setattr__(self, "samples", tuple(self.samples))

    @property
    def prevalence(self) -> float:
        """Positive fraction, recomputed from the samples."""
        return sum(s.label for s in self.samples) / len(self.samples)

    def __len__(self) -> int:
        return len(self.samples)

    def by_knee_id(self) -> dict[str, KneeSample]:
        return {s.knee_id: s for s in self.samples}


@dataclass(frozen=True)
class ValidationIssue:
    knee_id: str
    field: str
    message: str


@dataclass
class ValidationReport:
    issues: list[ValidationIssue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues


def _parse_float(row_no, name, raw):
    try:
        return float(raw)
    except ValueError:
        raise ManifestError(
            f"manifest row {row_no}, column {name!r}: not a number: {raw!r}"
        ) from None


def _parse_int(row_no, name, raw):
    try:
        return int(raw)
    except ValueError:
        raise ManifestError(
            f"manifest row {row_no}, column {name!r}: not an integer: {raw!r}"
        ) from None


def load_manifest(path) -> Dataset:
    """Load a manifest CSV into a :class:`Dataset`, preserving row order.

    Raises :class:`ManifestError` on a missing file, malformed row (reported
    with row number and column), duplicate knee_id or (subject, side) pair,
    or a label outside {0, 1}.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    base = path.parent
    samples = []
    seen_ids: set[str] = set()
    seen_subject_side: set[tuple[str, str]] = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest") from None
        if tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
            raise ManifestError(
                f"{path}: bad header, expected {','.join(MANIFEST_COLUMNS)}"
            )
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise ManifestError(
                    f"manifest row {row_no}: expected {len(MANIFEST_COLUMNS)} "
                    f"columns, got {len(row)}"
                )
            rec = dict(zip(MANIFEST_COLUMNS, (v.strip() for v in row)))
            knee_id = rec["knee_id"]
            if not knee_id:
                raise ManifestError(f"manifest row {row_no}, column 'knee_id': empty")
            if knee_id in seen_ids:
                raise ManifestError(f"duplicate knee_id {knee_id!r} (row {row_no})")
            seen_ids.add(knee_id)
            if rec["side"] not in _SIDE_CODES:
                raise ManifestError(
                    f"manifest row {row_no}, column 'side': expected L or R, "
                    f"got {rec['side']!r}"
                )
            side = _SIDE_CODES[rec["side"]]
            key = (rec["subject_id"], side)
            if key in seen_subject_side:
                raise ManifestError(
                    f"duplicate (subject_id, side) {key!r} (row {row_no})"
                )
            seen_subject_side.add(key)
            label = _parse_int(row_no, "label", rec["label"])
            if label not in (0, 1):
                raise ManifestError(
                    f"manifest row {row_no}, column 'label': must be 0 or 1, "
                    f"got {label}"
                )
            clinical = ClinicalRecord(
                age=_parse_float(row_no, "age", rec["age"]),
                sex=_parse_int(row_no, "sex", rec["sex"]),
                bmi=_parse_float(row_no, "bmi", rec["bmi"]),
                womac_total=_parse_float(row_no, "womac", rec["womac"]),
                kl_grade=_parse_int(row_no, "kl", rec["kl"]),
            )
            samples.append(KneeSample(
                knee_id=knee_id,
                subject_id=rec["subject_id"],
                side=side,
                image_path=base / rec["image_path"],
                landmark_path=base / rec["landmark_path"],
                clinical=clinical,
                label=label,
            ))
    return Dataset(tuple(samples))


def validate_dataset(ds: Dataset) -> ValidationReport:
    """Check file readability and clinical-range invariants for every sample.

    Problems are report entries, never exceptions; a clean dataset yields an
    empty issue list.
    """
    report = ValidationReport()

    def issue(sample, fld, msg):
        report.issues.append(ValidationIssue(sample.knee_id, fld, msg))

    for s in ds.samples:
        if not os.access(s.image_path, os.R_OK):
            issue(s, "image_path", f"unreadable image file: {s.image_path}")
        if not os.access(s.landmark_path, os.R_OK):
            issue(s, "landmark_path", f"unreadable landmark file: {s.landmark_path}")
        c = s.clinical
        for name, value in (("age", c.age), ("bmi", c.bmi),
                            ("womac", c.womac_total)):
            if not math.isfinite(value):
                issue(s, name, f"{name} is not finite: {value!r}")
        if math.isfinite(c.age) and c.age < 0:
            issue(s, "age", f"age must be >= 0, got {c.age}")
        if math.isfinite(c.bmi) and c.bmi <= 0:
            issue(s, "bmi", f"bmi must be > 0, got {c.bmi}")
        if math.isfinite(c.womac_total) and c.womac_total < 0:
            issue(s, "womac", f"womac must be >= 0, got {c.womac_total}")
        if c.sex not in (0, 1):
            issue(s, "sex", f"sex must be 0 or 1, got {c.sex}")
        if c.kl_grade not in (0, 1, 2, 3, 4):
            issue(s, "kl", f"kl grade must be in 0..4, got {c.kl_grade}")
    return report
