"""On-disk dataset contract: ECV1 clip files, EHR CSV tables, cohort manifest.

The clip format ("ECV1") is 4 ASCII magic bytes, four little-endian uint32
dimensions T,H,W,C, then T*H*W*C little-endian float32 values in
(t, row, col, channel) order. Floats round-trip bit-exactly.

EHR data is split over three fixed-header CSV files (demographics.csv,
metrics.csv, labs.csv) next to a manifest.csv that pairs every patient with
one PLAX and one A4C clip file.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DatasetError,
    PayloadSizeError,
    TruncatedClipError,
    ValidationError,
)

logger = logging.getLogger(__name__)

ECV1_MAGIC = b"ECV1"
MIN_FRAMES = 30
MIN_FRAME_EDGE = 16

VIEWS = ("PLAX", "A4C")

METRIC_NAMES = (
    "wall_thickness",
    "chamber_diameter",
    "chamber_volume_diastolic",
    "chamber_volume_systolic",
    "stroke_volume",
    "ejection_fraction",
    "fractional_shortening",
    "sphericity_index",
)

DEMOGRAPHICS_HEADER = (
    "patient_id",
    "label",
    "age",
    "sex",
    "race",
    "sbp",
    "dbp",
    "weight_kg",
    "height_m",
    "bmi",
)
METRICS_HEADER = ("patient_id",) + METRIC_NAMES
LABS_HEADER = ("patient_id", "code", "value", "days_from_echo")
MANIFEST_HEADER = ("patient_id", "label", "plax_path", "a4c_path")


@dataclass(frozen=True)
class LabObservation:
    """One timed laboratory observation for a patient."""

    code: str
    value: float
    days_from_echo: int

    def validate(self) -> None:
        if not self.code:
            raise ValidationError("lab observation has an empty code")
        if not np.isfinite(self.value):
            raise ValidationError(f"lab {self.code!r} has non-finite value {self.value!r}")


@dataclass
class PatientRecord:
    """One patient's label, demographics/vitals, cardiac metrics and labs."""

    patient_id: str
    label: int
    age: float
    sex: str
    race: str
    sbp: float
    dbp: float
    weight_kg: float
    height_m: float
    bmi: float
    cardiac_metrics: dict[str, float]
    labs: list[LabObservation] = field(default_factory=list)

    def validate(self) -> None:
        if self.label not in (0, 1):
            raise ValidationError(
                f"patient {self.patient_id!r}: label must be 0 or 1, got {self.label!r}"
            )
        vitals = (self.age, self.sbp, self.dbp, self.weight_kg, self.height_m, self.bmi)
        if not all(np.isfinite(v) for v in vitals):
            raise ValidationError(f"patient {self.patient_id!r}: non-finite vital sign")
        expected_bmi = self.weight_kg / self.height_m**2
        if abs(self.bmi - expected_bmi) > 1e-6 * max(abs(expected_bmi), 1.0):
            raise ValidationError(
                f"patient {self.patient_id!r}: bmi {self.bmi} is not weight/height^2 "
                f"({expected_bmi})"
            )
        missing = [m for m in METRIC_NAMES if m not in self.cardiac_metrics]
        if missing:
            raise ValidationError(
                f"patient {self.patient_id!r}: missing cardiac metrics {missing}"
            )
        for obs in self.labs:
            obs.validate()


@dataclass
class EchoClip:
    """One view-tagged echo video: frames shaped [T, H, W, C], float32 in [0, 1]."""

    patient_id: str
    view: str
    frames: np.ndarray

    def validate(self) -> None:
        if self.view not in VIEWS:
            raise ValidationError(f"unknown view tag {self.view!r}; expected one of {VIEWS}")
        f = self.frames
        if f.ndim != 4:
            raise ValidationError(f"clip frames must be 4-D [T,H,W,C], got shape {f.shape}")
        t, h, w, c = f.shape
        if t < MIN_FRAMES:
            raise ValidationError(
                f"clip has {t} frames; at least {MIN_FRAMES} frames are required "
                "to cover a full cardiac cycle"
            )
        if h < MIN_FRAME_EDGE or w < MIN_FRAME_EDGE:
            raise ValidationError(f"frame size {h}x{w} below minimum {MIN_FRAME_EDGE}")
        if c != 1:
            raise ValidationError(f"clips are single-channel, got C={c}")
        if f.dtype != np.float32:
            raise ValidationError(f"clip frames must be float32, got {f.dtype}")
        if not np.all(np.isfinite(f)):
            raise ValidationError("clip contains non-finite pixel values")
        lo, hi = float(f.min()), float(f.max())
        if lo < 0.0 or hi > 1.0:
            raise ValidationError(f"pixel values outside [0,1]: min={lo}, max={hi}")


def write_clip(clip: EchoClip, path: str | Path) -> None:
    """Write a validated clip to an ECV1 file."""
    clip.validate()
    t, h, w, c = clip.frames.shape
    payload = np.ascontiguousarray(clip.frames, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(ECV1_MAGIC)
        fh.write(struct.pack("<4I", t, h, w, c))
        fh.write(payload)


def read_clip(path: str | Path, patient_id: str = "", view: str = "PLAX") -> EchoClip:
    """Read and validate an ECV1 file.

    The file stores only pixel data; ``patient_id`` and ``view`` identify the
    clip in its dataset context (normally supplied by the manifest loader).
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != ECV1_MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}, expected {ECV1_MAGIC!r}")
    if len(data) < 20:
        raise TruncatedClipError(f"{path}: file ends inside the 20-byte header")
    t, h, w, c = struct.unpack("<4I", data[4:20])
    expected = 20 + 4 * t * h * w * c
    if len(data) < expected:
        raise TruncatedClipError(
            f"{path}: payload truncated, expected {expected} bytes, got {len(data)}"
        )
    if len(data) > expected:
        raise PayloadSizeError(
            f"{path}: {len(data) - expected} trailing bytes beyond the declared "
            f"{t}x{h}x{w}x{c} payload"
        )
    frames = np.frombuffer(data[20:], dtype="<f4").reshape(t, h, w, c)
    clip = EchoClip(patient_id=patient_id, view=view, frames=frames.astype(np.float32))
    clip.validate()
    return clip


def _fmt(value) -> str:
    """Render a cell deterministically; floats use shortest round-trip repr."""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header: tuple[str, ...], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _read_csv(path: Path, expected_header: tuple[str, ...]) -> list[dict[str, str]]:
    if not path.exists():
        raise DatasetError(f"missing table {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = tuple(next(reader))
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        if header != expected_header:
            raise DatasetError(
                f"{path}: header {header} does not match expected {expected_header}"
            )
        return [dict(zip(expected_header, row)) for row in reader]


def write_ehr_tables(records: list[PatientRecord], directory: str | Path) -> None:
    """Write demographics.csv, metrics.csv and labs.csv for a cohort."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    _write_csv(
        directory / "demographics.csv",
        DEMOGRAPHICS_HEADER,
        (
            (r.patient_id, r.label, r.age, r.sex, r.race, r.sbp, r.dbp,
             r.weight_kg, r.height_m, r.bmi)
            for r in records
        ),
    )
    _write_csv(
        directory / "metrics.csv",
        METRICS_HEADER,
        ((r.patient_id, *[r.cardiac_metrics[m] for m in METRIC_NAMES]) for r in records),
    )
    _write_csv(
        directory / "labs.csv",
        LABS_HEADER,
        (
            (r.patient_id, o.code, o.value, o.days_from_echo)
            for r in records
            for o in r.labs
        ),
    )


def read_ehr_tables(directory: str | Path) -> list[PatientRecord]:
    """Reassemble PatientRecords from the three EHR tables."""
    directory = Path(directory)
    demo_rows = _read_csv(directory / "demographics.csv", DEMOGRAPHICS_HEADER)
    metric_rows = _read_csv(directory / "metrics.csv", METRICS_HEADER)
    lab_rows = _read_csv(directory / "labs.csv", LABS_HEADER)

    metrics_by_id: dict[str, dict[str, float]] = {}
    for row in metric_rows:
        pid = row["patient_id"]
        if pid in metrics_by_id:
            raise DatasetError(f"metrics.csv: duplicate patient_id {pid!r}")
        metrics_by_id[pid] = {m: float(row[m]) for m in METRIC_NAMES}

    labs_by_id: dict[str, list[LabObservation]] = {}
    for row in lab_rows:
        labs_by_id.setdefault(row["patient_id"], []).append(
            LabObservation(
                code=row["code"],
                value=float(row["value"]),
                days_from_echo=int(row["days_from_echo"]),
            )
        )

    records = []
    seen: set[str] = set()
    for row in demo_rows:
        pid = row["patient_id"]
        if pid in seen:
            raise DatasetError(f"demographics.csv: duplicate patient_id {pid!r}")
        seen.add(pid)
        if pid not in metrics_by_id:
            raise DatasetError(f"metrics.csv: no row for patient_id {pid!r}")
        record = PatientRecord(
            patient_id=pid,
            label=int(row["label"]),
            age=float(row["age"]),
            sex=row["sex"],
            race=row["race"],
            sbp=float(row["sbp"]),
            dbp=float(row["dbp"]),
            weight_kg=float(row["weight_kg"]),
            height_m=float(row["height_m"]),
            bmi=float(row["bmi"]),
            cardiac_metrics=metrics_by_id[pid],
            labs=labs_by_id.get(pid, []),
        )
        record.validate()
        records.append(record)
    return records


def write_manifest(rows: list[tuple[str, int, str, str]], path: str | Path) -> None:
    """Write the cohort manifest: (patient_id, label, plax_path, a4c_path) rows."""
    _write_csv(Path(path), MANIFEST_HEADER, rows)


def read_manifest(path: str | Path) -> list[dict[str, str]]:
    rows = _read_csv(Path(path), MANIFEST_HEADER)
    seen: set[str] = set()
    for i, row in enumerate(rows):
        pid = row["patient_id"]
        if pid in seen:
            raise DatasetError(f"manifest row {i}: duplicate patient_id {pid!r}")
        seen.add(pid)
        if row["label"] not in ("0", "1"):
            raise DatasetError(f"manifest row {i}: label must be 0 or 1, got {row['label']!r}")
    return rows


def load_dataset(
    manifest_path: str | Path,
) -> tuple[list[PatientRecord], dict[str, dict[str, EchoClip]]]:
    """Load a full cohort: EHR records plus both echo views per patient.

    Every manifest row must resolve to one demographics/metrics entry and two
    readable clip files; any inconsistency raises a DatasetError naming the
    offending row, id or path. Nothing is silently dropped.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DatasetError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    rows = read_manifest(manifest_path)
    records = read_ehr_tables(root)
    records_by_id = {r.patient_id: r for r in records}

    ordered: list[PatientRecord] = []
    clips: dict[str, dict[str, EchoClip]] = {}
    for i, row in enumerate(rows):
        pid = row["patient_id"]
        record = records_by_id.get(pid)
        if record is None:
            raise DatasetError(f"manifest row {i}: patient_id {pid!r} has no EHR tables entry")
        if record.label != int(row["label"]):
            raise DatasetError(
                f"manifest row {i}: label {row['label']} disagrees with demographics.csv "
                f"({record.label}) for patient {pid!r}"
            )
        per_view: dict[str, EchoClip] = {}
        for view, key in (("PLAX", "plax_path"), ("A4C", "a4c_path")):
            clip_path = root / row[key]
            if not clip_path.exists():
                raise DatasetError(f"manifest row {i}: clip file not found: {clip_path}")
            per_view[view] = read_clip(clip_path, patient_id=pid, view=view)
        clips[pid] = per_view
        ordered.append(record)

    logger.info(
        "loaded dataset %s: %d patients, %d clips", manifest_path, len(ordered), 2 * len(ordered)
    )
    return ordered, clips
