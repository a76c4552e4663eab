"""Deterministic synthetic cohort generator.

Produces an on-disk dataset (manifest + EHR tables + paired PLAX/A4C phantom
clips) with per-modality, class-conditional signal knobs so tests can place
discriminative signal in any combination of modalities. Generation is a pure
function of the CohortSpec: identical specs yield byte-identical files.

The phantom clip is a pulsating bright ring (myocardial wall) around a dark
chamber; the wall-thickness parameter is the visual cue a small CNN can
learn. PLAX renders a single elongated chamber, A4C a four-quadrant layout.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dataio import (
    EchoClip,
    LabObservation,
    METRIC_NAMES,
    PatientRecord,
    write_clip,
    write_ehr_tables,
    write_manifest,
)
from .errors import ValidationError

BNP_CODE = "30934-4"

# Base wall thickness in normalized units ([-1, 1] image coordinates) and the
# log-scale sensitivity of thickness to the per-patient latent.
_WALL_BASE = 0.16
_WALL_LOG_SCALE = 0.25
_WALL_MAX = 0.60

_RING_BRIGHTNESS = 0.85
_BACKGROUND = 0.04
_NOISE_AMPLITUDE = 0.12


@dataclass(frozen=True)
class CohortSpec:
    """Knobs controlling one synthetic cohort."""

    n_patients: int
    prevalence: float
    seed: int
    n_lab_codes: int = 20
    lab_missingness: float = 0.2
    signal_ehr: float = 0.0
    signal_plax: float = 0.0
    signal_a4c: float = 0.0
    frames_per_clip: int = 30
    frame_size: int = 32
    channels: int = 1

    def validate(self) -> None:
        if not isinstance(self.n_patients, int) or self.n_patients < 2:
            raise ValidationError(f"n_patients must be an integer >= 2, got {self.n_patients!r}")
        if not 0.0 <= self.prevalence <= 1.0:
            raise ValidationError(f"prevalence must be in [0, 1], got {self.prevalence!r}")
        if not isinstance(self.seed, int) or self.seed < 0 or self.seed >= 2**64:
            raise ValidationError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        if not isinstance(self.n_lab_codes, int) or self.n_lab_codes < 1:
            raise ValidationError(f"n_lab_codes must be an integer >= 1, got {self.n_lab_codes!r}")
        if not 0.0 <= self.lab_missingness < 1.0:
            raise ValidationError(
                f"lab_missingness must be in [0, 1), got {self.lab_missingness!r}"
            )
        for name in ("signal_ehr", "signal_plax", "signal_a4c"):
            value = getattr(self, name)
            if value < 0 or not np.isfinite(value):
                raise ValidationError(f"{name} must be a non-negative float, got {value!r}")
        if not isinstance(self.frames_per_clip, int) or self.frames_per_clip < 30:
            raise ValidationError(
                f"frames_per_clip must be an integer >= 30, got {self.frames_per_clip!r}"
            )
        if not isinstance(self.frame_size, int) or self.frame_size < 16:
            raise ValidationError(f"frame_size must be an integer >= 16, got {self.frame_size!r}")
        if self.channels != 1:
            raise ValidationError(f"channels must be 1, got {self.channels!r}")

    @property
    def n_positive(self) -> int:
        """Positive count: round(n * prevalence), half away from zero.

        When prevalence lies strictly inside (0, 1) the count is clamped to
        [1, n-1] so the cohort always contains both classes.
        """
        n_pos = int(np.floor(self.n_patients * self.prevalence + 0.5))
        if 0.0 < self.prevalence < 1.0:
            n_pos = min(max(n_pos, 1), self.n_patients - 1)
        return n_pos


def _edge(u: np.ndarray, width: float) -> np.ndarray:
    """Linear 0->1 ramp of the given width centred on u = 0."""
    return np.clip(u / width + 0.5, 0.0, 1.0)


def _ring(r: np.ndarray, inner: np.ndarray, thickness: np.ndarray, width: float) -> np.ndarray:
    """Soft annulus spanning radii [inner, inner + thickness].

    Pointwise nondecreasing in ``thickness``: only the outer edge moves with
    it, so thicker walls can never darken a pixel. The bright-pixel-count
    monotonicity contract rests on this.
    """
    return _edge(r - inner, width) * _edge(inner + thickness - r, width)


def render_echo_clip(
    view: str,
    wall_param: float,
    rng: np.random.Generator,
    *,
    frames_per_clip: int = 30,
    frame_size: int = 32,
    patient_id: str = "phantom",
) -> EchoClip:
    """Render one phantom clip for a view, driven by an explicit RNG state.

    Identical (view, wall_param, rng state) inputs produce identical tensors.
    """
    if view not in ("PLAX", "A4C"):
        raise ValidationError(f"unknown view tag {view!r}; expected PLAX or A4C")
    if not np.isfinite(wall_param) or wall_param <= 0:
        raise ValidationError(f"wall_param must be > 0, got {wall_param!r}")

    t = np.arange(frames_per_clip)
    # Random draws happen in a fixed order, none depending on wall_param, so
    # the same rng state gives the same phase/period/noise at any thickness.
    phase = rng.uniform(0.0, 2.0 * np.pi)
    period = rng.uniform(18.0, 26.0)
    noise = rng.uniform(0.0, _NOISE_AMPLITUDE, size=(frames_per_clip, frame_size, frame_size))

    coords = np.linspace(-1.0, 1.0, frame_size)
    xx, yy = np.meshgrid(coords, coords, indexing="xy")
    edge_width = 3.0 / frame_size

    # One oscillator drives the beat: the wall thickens while the chamber
    # contracts, one full cycle roughly every `period` frames.
    osc = 0.5 * (1.0 + np.sin(2.0 * np.pi * t / period + phase))  # in [0, 1]
    thickness = wall_param * (0.75 + 0.5 * osc)

    rings = np.zeros((frames_per_clip, frame_size, frame_size))
    if view == "PLAX":
        # Single elongated chamber.
        r = np.sqrt((xx / 1.00) ** 2 + (yy / 0.72) ** 2)
        inner = 0.50 * (1.0 - 0.12 * osc)
        rings += _ring(r[None], inner[:, None, None], thickness[:, None, None], edge_width)
    else:
        # Four-quadrant layout: two larger chambers above, two smaller below.
        chambers = (
            (-0.42, -0.40, 0.335),
            (0.42, -0.40, 0.335),
            (-0.40, 0.46, 0.26),
            (0.40, 0.46, 0.26),
        )
        for cx, cy, radius in chambers:
            r = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
            inner = radius * (1.0 - 0.12 * osc)
            rings += _ring(r[None], inner[:, None, None], thickness[:, None, None], edge_width)

    frames = np.clip(_BACKGROUND + noise + _RING_BRIGHTNESS * np.clip(rings, 0.0, 1.0), 0.0, 1.0)
    frames = frames.astype(np.float32)[..., None]
    return EchoClip(patient_id=patient_id, view=view, frames=frames)


def _lab_codes(n_codes: int) -> list[str]:
    codes = [BNP_CODE]
    codes += [f"{90000 + i}-{i % 10}" for i in range(1, n_codes)]
    return codes


def _wall_param(latent: float) -> float:
    return float(min(_WALL_BASE * np.exp(_WALL_LOG_SCALE * latent), _WALL_MAX))


def _generate_patient(
    pid: str,
    label: int,
    spec: CohortSpec,
    codes: list[str],
    code_means: np.ndarray,
    code_sds: np.ndarray,
    rng: np.random.Generator,
) -> tuple[PatientRecord, float, float]:
    """Draw one patient's EHR values and the two phantom wall parameters."""
    latent_plax = spec.signal_plax * label + rng.normal()
    latent_a4c = spec.signal_a4c * label + rng.normal()

    age = float(np.clip(rng.normal(66.1, 12.0), 30.0, 95.0))
    sex = "M" if rng.uniform() < 0.659 else "F"
    race = "White" if rng.uniform() < 0.512 else "Black or African American"
    sbp = float(np.clip(rng.normal(121.6, 23.9), 80.0, 220.0))
    dbp = float(np.clip(rng.normal(72.5, 15.4), 40.0, 130.0))
    weight = float(np.clip(rng.normal(88.9, 19.8), 40.0, 160.0))
    height = float(np.clip(rng.normal(1.76, 0.10), 1.45, 2.05))

    # Echo-derived measurements: wall thickness tracks the imaging latents
    # (so imaging signal knobs surface in the metrics table too); the rest
    # carry no class signal.
    ef = float(np.clip(rng.normal(58.0, 8.0), 20.0, 78.0))
    vol_d = float(np.clip(rng.normal(120.0, 25.0), 50.0, 250.0))
    metrics = {
        "wall_thickness": float(10.5 + 1.9 * 0.5 * (latent_plax + latent_a4c) + 0.5 * rng.normal()),
        "chamber_diameter": float(np.clip(rng.normal(48.0, 6.0), 25.0, 75.0)),
        "chamber_volume_diastolic": vol_d,
        "chamber_volume_systolic": float(vol_d * (1.0 - ef / 100.0)),
        "stroke_volume": float(vol_d * ef / 100.0),
        "ejection_fraction": ef,
        "fractional_shortening": float(np.clip(ef / 1.7 + rng.normal(0.0, 2.0), 10.0, 55.0)),
        "sphericity_index": float(np.clip(rng.normal(1.55, 0.20), 0.9, 2.4)),
    }

    labs: list[LabObservation] = []
    for j, code in enumerate(codes):
        if rng.uniform() < spec.lab_missingness:
            continue
        shift = spec.signal_ehr if code == BNP_CODE else 0.0
        true_value = code_means[j] + code_sds[j] * (shift * label + rng.normal())
        n_obs = int(rng.integers(1, 4))
        days = rng.integers(-90, 31, size=n_obs)
        values = true_value + 0.1 * code_sds[j] * rng.normal(size=n_obs)
        for day, value in zip(days, values):
            labs.append(LabObservation(code=code, value=float(value), days_from_echo=int(day)))
        if rng.uniform() < 0.3:
            # An extra observation outside the selection window, to exercise
            # window filtering downstream.
            day = int(rng.integers(-200, -91)) if rng.uniform() < 0.5 else int(rng.integers(31, 61))
            value = float(true_value + 0.1 * code_sds[j] * rng.normal())
            labs.append(LabObservation(code=code, value=value, days_from_echo=day))

    record = PatientRecord(
        patient_id=pid,
        label=label,
        age=age,
        sex=sex,
        race=race,
        sbp=sbp,
        dbp=dbp,
        weight_kg=weight,
        height_m=height,
        bmi=weight / height**2,
        cardiac_metrics=metrics,
        labs=labs,
    )
    return record, _wall_param(latent_plax), _wall_param(latent_a4c)


def generate_cohort(spec: CohortSpec, out_dir: str | Path) -> Path:
    """Generate a cohort dataset under ``out_dir`` and return the manifest path.

    Layout: manifest.csv, demographics.csv, metrics.csv, labs.csv,
    cohort_spec.json and clips/<pid>_<view>.ecv. Existing files are
    overwritten, so reruns with the same spec leave byte-identical output.
    """
    spec.validate()
    out_dir = Path(out_dir)
    clips_dir = out_dir / "clips"
    clips_dir.mkdir(parents=True, exist_ok=True)

    root_ss = np.random.SeedSequence(spec.seed)
    labels_ss, codes_ss, patients_ss = root_ss.spawn(3)

    labels = np.zeros(spec.n_patients, dtype=int)
    order = np.random.Generator(np.random.PCG64(labels_ss)).permutation(spec.n_patients)
    labels[order[: spec.n_positive]] = 1

    codes = _lab_codes(spec.n_lab_codes)
    codes_rng = np.random.Generator(np.random.PCG64(codes_ss))
    code_means = codes_rng.uniform(5.0, 150.0, size=spec.n_lab_codes)
    code_sds = code_means * codes_rng.uniform(0.08, 0.25, size=spec.n_lab_codes)

    records: list[PatientRecord] = []
    manifest_rows: list[tuple[str, int, str, str]] = []
    for i, patient_ss in enumerate(patients_ss.spawn(spec.n_patients)):
        pid = f"P{i:04d}"
        ehr_ss, plax_ss, a4c_ss = patient_ss.spawn(3)
        record, wall_plax, wall_a4c = _generate_patient(
            pid, int(labels[i]), spec, codes, code_means, code_sds,
            np.random.Generator(np.random.PCG64(ehr_ss)),
        )
        records.append(record)

        rel_paths = []
        for view, wall, view_ss in (("PLAX", wall_plax, plax_ss), ("A4C", wall_a4c, a4c_ss)):
            clip = render_echo_clip(
                view,
                wall,
                np.random.Generator(np.random.PCG64(view_ss)),
                frames_per_clip=spec.frames_per_clip,
                frame_size=spec.frame_size,
                patient_id=pid,
            )
            rel = f"clips/{pid}_{view.lower()}.ecv"
            write_clip(clip, out_dir / rel)
            rel_paths.append(rel)
        manifest_rows.append((pid, int(labels[i]), rel_paths[0], rel_paths[1]))

    write_ehr_tables(records, out_dir)
    manifest_path = out_dir / "manifest.csv"
    write_manifest(manifest_rows, manifest_path)
    with open(out_dir / "cohort_spec.json", "w") as fh:
        json.dump(asdict(spec), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path
