"""EHR feature engineering: windowed lab selection, mean imputation, early fusion.

The feature vector concatenates three blocks in fixed order:

  demographics/vitals (age, sex one-hot, race one-hot, sbp, dbp, weight,
  height, bmi) || 8 cardiac metrics || selected lab codes (lexicographic)

Lab codes are kept when at least ``coverage_threshold`` of the fitting
patients have an in-window observation (boundary inclusive). Each patient's
lab value is the simple mean of their in-window observations; missing values
are imputed with the mean of those per-patient means over the patients who
have the lab. Every entry is z-scored with statistics fitted on the
(imputed) fitting split.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .dataio import METRIC_NAMES, PatientRecord
from .errors import ValidationError

SCHEMA_FORMAT_VERSION = 1

COMPONENTS = ("demo_vitals", "metrics", "labs")

_NUMERIC_DEMO_TAIL = ("sbp", "dbp", "weight_kg", "height_m", "bmi")


def _in_window(obs, window: tuple[int, int]) -> bool:
    lo, hi = window
    return lo <= obs.days_from_echo <= hi


def _patient_lab_means(record: PatientRecord, window: tuple[int, int]) -> dict[str, float]:
    """Per-code simple mean of the patient's in-window observation values."""
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for obs in record.labs:
        if _in_window(obs, window):
            sums[obs.code] = sums.get(obs.code, 0.0) + obs.value
            counts[obs.code] = counts.get(obs.code, 0) + 1
    return {code: sums[code] / counts[code] for code in sums}


def select_labs(
    fit_records: list[PatientRecord],
    window: tuple[int, int] = (-90, 30),
    threshold: float = 0.1,
) -> list[str]:
    """Return lab codes whose in-window patient coverage is >= threshold.

    Coverage is the fraction of fitting patients with at least one
    observation of the code inside the window; the boundary is inclusive.
    Output order is lexicographic for a canonical feature layout.
    """
    if not fit_records:
        raise ValidationError("select_labs requires a non-empty fitting split")
    if not 0.0 < threshold <= 1.0:
        raise ValidationError(f"coverage threshold must be in (0, 1], got {threshold!r}")
    lo, hi = window
    if lo >= hi:
        raise ValidationError(f"window must satisfy lo < hi, got {window!r}")

    n = len(fit_records)
    covered: dict[str, int] = {}
    for record in fit_records:
        seen = {obs.code for obs in record.labs if _in_window(obs, window)}
        for code in seen:
            covered[code] = covered.get(code, 0) + 1
    return sorted(code for code, cnt in covered.items() if cnt / n >= threshold)


@dataclass
class FeatureSchema:
    """Fitted vectorization recipe for EHR records."""

    demo_features: list[str]
    metric_features: list[str]
    selected_lab_codes: list[str]
    imputation_means: dict[str, float]
    standardization: dict[str, tuple[float, float]]
    window_days: tuple[int, int]
    coverage_threshold: float
    sex_levels: list[str]
    race_levels: list[str]

    @property
    def feature_names(self) -> list[str]:
        return self.demo_features + self.metric_features + self.selected_lab_codes

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def block_slices(self) -> dict[str, slice]:
        """Index ranges of the three components inside the feature vector."""
        n_demo = len(self.demo_features)
        n_metrics = len(self.metric_features)
        return {
            "demo_vitals": slice(0, n_demo),
            "metrics": slice(n_demo, n_demo + n_metrics),
            "labs": slice(n_demo + n_metrics, self.n_features),
        }

    def to_json(self) -> str:
        payload = {
            "format_version": SCHEMA_FORMAT_VERSION,
            "demo_features": self.demo_features,
            "metric_features": self.metric_features,
            "selected_lab_codes": self.selected_lab_codes,
            "imputation_means": self.imputation_means,
            "standardization": {k: list(v) for k, v in self.standardization.items()},
            "window_days": list(self.window_days),
            "coverage_threshold": self.coverage_threshold,
            "sex_levels": self.sex_levels,
            "race_levels": self.race_levels,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FeatureSchema":
        payload = json.loads(text)
        version = payload.get("format_version")
        if version != SCHEMA_FORMAT_VERSION:
            raise ValidationError(f"unsupported schema format version {version!r}")
        return cls(
            demo_features=list(payload["demo_features"]),
            metric_features=list(payload["metric_features"]),
            selected_lab_codes=list(payload["selected_lab_codes"]),
            imputation_means={k: float(v) for k, v in payload["imputation_means"].items()},
            standardization={
                k: (float(v[0]), float(v[1])) for k, v in payload["standardization"].items()
            },
            window_days=tuple(payload["window_days"]),
            coverage_threshold=float(payload["coverage_threshold"]),
            sex_levels=list(payload["sex_levels"]),
            race_levels=list(payload["race_levels"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "FeatureSchema":
        return cls.from_json(Path(path).read_text())

    @property
    def schema_id(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:12]


@dataclass
class EHRFeatureVector:
    """Standardized feature values plus the lab-imputation mask."""

    values: np.ndarray
    imputed_mask: np.ndarray
    schema_id: str


def _raw_vector(
    record: PatientRecord, schema: FeatureSchema
) -> tuple[np.ndarray, np.ndarray]:
    """Pre-standardization vector and imputation mask for one record."""
    values = np.zeros(schema.n_features, dtype=np.float64)
    mask = np.zeros(schema.n_features, dtype=bool)

    i = 0
    values[i] = record.age
    i += 1
    for level in schema.sex_levels:
        values[i] = 1.0 if record.sex == level else 0.0
        i += 1
    for level in schema.race_levels:
        values[i] = 1.0 if record.race == level else 0.0
        i += 1
    for name in _NUMERIC_DEMO_TAIL:
        values[i] = getattr(record, name)
        i += 1

    for name in schema.metric_features:
        values[i] = record.cardiac_metrics[name]
        i += 1

    patient_means = _patient_lab_means(record, schema.window_days)
    for code in schema.selected_lab_codes:
        if code in patient_means:
            values[i] = patient_means[code]
        else:
            values[i] = schema.imputation_means[code]
            mask[i] = True
        i += 1
    return values, mask


def fit_schema(
    fit_records: list[PatientRecord],
    selected_codes: list[str],
    window: tuple[int, int] = (-90, 30),
    coverage_threshold: float = 0.1,
) -> FeatureSchema:
    """Fit imputation means and standardization stats on the fitting split.

    The imputation mean of a code is the mean over patients-having-the-code
    of each patient's in-window mean. Standardization statistics are computed
    per feature on the imputed fitting matrix, with the std floored at 1e-8
    so constant features stay finite after scaling.
    """
    if not fit_records:
        raise ValidationError("fit_schema requires a non-empty fitting split")
    # Canonical record order makes every float reduction independent of the
    # caller's input order, so identical fit sets give identical schemas.
    fit_records = sorted(fit_records, key=lambda r: r.patient_id)

    sex_levels = sorted({r.sex for r in fit_records})
    race_levels = sorted({r.race for r in fit_records})
    demo_features = (
        ["age"]
        + [f"sex={s}" for s in sex_levels]
        + [f"race={r}" for r in race_levels]
        + list(_NUMERIC_DEMO_TAIL)
    )

    per_patient = [_patient_lab_means(r, window) for r in fit_records]
    imputation_means: dict[str, float] = {}
    for code in selected_codes:
        pooled = [means[code] for means in per_patient if code in means]
        if not pooled:
            raise ValidationError(
                f"selected lab {code!r} has no in-window observation in the fitting split; "
                "selection and fitting must use the same records and window"
            )
        imputation_means[code] = float(np.mean(pooled))

    schema = FeatureSchema(
        demo_features=demo_features,
        metric_features=list(METRIC_NAMES),
        selected_lab_codes=sorted(selected_codes),
        imputation_means=imputation_means,
        standardization={},
        window_days=tuple(window),
        coverage_threshold=coverage_threshold,
        sex_levels=sex_levels,
        race_levels=race_levels,
    )

    matrix = np.stack([_raw_vector(r, schema)[0] for r in fit_records])
    means = matrix.mean(axis=0)
    stds = np.maximum(matrix.std(axis=0), 1e-8)
    schema.standardization = {
        name: (float(means[j]), float(stds[j])) for j, name in enumerate(schema.feature_names)
    }
    return schema


def vectorize(record: PatientRecord, schema: FeatureSchema) -> EHRFeatureVector:
    """Map one record to a standardized feature vector under a fitted schema.

    Missing selected labs are imputed (and flagged in the mask); unknown
    categorical levels one-hot to an all-zero block before standardization.
    """
    if not schema.standardization:
        raise ValidationError("schema has no standardization stats; call fit_schema first")
    values, mask = _raw_vector(record, schema)
    for j, name in enumerate(schema.feature_names):
        mean, std = schema.standardization[name]
        values[j] = (values[j] - mean) / std
    return EHRFeatureVector(values=values, imputed_mask=mask, schema_id=schema.schema_id)


def component_mask(schema: FeatureSchema, drop: set[str] | frozenset[str] = frozenset()) -> np.ndarray:
    """Boolean keep-mask over the feature vector, zeroing dropped components."""
    unknown = set(drop) - set(COMPONENTS)
    if unknown:
        raise ValidationError(f"unknown EHR components {sorted(unknown)}; valid: {COMPONENTS}")
    mask = np.ones(schema.n_features, dtype=bool)
    for name, block in schema.block_slices().items():
        if name in drop:
            mask[block] = False
    return mask


class EHRVectorizer(BaseEstimator, TransformerMixin):
    """Sklearn-style transformer from PatientRecords to standardized features.

    Parameters
    ----------
    window_days : (lo, hi) inclusive day offsets around the echo defining
        which lab observations count.
    coverage_threshold : minimum fraction of fitting patients that must have
        an in-window observation for a lab code to be kept.
    scope : "train" fits the schema per training split (leakage-safe,
        default); "all" signals the cross-validation harness to fit once on
        the full cohort before splitting.
    """

    def __init__(
        self,
        window_days: tuple[int, int] = (-90, 30),
        coverage_threshold: float = 0.1,
        scope: str = "train",
    ):
        self.window_days = window_days
        self.coverage_threshold = coverage_threshold
        self.scope = scope

    def fit(self, records: list[PatientRecord], y=None) -> "EHRVectorizer":
        if self.scope not in ("train", "all"):
            raise ValidationError(f"scope must be 'train' or 'all', got {self.scope!r}")
        codes = select_labs(records, tuple(self.window_days), self.coverage_threshold)
        self.schema_ = fit_schema(
            records, codes, tuple(self.window_days), self.coverage_threshold
        )
        return self

    def transform(self, records: list[PatientRecord]) -> np.ndarray:
        self._check_fitted()
        return np.stack([vectorize(r, self.schema_).values for r in records])

    def transform_record(self, record: PatientRecord) -> EHRFeatureVector:
        self._check_fitted()
        return vectorize(record, self.schema_)

    def get_feature_names_out(self, input_features=None) -> np.ndarray:
        self._check_fitted()
        return np.asarray(self.schema_.feature_names, dtype=object)

    def _check_fitted(self) -> None:
        if not hasattr(self, "schema_"):
            raise ValidationError("EHRVectorizer is not fitted yet; call fit() first")
