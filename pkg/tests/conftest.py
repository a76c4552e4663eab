import numpy as np
import pytest

from cardiofuse import (
    CohortSpec,
    EncoderConfig,
    FusionConfig,
    LabObservation,
    PatientRecord,
    generate_cohort,
)
from cardiofuse.dataio import METRIC_NAMES


def tiny_encoder_config() -> EncoderConfig:
    """Desk-size encoder for unit tests and finite-difference checks."""
    return EncoderConfig(
        frame_size=8,
        sampled_frames=4,
        conv_channels=(2,),
        frame_feature_dim=4,
        lstm_hidden=3,
        clip_feature_dim=6,
        attention_dim=3,
        head_hidden=4,
    )


def tiny_fusion_config(dropout: float = 0.0) -> FusionConfig:
    return FusionConfig(
        d_model=16, n_heads=1, n_layers=1, ff_dim=32, dropout=dropout, head_hidden=8
    )


def make_record(
    pid: str,
    label: int = 0,
    labs: list[LabObservation] | None = None,
    sex: str = "F",
    race: str = "White",
    age: float = 60.0,
    metrics: dict | None = None,
) -> PatientRecord:
    base_metrics = {name: 1.0 for name in METRIC_NAMES}
    if metrics:
        base_metrics.update(metrics)
    weight, height = 80.0, 1.75
    return PatientRecord(
        patient_id=pid,
        label=label,
        age=age,
        sex=sex,
        race=race,
        sbp=120.0,
        dbp=75.0,
        weight_kg=weight,
        height_m=height,
        bmi=weight / height**2,
        cardiac_metrics=base_metrics,
        labs=labs or [],
    )


@pytest.fixture(scope="session")
def tiny_cohort_dir(tmp_path_factory):
    """Small on-disk cohort shared by dataio/crossval/CLI tests."""
    out = tmp_path_factory.mktemp("tiny-cohort")
    spec = CohortSpec(
        n_patients=24,
        prevalence=0.5,
        seed=3,
        n_lab_codes=6,
        lab_missingness=0.2,
        signal_ehr=2.0,
        signal_plax=2.0,
        signal_a4c=2.0,
        frames_per_clip=30,
        frame_size=16,
    )
    manifest = generate_cohort(spec, out)
    return manifest.parent


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
