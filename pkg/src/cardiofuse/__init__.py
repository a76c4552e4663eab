"""cardiofuse: multimodal echo-video + EHR classification pipeline.

Synthetic cohort generation, ECV1 clip serialization, EHR feature
engineering, five classifier architectures (EHR logistic regression,
single/double echo-view models, late and transformer intermediate fusion),
a stratified cross-validation harness, and attention-based importance
analysis, all behind sklearn-style fit/transform/predict surfaces.
"""

from .cohort import BNP_CODE, CohortSpec, generate_cohort, render_echo_clip
from .crossval import (
    CVReport,
    CohortData,
    EncoderCache,
    FoldPlan,
    PRESETS,
    RunConfig,
    auroc,
    confusion_metrics,
    cross_validate,
    load_cohort,
    make_folds,
)
from .dataio import (
    EchoClip,
    LabObservation,
    PatientRecord,
    load_dataset,
    read_clip,
    write_clip,
)
from .ehr import (
    EHRFeatureVector,
    EHRVectorizer,
    FeatureSchema,
    component_mask,
    fit_schema,
    select_labs,
    vectorize,
)
from .errors import (
    ArtifactKindError,
    CardiofuseError,
    ClipFormatError,
    ConfigurationError,
    DatasetError,
    TrainingError,
    ValidationError,
)
from .estimators import (
    DoubleViewModel,
    EHRLogisticModel,
    IntermediateFusionModel,
    LateFusionModel,
    SingleViewModel,
    build_model_inputs,
    load_checkpoint,
    save_checkpoint,
    train_intermediate_pipeline,
)
from .importance import (
    ImportanceReport,
    build_importance_report,
    ehr_entry_importance,
    export_importance,
    modality_importance,
)
from .models import EncoderConfig, FusionConfig
from .training import TrainConfig, TrainHistory, bce_loss

__version__ = "0.1.0"

__all__ = [
    "ArtifactKindError",
    "BNP_CODE",
    "CardiofuseError",
    "ClipFormatError",
    "CohortData",
    "CohortSpec",
    "ConfigurationError",
    "CVReport",
    "DatasetError",
    "DoubleViewModel",
    "EchoClip",
    "EHRFeatureVector",
    "EHRLogisticModel",
    "EHRVectorizer",
    "EncoderCache",
    "EncoderConfig",
    "FeatureSchema",
    "FoldPlan",
    "FusionConfig",
    "ImportanceReport",
    "IntermediateFusionModel",
    "LabObservation",
    "LateFusionModel",
    "PatientRecord",
    "PRESETS",
    "RunConfig",
    "SingleViewModel",
    "TrainConfig",
    "TrainHistory",
    "TrainingError",
    "ValidationError",
    "auroc",
    "bce_loss",
    "build_importance_report",
    "build_model_inputs",
    "component_mask",
    "confusion_metrics",
    "cross_validate",
    "ehr_entry_importance",
    "export_importance",
    "fit_schema",
    "generate_cohort",
    "load_checkpoint",
    "load_cohort",
    "load_dataset",
    "make_folds",
    "modality_importance",
    "read_clip",
    "render_echo_clip",
    "save_checkpoint",
    "select_labs",
    "train_intermediate_pipeline",
    "vectorize",
    "write_clip",
]
