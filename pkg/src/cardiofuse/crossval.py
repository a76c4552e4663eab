"""Stratified 5-fold cross-validation with accuracy/sensitivity/specificity/AUROC.

``cross_validate`` runs one named preset end to end: per fold it fits the
EHR schema on the training split (leakage-safe by default), trains the
preset's model (two-stage for fusion kinds, with stage-A single-view models
shared through an EncoderCache), and scores the held-out fold. Fold metrics
and their arithmetic means land in a CVReport that serializes to CSV/JSON.

AUROC uses the rank (Mann-Whitney) formulation with ties credited 0.5,
which equals the trapezoidal area under the ROC curve.
"""

from __future__ import annotations

import hashlib
import json
import threading
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .dataio import EchoClip, PatientRecord, load_dataset
from .ehr import EHRVectorizer, component_mask
from .errors import ConfigurationError, TrainingError, ValidationError
from .estimators import (
    DoubleViewModel,
    EHRLogisticModel,
    IntermediateFusionModel,
    LateFusionModel,
    SingleViewModel,
    build_model_inputs,
)
from .models import EncoderConfig, FusionConfig
from .training import TrainConfig


@dataclass(frozen=True)
class FoldPlan:
    """Partition of patient ids into k folds."""

    k: int
    seed: int
    stratified: bool
    assignments: tuple[tuple[str, int], ...]

    def fold_of(self) -> dict[str, int]:
        return dict(self.assignments)

    def fingerprint(self) -> str:
        payload = json.dumps(
            {"k": self.k, "seed": self.seed, "stratified": self.stratified,
             "assignments": list(self.assignments)},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:12]


def make_folds(
    ids: list[str], labels, k: int = 5, seed: int = 0, stratified: bool = True
) -> FoldPlan:
    """Assign each patient to one of k folds via a seeded shuffle (within each
    class when stratified) followed by round-robin assignment.

    The shuffle works on lexicographically sorted ids, so the plan depends
    only on the (id, label) set and the seed, not on input order. Per-class
    fold counts differ by at most one. A class with fewer members than folds
    only triggers a warning; downstream metrics flag the degenerate folds.
    """
    labels = np.asarray(labels, dtype=int)
    if len(ids) != len(labels):
        raise ValidationError(f"ids ({len(ids)}) and labels ({len(labels)}) differ in length")
    if len(set(ids)) != len(ids):
        raise ValidationError("patient ids must be unique")
    if k < 2:
        raise ValidationError(f"k must be >= 2, got {k}")
    if k > len(ids):
        raise ValidationError(f"cannot make {k} folds from {len(ids)} patients")

    rng = np.random.default_rng(seed)
    assignments: dict[str, int] = {}
    if stratified:
        for cls in (0, 1):
            members = sorted(pid for pid, lab in zip(ids, labels) if lab == cls)
            if 0 < len(members) < k:
                warnings.warn(
                    f"class {cls} has only {len(members)} patients for {k} folds; "
                    "some folds will lack this class",
                    stacklevel=2,
                )
            for j, idx in enumerate(rng.permutation(len(members))):
                assignments[members[idx]] = j % k
    else:
        members = sorted(ids)
        for j, idx in enumerate(rng.permutation(len(members))):
            assignments[members[idx]] = j % k
    ordered = tuple(sorted(assignments.items()))
    return FoldPlan(k=k, seed=seed, stratified=stratified, assignments=ordered)


def confusion_metrics(probs, labels, threshold: float = 0.5) -> tuple[float, float, float]:
    """(accuracy, sensitivity, specificity) at the given operating point.

    A prediction is positive iff p >= threshold. Ratios with an empty class
    are reported as NaN with a warning so fold averaging can exclude them.
    """
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if probs.shape != labels.shape:
        raise ValidationError(f"probs {probs.shape} and labels {labels.shape} differ in shape")
    if probs.size == 0:
        raise ValidationError("confusion_metrics requires at least one sample")
    preds = probs >= threshold
    pos = labels == 1
    tp = int(np.sum(preds & pos))
    tn = int(np.sum(~preds & ~pos))
    fn = int(np.sum(~preds & pos))
    fp = int(np.sum(preds & ~pos))
    accuracy = (tp + tn) / labels.size
    if tp + fn > 0:
        sensitivity = tp / (tp + fn)
    else:
        warnings.warn("no positive samples: sensitivity undefined", stacklevel=2)
        sensitivity = float("nan")
    if tn + fp > 0:
        specificity = tn / (tn + fp)
    else:
        warnings.warn("no negative samples: specificity undefined", stacklevel=2)
        specificity = float("nan")
    return accuracy, sensitivity, specificity


def auroc(probs, labels) -> float:
    """Probability that a random positive outscores a random negative
    (ties counted half), computed from average ranks."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if probs.shape != labels.shape:
        raise ValidationError(f"probs {probs.shape} and labels {labels.shape} differ in shape")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUROC requires both classes present")
    ranks = rankdata(probs)
    rank_sum = float(np.sum(ranks[labels == 1]))
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass(frozen=True)
class Preset:
    """One runnable configuration row of the experiment matrix."""

    name: str
    kind: str
    modalities: tuple[str, ...]
    drop: tuple[str, ...] = ()
    description: str = ""


PRESETS: dict[str, Preset] = {
    p.name: p
    for p in (
        Preset("table2-row1", "ehr_lr", ("ehr",), (), "EHR-only logistic regression"),
        Preset("table2-row2", "single_plax", ("plax",), (), "PLAX-view video classifier"),
        Preset("table2-row3", "single_a4c", ("a4c",), (), "A4C-view video classifier"),
        Preset("table2-row4", "double_view", ("plax", "a4c"), (), "two-view late fusion"),
        Preset("table2-row5", "late_fusion", ("ehr", "plax", "a4c"), (),
               "three-modality late fusion"),
        Preset("table2-row6", "intermediate_fusion", ("ehr", "plax", "a4c"), (),
               "transformer intermediate fusion"),
        Preset("table3-drop-demo", "intermediate_fusion", ("ehr", "plax", "a4c"),
               ("demo_vitals",), "intermediate fusion without demographics/vitals"),
        Preset("table3-drop-metrics", "intermediate_fusion", ("ehr", "plax", "a4c"),
               ("metrics",), "intermediate fusion without cardiac metrics"),
        Preset("table3-drop-labs", "intermediate_fusion", ("ehr", "plax", "a4c"),
               ("labs",), "intermediate fusion without lab values"),
        Preset("table3-full", "intermediate_fusion", ("ehr", "plax", "a4c"), (),
               "intermediate fusion with the full EHR vector"),
    )
}

TABLE2_PRESETS = tuple(f"table2-row{i}" for i in range(1, 7))
TABLE3_PRESETS = ("table3-drop-demo", "table3-drop-metrics", "table3-drop-labs", "table3-full")


@dataclass
class RunConfig:
    """Fully resolved configuration for one cross-validated run."""

    preset: str
    seed: int = 0
    k: int = 5
    stratified: bool = True
    imputation_scope: str = "train"
    window_days: tuple[int, int] = (-90, 30)
    coverage_threshold: float = 0.1
    encoder_config: EncoderConfig = field(default_factory=EncoderConfig)
    fusion_config: FusionConfig = field(default_factory=FusionConfig)
    train_encoder: TrainConfig = field(default_factory=TrainConfig)
    train_fusion: TrainConfig = field(default_factory=TrainConfig)
    train_ehr: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigurationError(
                f"unknown preset {self.preset!r}; valid presets: {sorted(PRESETS)}"
            )
        if self.imputation_scope not in ("train", "all"):
            raise ConfigurationError(
                f"imputation_scope must be 'train' or 'all', got {self.imputation_scope!r}"
            )
        if self.k < 2:
            raise ConfigurationError(f"k must be >= 2, got {self.k}")
        self.encoder_config.validate()
        self.fusion_config.validate()
        for cfg in (self.train_encoder, self.train_fusion, self.train_ehr):
            cfg.validate()

    def fingerprint(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]


@dataclass
class FoldReport:
    fold: int
    n_eval: int
    accuracy: float
    sensitivity: float
    specificity: float
    auroc: float


_METRIC_FIELDS = ("accuracy", "sensitivity", "specificity", "auroc")
_CSV_HEADER = "fold,Accuracy,Sensitivity,Specificity,AUROC"


@dataclass
class CVReport:
    """Per-fold metrics, their arithmetic means and the run provenance."""

    preset: str
    seed: int
    k: int
    config_fingerprint: str
    dataset_fingerprint: str
    folds: list[FoldReport]
    fold_models: list = field(default_factory=list, repr=False)
    fold_schemas: list = field(default_factory=list, repr=False)

    @property
    def means(self) -> dict[str, float]:
        out = {}
        for name in _METRIC_FIELDS:
            values = np.array([getattr(f, name) for f in self.folds], dtype=float)
            finite = values[np.isfinite(values)]
            if finite.size < values.size:
                warnings.warn(
                    f"{self.preset}: {name} undefined on {values.size - finite.size} fold(s); "
                    "excluded from the mean",
                    stacklevel=2,
                )
            out[name] = float(finite.mean()) if finite.size else float("nan")
        return out

    def mean_auroc(self) -> float:
        return self.means["auroc"]

    def csv_lines(self) -> list[str]:
        lines = [_CSV_HEADER]
        for f in self.folds:
            lines.append(
                f"{f.fold},{f.accuracy:.6f},{f.sensitivity:.6f},"
                f"{f.specificity:.6f},{f.auroc:.6f}"
            )
        m = self.means
        lines.append(
            f"mean,{m['accuracy']:.6f},{m['sensitivity']:.6f},"
            f"{m['specificity']:.6f},{m['auroc']:.6f}"
        )
        return lines

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.csv_lines()) + "\n")

    def to_json_dict(self) -> dict:
        return {
            "preset": self.preset,
            "seed": self.seed,
            "k": self.k,
            "config_fingerprint": self.config_fingerprint,
            "dataset_fingerprint": self.dataset_fingerprint,
            "folds": [asdict(f) for f in self.folds],
            "means": self.means,
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n")


class CohortData:
    """A loaded cohort plus cached clip tensors, keyed for encoder reuse."""

    def __init__(
        self,
        records: list[PatientRecord],
        clips: dict[str, dict[str, EchoClip]],
        fingerprint: str,
    ):
        self.records = records
        self.clips = clips
        self.fingerprint = fingerprint
        self.ids = [r.patient_id for r in records]
        self.labels = np.array([r.label for r in records], dtype=int)
        self._tensor_cache: dict = {}
        self._lock = threading.Lock()

    def model_inputs(self, positions, ehr_matrix, modalities, sampled_frames) -> dict:
        ids = [self.ids[i] for i in positions]
        X = build_model_inputs(
            ids, self.clips, ehr_matrix, sampled_frames, tuple(modalities)
        )
        return X


def load_cohort(manifest_path: str | Path) -> CohortData:
    records, clips = load_dataset(manifest_path)
    digest = hashlib.sha256(Path(manifest_path).read_bytes()).hexdigest()[:12]
    return CohortData(records, clips, digest)


class EncoderCache:
    """Thread-safe cache of fitted stage-A single-view models.

    Keys include the dataset, fold plan, view, configs and seed, so a cached
    model is only reused where retraining would reproduce it bit for bit.
    """

    def __init__(self):
        self._models: dict = {}
        self._lock = threading.Lock()

    def get_or_train(self, key, factory):
        with self._lock:
            if key in self._models:
                return self._models[key]
        model = factory()
        with self._lock:
            return self._models.setdefault(key, model)


_ROLE_IDS = {"plax": 1, "a4c": 2, "fusion": 3, "ehr": 4}


def _fold_seed(base_seed: int, fold: int, role: str) -> int:
    ss = np.random.SeedSequence(base_seed, spawn_key=(fold, _ROLE_IDS[role]))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _fit_stage_a(
    view: str,
    fold: int,
    positions: list[int],
    dataset: CohortData,
    run: RunConfig,
    plan_fp: str,
    cache: EncoderCache,
) -> SingleViewModel:
    key = (
        dataset.fingerprint,
        plan_fp,
        view,
        fold,
        run.seed,
        json.dumps(asdict(run.encoder_config), sort_keys=True, default=list),
        json.dumps(asdict(run.train_encoder), sort_keys=True),
    )

    def factory() -> SingleViewModel:
        X = dataset.model_inputs(
            positions, None, (view.lower(),), run.encoder_config.sampled_frames
        )
        return SingleViewModel(
            view=view,
            encoder_config=run.encoder_config,
            train_config=run.train_encoder,
            seed=_fold_seed(run.seed, fold, view.lower()),
        ).fit(X, dataset.labels[positions])

    return cache.get_or_train(key, factory)


def _run_fold(
    fold: int,
    dataset: CohortData,
    run: RunConfig,
    plan: FoldPlan,
    cache: EncoderCache,
    shared_vectorizer: EHRVectorizer | None,
):
    preset = PRESETS[run.preset]
    fold_of = plan.fold_of()
    train_pos = [i for i, pid in enumerate(dataset.ids) if fold_of[pid] != fold]
    eval_pos = [i for i, pid in enumerate(dataset.ids) if fold_of[pid] == fold]
    y_train = dataset.labels[train_pos]
    y_eval = dataset.labels[eval_pos]

    schema = None
    ehr_train = ehr_eval = None
    if "ehr" in preset.modalities:
        if shared_vectorizer is not None:
            vectorizer = shared_vectorizer
        else:
            vectorizer = EHRVectorizer(
                window_days=run.window_days,
                coverage_threshold=run.coverage_threshold,
                scope=run.imputation_scope,
            ).fit([dataset.records[i] for i in train_pos])
        schema = vectorizer.schema_
        keep = component_mask(schema, set(preset.drop)).astype(np.float64)
        ehr_train = vectorizer.transform([dataset.records[i] for i in train_pos]) * keep
        ehr_eval = vectorizer.transform([dataset.records[i] for i in eval_pos]) * keep

    sampled = run.encoder_config.sampled_frames
    X_train = dataset.model_inputs(train_pos, ehr_train, preset.modalities, sampled)
    X_eval = dataset.model_inputs(eval_pos, ehr_eval, preset.modalities, sampled)
    plan_fp = plan.fingerprint()

    kind = preset.kind
    if kind == "ehr_lr":
        model = EHRLogisticModel(
            train_config=run.train_ehr, seed=_fold_seed(run.seed, fold, "ehr")
        ).fit(X_train, y_train)
    elif kind in ("single_plax", "single_a4c"):
        view = "PLAX" if kind == "single_plax" else "A4C"
        model = _fit_stage_a(view, fold, train_pos, dataset, run, plan_fp, cache)
    else:
        plax = _fit_stage_a("PLAX", fold, train_pos, dataset, run, plan_fp, cache)
        a4c = _fit_stage_a("A4C", fold, train_pos, dataset, run, plan_fp, cache)
        seed = _fold_seed(run.seed, fold, "fusion")
        freeze = run.fusion_config.encoder_freeze
        if kind == "double_view":
            model = DoubleViewModel(
                plax_model=plax, a4c_model=a4c,
                head_hidden=run.encoder_config.head_hidden,
                freeze_encoders=freeze, train_config=run.train_fusion, seed=seed,
            ).fit(X_train, y_train)
        elif kind == "late_fusion":
            model = LateFusionModel(
                plax_model=plax, a4c_model=a4c,
                head_hidden=run.encoder_config.head_hidden,
                freeze_encoders=freeze, train_config=run.train_fusion, seed=seed,
            ).fit(X_train, y_train)
        elif kind == "intermediate_fusion":
            model = IntermediateFusionModel(
                fusion_config=run.fusion_config, plax_model=plax, a4c_model=a4c,
                train_config=run.train_fusion, seed=seed,
            ).fit(X_train, y_train)
        else:
            raise ConfigurationError(f"unknown model kind {kind!r}")

    probs = model.predict_proba(X_eval)[:, 1]
    accuracy, sensitivity, specificity = confusion_metrics(probs, y_eval)
    try:
        auc = auroc(probs, y_eval)
    except ValidationError:
        warnings.warn(f"fold {fold}: single-class evaluation split, AUROC undefined",
                      stacklevel=2)
        auc = float("nan")
    report = FoldReport(
        fold=fold, n_eval=len(eval_pos), accuracy=accuracy,
        sensitivity=sensitivity, specificity=specificity, auroc=auc,
    )
    return report, model, schema


def cross_validate(
    run: RunConfig,
    dataset: CohortData,
    cache: EncoderCache | None = None,
    n_jobs: int = 1,
    keep_models: bool = False,
) -> CVReport:
    """Run one preset over seeded stratified folds and aggregate the metrics.

    ``cache`` lets several presets over the same dataset/fold plan share
    their stage-A single-view models. With ``n_jobs > 1`` folds run in
    worker threads; every source of randomness is derived from (seed, fold,
    role), so the result equals serial execution.
    """
    run.validate()
    cache = cache or EncoderCache()
    plan = make_folds(dataset.ids, dataset.labels, k=run.k, seed=run.seed,
                      stratified=run.stratified)

    shared_vectorizer = None
    if run.imputation_scope == "all" and "ehr" in PRESETS[run.preset].modalities:
        shared_vectorizer = EHRVectorizer(
            window_days=run.window_days,
            coverage_threshold=run.coverage_threshold,
            scope="all",
        ).fit(dataset.records)

    def worker(fold: int):
        try:
            return _run_fold(fold, dataset, run, plan, cache, shared_vectorizer)
        except TrainingError as exc:
            raise TrainingError(f"fold {fold}: {exc}") from exc

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(worker, range(run.k)))
    else:
        results = [worker(fold) for fold in range(run.k)]

    report = CVReport(
        preset=run.preset,
        seed=run.seed,
        k=run.k,
        config_fingerprint=run.fingerprint(),
        dataset_fingerprint=dataset.fingerprint,
        folds=[r[0] for r in results],
    )
    if keep_models:
        report.fold_models = [r[1] for r in results]
        report.fold_schemas = [r[2] for r in results]
    return report
