"""Sklearn-style estimators wrapping the torch architectures.

Every estimator follows the scikit-learn contract: hyperparameters are
stored verbatim in ``__init__``, ``fit`` returns self and sets trailing-
underscore attributes, ``predict_proba`` returns an [N, 2] array over
``classes_ = [0, 1]``.

Inputs are multimodal, so X is a dict with any of the keys "ehr" (float
matrix [N, D]), "plax" and "a4c" (clip tensors [N, T, 1, H, W]); each
estimator reads the modalities it uses. ``build_model_inputs`` assembles
that dict from loaded records/clips.

Fusion estimators consume pre-trained single-view models. Their encoders
are copied in (never shared), frozen by default, and when frozen the clip
features are computed once so fusion training never re-runs the encoders.
"""

from __future__ import annotations

import copy
from dataclasses import asdict

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin

from .dataio import EchoClip
from .ehr import FeatureSchema
from .errors import ArtifactKindError, ConfigurationError, ValidationError
from .models import (
    ClipEncoder,
    DoubleViewNet,
    EHRLogisticNet,
    EncoderConfig,
    FusionConfig,
    IntermediateFusionNet,
    LateFusionNet,
    SingleViewNet,
    init_parameters,
    subsample_frame_indices,
)
from .training import TrainConfig, train_module

CHECKPOINT_FORMAT_VERSION = 1

MODEL_KINDS = (
    "ehr_lr",
    "single_plax",
    "single_a4c",
    "double_view",
    "late_fusion",
    "intermediate_fusion",
)

_PREDICT_CHUNK = 64


def clips_to_tensor(clip_list: list[EchoClip], sampled_frames: int = 30) -> torch.Tensor:
    """Stack clips into a float32 [N, T, C, H, W] tensor with T uniformly
    subsampled frames. The data contract requires at least 30 frames."""
    if sampled_frames < 30:
        raise ValidationError(
            f"sampled_frames must be >= 30 to cover a cardiac cycle, got {sampled_frames}"
        )
    stacked = []
    for clip in clip_list:
        idx = subsample_frame_indices(clip.frames.shape[0], sampled_frames)
        stacked.append(np.transpose(clip.frames[idx], (0, 3, 1, 2)))
    return torch.from_numpy(np.stack(stacked).astype(np.float32))


def build_model_inputs(
    ids: list[str],
    clips: dict[str, dict[str, EchoClip]],
    ehr_matrix: np.ndarray | None = None,
    sampled_frames: int = 30,
    modalities: tuple[str, ...] = ("ehr", "plax", "a4c"),
) -> dict[str, torch.Tensor]:
    """Assemble the estimator input dict for the given patients."""
    X: dict[str, torch.Tensor] = {}
    if "ehr" in modalities:
        if ehr_matrix is None:
            raise ValidationError("ehr modality requested but no feature matrix given")
        X["ehr"] = torch.from_numpy(np.asarray(ehr_matrix, dtype=np.float32))
    for key, view in (("plax", "PLAX"), ("a4c", "A4C")):
        if key in modalities:
            X[key] = clips_to_tensor([clips[pid][view] for pid in ids], sampled_frames)
    return X


def _seed_trio(seed: int) -> tuple[int, int, int]:
    """Derive (init, shuffle, dropout) seeds from one estimator seed."""
    state = np.random.SeedSequence(seed).generate_state(3, dtype=np.uint64)
    return int(state[0]), int(state[1]), int(state[2])


def _as_labels(y) -> torch.Tensor:
    return torch.as_tensor(np.asarray(y), dtype=torch.float32)


def _check_key(X: dict, key: str) -> torch.Tensor:
    if key not in X:
        raise ValidationError(f"input dict is missing modality {key!r}")
    return X[key]


def _proba_matrix(p: torch.Tensor) -> np.ndarray:
    p1 = p.detach().cpu().numpy().astype(np.float64)
    return np.stack([1.0 - p1, p1], axis=1)


class _TorchClassifier(BaseEstimator, ClassifierMixin):
    """Shared predict/validation machinery for the torch-backed estimators."""

    kind_: str

    def _check_fitted(self) -> None:
        if not hasattr(self, "net_"):
            raise ValidationError(f"{type(self).__name__} is not fitted; call fit() first")

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)

    def _forward_chunks(self, tensors: tuple[torch.Tensor, ...], fn) -> torch.Tensor:
        self.net_.eval()
        outs = []
        n = tensors[0].shape[0]
        with torch.no_grad():
            for lo in range(0, n, _PREDICT_CHUNK):
                outs.append(fn(*(t[lo : lo + _PREDICT_CHUNK] for t in tensors)))
        return torch.cat(outs)


class EHRLogisticModel(_TorchClassifier):
    """Logistic regression over the standardized EHR feature vector."""

    def __init__(self, train_config: TrainConfig | None = None, seed: int = 0):
        self.train_config = train_config
        self.seed = seed

    def fit(self, X: dict, y) -> "EHRLogisticModel":
        ehr = _check_key(X, "ehr")
        init_seed, train_seed, _ = _seed_trio(self.seed)
        net = EHRLogisticNet(ehr.shape[1])
        init_parameters(net, init_seed)
        cfg = (self.train_config or TrainConfig()).with_seed(train_seed)
        self.history_ = train_module(net, (ehr,), _as_labels(y), cfg)
        self.net_ = net
        self.classes_ = np.array([0, 1])
        self.kind_ = "ehr_lr"
        return self

    def predict_proba(self, X: dict) -> np.ndarray:
        self._check_fitted()
        p = self._forward_chunks((_check_key(X, "ehr"),), self.net_)
        return _proba_matrix(p)


class SingleViewModel(_TorchClassifier):
    """Spatiotemporal classifier for one echo view (PLAX or A4C)."""

    def __init__(
        self,
        view: str = "PLAX",
        encoder_config: EncoderConfig | None = None,
        train_config: TrainConfig | None = None,
        seed: int = 0,
    ):
        self.view = view
        self.encoder_config = encoder_config
        self.train_config = train_config
        self.seed = seed

    @property
    def _key(self) -> str:
        if self.view not in ("PLAX", "A4C"):
            raise ValidationError(f"view must be PLAX or A4C, got {self.view!r}")
        return self.view.lower()

    def fit(self, X: dict, y) -> "SingleViewModel":
        clips = _check_key(X, self._key)
        init_seed, train_seed, _ = _seed_trio(self.seed)
        net = SingleViewNet(self.encoder_config or EncoderConfig())
        init_parameters(net, init_seed)
        cfg = (self.train_config or TrainConfig()).with_seed(train_seed)
        self.history_ = train_module(net, (clips,), _as_labels(y), cfg)
        self.net_ = net
        self.classes_ = np.array([0, 1])
        self.kind_ = f"single_{self._key}"
        return self

    def predict_proba(self, X: dict) -> np.ndarray:
        self._check_fitted()
        p = self._forward_chunks((_check_key(X, self._key),), self.net_)
        return _proba_matrix(p)

    @property
    def encoder_(self) -> ClipEncoder:
        self._check_fitted()
        return self.net_.encoder


def _pretrained_encoders(
    plax_model: SingleViewModel | None, a4c_model: SingleViewModel | None
) -> tuple[ClipEncoder, ClipEncoder, dict]:
    """Deep-copied encoders from fitted stage-A models, plus provenance."""
    if plax_model is None or a4c_model is None:
        raise ConfigurationError(
            "fusion models require pre-trained single-view models for both views"
        )
    for model, view in ((plax_model, "PLAX"), (a4c_model, "A4C")):
        if not hasattr(model, "net_"):
            raise ConfigurationError(f"the {view} single-view model is not fitted")
        if model.view != view:
            raise ConfigurationError(f"expected a {view} model, got view={model.view!r}")
    provenance = {
        "plax_encoder": {"kind": plax_model.kind_, "seed": int(plax_model.seed)},
        "a4c_encoder": {"kind": a4c_model.kind_, "seed": int(a4c_model.seed)},
    }
    return copy.deepcopy(plax_model.encoder_), copy.deepcopy(a4c_model.encoder_), provenance


def _freeze(encoder: ClipEncoder) -> None:
    for param in encoder.parameters():
        param.requires_grad_(False)


def _encode_all(encoder: ClipEncoder, clips: torch.Tensor) -> torch.Tensor:
    encoder.eval()
    feats = []
    with torch.no_grad():
        for lo in range(0, clips.shape[0], _PREDICT_CHUNK):
            feats.append(encoder(clips[lo : lo + _PREDICT_CHUNK])[0])
    return torch.cat(feats)


class _FusionBase(_TorchClassifier):
    """Common stage-B fitting logic over pre-trained encoders."""

    def _prepare(self, X: dict, freeze: bool, needs_ehr: bool):
        plax = _check_key(X, "plax")
        a4c = _check_key(X, "a4c")
        extras = (_check_key(X, "ehr"),) if needs_ehr else ()
        if freeze:
            _freeze(self.net_.plax_encoder)
            _freeze(self.net_.a4c_encoder)
            fp = _encode_all(self.net_.plax_encoder, plax)
            fa = _encode_all(self.net_.a4c_encoder, a4c)
            return (fp, fa, *extras), True
        return (plax, a4c, *extras), False

    def _record_trainables(self) -> None:
        self.trainable_names_ = [
            name for name, p in self.net_.named_parameters() if p.requires_grad
        ]


class DoubleViewModel(_FusionBase):
    """Late fusion of the two echo views: concatenated clip features + head."""

    def __init__(
        self,
        plax_model: SingleViewModel | None = None,
        a4c_model: SingleViewModel | None = None,
        head_hidden: int = 64,
        freeze_encoders: bool = True,
        train_config: TrainConfig | None = None,
        seed: int = 0,
    ):
        self.plax_model = plax_model
        self.a4c_model = a4c_model
        self.head_hidden = head_hidden
        self.freeze_encoders = freeze_encoders
        self.train_config = train_config
        self.seed = seed

    def fit(self, X: dict, y) -> "DoubleViewModel":
        enc_p, enc_a, provenance = _pretrained_encoders(self.plax_model, self.a4c_model)
        init_seed, train_seed, _ = _seed_trio(self.seed)
        net = DoubleViewNet(enc_p, enc_a, self.head_hidden)
        init_parameters(net, init_seed)
        net.plax_encoder.load_state_dict(self.plax_model.encoder_.state_dict())
        net.a4c_encoder.load_state_dict(self.a4c_model.encoder_.state_dict())
        self.net_ = net

        inputs, frozen = self._prepare(X, self.freeze_encoders, needs_ehr=False)
        forward = (lambda m, fp, fa: m.fuse(fp, fa)) if frozen else None
        cfg = (self.train_config or TrainConfig()).with_seed(train_seed)
        self.history_ = train_module(net, inputs, _as_labels(y), cfg, forward=forward)
        self._record_trainables()
        self.encoder_provenance_ = provenance
        self.classes_ = np.array([0, 1])
        self.kind_ = "double_view"
        return self

    def predict_proba(self, X: dict) -> np.ndarray:
        self._check_fitted()
        p = self._forward_chunks((_check_key(X, "plax"), _check_key(X, "a4c")), self.net_)
        return _proba_matrix(p)


class LateFusionModel(_FusionBase):
    """Late fusion of both echo views and the EHR vector before one head."""

    def __init__(
        self,
        plax_model: SingleViewModel | None = None,
        a4c_model: SingleViewModel | None = None,
        head_hidden: int = 64,
        freeze_encoders: bool = True,
        train_config: TrainConfig | None = None,
        seed: int = 0,
    ):
        self.plax_model = plax_model
        self.a4c_model = a4c_model
        self.head_hidden = head_hidden
        self.freeze_encoders = freeze_encoders
        self.train_config = train_config
        self.seed = seed

    def fit(self, X: dict, y) -> "LateFusionModel":
        enc_p, enc_a, provenance = _pretrained_encoders(self.plax_model, self.a4c_model)
        ehr = _check_key(X, "ehr")
        init_seed, train_seed, _ = _seed_trio(self.seed)
        net = LateFusionNet(enc_p, enc_a, ehr.shape[1], self.head_hidden)
        init_parameters(net, init_seed)
        net.plax_encoder.load_state_dict(self.plax_model.encoder_.state_dict())
        net.a4c_encoder.load_state_dict(self.a4c_model.encoder_.state_dict())
        self.net_ = net

        inputs, frozen = self._prepare(X, self.freeze_encoders, needs_ehr=True)
        forward = (lambda m, fp, fa, e: m.fuse(fp, fa, e)) if frozen else None
        cfg = (self.train_config or TrainConfig()).with_seed(train_seed)
        self.history_ = train_module(net, inputs, _as_labels(y), cfg, forward=forward)
        self._record_trainables()
        self.encoder_provenance_ = provenance
        self.classes_ = np.array([0, 1])
        self.kind_ = "late_fusion"
        return self

    def predict_proba(self, X: dict) -> np.ndarray:
        self._check_fitted()
        tensors = (_check_key(X, "plax"), _check_key(X, "a4c"), _check_key(X, "ehr"))
        p = self._forward_chunks(tensors, self.net_)
        return _proba_matrix(p)


class IntermediateFusionModel(_FusionBase):
    """Transformer intermediate fusion over EHR/PLAX/A4C modality tokens."""

    def __init__(
        self,
        fusion_config: FusionConfig | None = None,
        plax_model: SingleViewModel | None = None,
        a4c_model: SingleViewModel | None = None,
        train_config: TrainConfig | None = None,
        seed: int = 0,
    ):
        self.fusion_config = fusion_config
        self.plax_model = plax_model
        self.a4c_model = a4c_model
        self.train_config = train_config
        self.seed = seed

    def fit(self, X: dict, y) -> "IntermediateFusionModel":
        config = self.fusion_config or FusionConfig()
        if config.encoder_freeze and (self.plax_model is None or self.a4c_model is None):
            raise ConfigurationError(
                "encoder_freeze=True requires pre-trained single-view models"
            )
        enc_p, enc_a, provenance = _pretrained_encoders(self.plax_model, self.a4c_model)
        ehr = _check_key(X, "ehr")
        init_seed, train_seed, dropout_seed = _seed_trio(self.seed)
        net = IntermediateFusionNet(config, ehr.shape[1], enc_p, enc_a)
        init_parameters(net, init_seed)
        net.plax_encoder.load_state_dict(self.plax_model.encoder_.state_dict())
        net.a4c_encoder.load_state_dict(self.a4c_model.encoder_.state_dict())
        net.reseed_dropout(dropout_seed)
        self.net_ = net

        inputs, frozen = self._prepare(X, config.encoder_freeze, needs_ehr=True)
        if frozen:
            fp, fa, e = inputs
            inputs = (e, fp, fa)
            forward = lambda m, e_, fp_, fa_: m.fuse(e_, fp_, fa_)[0]
        else:
            plax, a4c, e = inputs
            inputs = (e, plax, a4c)
            forward = lambda m, e_, xp_, xa_: m(e_, xp_, xa_)[0]
        cfg = (self.train_config or TrainConfig()).with_seed(train_seed)
        self.history_ = train_module(net, inputs, _as_labels(y), cfg, forward=forward)
        self._record_trainables()
        self.encoder_provenance_ = provenance
        self.classes_ = np.array([0, 1])
        self.kind_ = "intermediate_fusion"
        return self

    def predict_proba(self, X: dict) -> np.ndarray:
        self._check_fitted()
        tensors = (_check_key(X, "ehr"), _check_key(X, "plax"), _check_key(X, "a4c"))
        p = self._forward_chunks(tensors, lambda e, xp, xa: self.net_(e, xp, xa)[0])
        return _proba_matrix(p)

    def attention_maps(self, X: dict) -> list[torch.Tensor]:
        """Per-layer attention matrices [N, heads, 4, 4] over a dataset view."""
        self._check_fitted()
        self.net_.eval()
        ehr = _check_key(X, "ehr")
        plax = _check_key(X, "plax")
        a4c = _check_key(X, "a4c")
        per_layer: list[list[torch.Tensor]] = [[] for _ in self.net_.layers]
        with torch.no_grad():
            for lo in range(0, ehr.shape[0], _PREDICT_CHUNK):
                sl = slice(lo, lo + _PREDICT_CHUNK)
                _, attns = self.net_(ehr[sl], plax[sl], a4c[sl])
                for i, attn in enumerate(attns):
                    per_layer[i].append(attn)
        return [torch.cat(chunks) for chunks in per_layer]


def train_intermediate_pipeline(
    X_train: dict,
    y_train,
    encoder_config: EncoderConfig | None = None,
    fusion_config: FusionConfig | None = None,
    train_encoder: TrainConfig | None = None,
    train_fusion: TrainConfig | None = None,
    seed: int = 0,
) -> tuple[IntermediateFusionModel, SingleViewModel, SingleViewModel]:
    """Two-stage recipe: train both single-view models, then the fusion model
    on top of their (frozen by default) encoders."""
    seeds = np.random.SeedSequence(seed).generate_state(3, dtype=np.uint64)
    plax = SingleViewModel(
        view="PLAX", encoder_config=encoder_config, train_config=train_encoder,
        seed=int(seeds[0]),
    ).fit(X_train, y_train)
    a4c = SingleViewModel(
        view="A4C", encoder_config=encoder_config, train_config=train_encoder,
        seed=int(seeds[1]),
    ).fit(X_train, y_train)
    fused = IntermediateFusionModel(
        fusion_config=fusion_config, plax_model=plax, a4c_model=a4c,
        train_config=train_fusion, seed=int(seeds[2]),
    ).fit(X_train, y_train)
    return fused, plax, a4c


def _config_dict(config) -> dict | None:
    return None if config is None else asdict(config)


def save_checkpoint(model, path, schema: FeatureSchema | None = None, extra: dict | None = None):
    """Write a fitted estimator to a versioned checkpoint file."""
    if not hasattr(model, "net_"):
        raise ValidationError("cannot checkpoint an unfitted model")
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": model.kind_,
        "seed": int(model.seed),
        "state": model.net_.state_dict(),
        "schema_json": schema.to_json() if schema is not None else None,
        "provenance": dict(getattr(model, "encoder_provenance_", {})),
    }
    if extra:
        payload["provenance"].update(extra)
    if model.kind_.startswith("single_"):
        payload["encoder_config"] = asdict(model.net_.encoder.config)
    elif model.kind_ in ("double_view", "late_fusion"):
        payload["encoder_config"] = asdict(model.net_.plax_encoder.config)
        payload["head_hidden"] = int(model.head_hidden)
        if model.kind_ == "late_fusion":
            payload["ehr_dim"] = int(model.net_.ehr_dim)
    elif model.kind_ == "intermediate_fusion":
        payload["encoder_config"] = asdict(model.net_.plax_encoder.config)
        payload["fusion_config"] = _config_dict(model.net_.config)
        payload["ehr_dim"] = int(model.net_.ehr_dim)
    torch.save(payload, path)


def _fitted_shell(cls, **kwargs):
    model = cls(**kwargs)
    model.classes_ = np.array([0, 1])
    return model


def load_checkpoint(path):
    """Reconstruct a fitted estimator (and its schema, if any) from disk."""
    payload = torch.load(path, weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValidationError(f"unsupported checkpoint format version {version!r}")
    kind = payload["kind"]
    if kind not in MODEL_KINDS:
        raise ArtifactKindError(f"unknown model kind {kind!r} in checkpoint")

    def enc_cfg() -> EncoderConfig:
        cfg = dict(payload["encoder_config"])
        cfg["conv_channels"] = tuple(cfg["conv_channels"])
        return EncoderConfig(**cfg)

    if kind == "ehr_lr":
        n_features = payload["state"]["linear.weight"].shape[1]
        net = EHRLogisticNet(int(n_features))
        model = _fitted_shell(EHRLogisticModel, seed=payload["seed"])
    elif kind in ("single_plax", "single_a4c"):
        net = SingleViewNet(enc_cfg())
        view = "PLAX" if kind == "single_plax" else "A4C"
        model = _fitted_shell(SingleViewModel, view=view, seed=payload["seed"])
    elif kind == "double_view":
        cfg = enc_cfg()
        net = DoubleViewNet(ClipEncoder(cfg), ClipEncoder(cfg), payload["head_hidden"])
        model = _fitted_shell(DoubleViewModel, head_hidden=payload["head_hidden"],
                              seed=payload["seed"])
    elif kind == "late_fusion":
        cfg = enc_cfg()
        net = LateFusionNet(
            ClipEncoder(cfg), ClipEncoder(cfg), payload["ehr_dim"], payload["head_hidden"]
        )
        model = _fitted_shell(LateFusionModel, head_hidden=payload["head_hidden"],
                              seed=payload["seed"])
    else:
        cfg = enc_cfg()
        fusion_cfg = FusionConfig(**payload["fusion_config"])
        net = IntermediateFusionNet(
            fusion_cfg, payload["ehr_dim"], ClipEncoder(cfg), ClipEncoder(cfg)
        )
        model = _fitted_shell(IntermediateFusionModel, fusion_config=fusion_cfg,
                              seed=payload["seed"])
    net.load_state_dict(payload["state"])
    net.eval()
    model.net_ = net
    model.kind_ = kind
    model.encoder_provenance_ = dict(payload.get("provenance", {}))
    if payload.get("schema_json"):
        model.schema_ = FeatureSchema.from_json(payload["schema_json"])
    return model
