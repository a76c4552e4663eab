"""Command-line interface: synth, cv, ablate, importance.

Runs are configured by an INI-style file ([run], [schema], [encoder],
[fusion], [train], [train.encoder], [train.fusion], [train.ehr] sections)
plus repeatable ``--set section.key=value`` overrides; explicit flags win
over both. Every override is type-checked against the target config field
before anything runs.

All randomness flows from the single --seed, which is recorded in every
output. Outputs land under a run-stamped directory named from the preset,
seed and config fingerprint (never the clock), so rerunning a command with
identical inputs rewrites byte-identical files; wall-clock information goes
only to the log.

Exit codes: 0 success, 2 configuration/validation error, 3 training
failure, 4 artifact-kind mismatch.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import logging
import os
import sys
from pathlib import Path

from .cohort import CohortSpec, generate_cohort
from .crossval import (
    CVReport,
    EncoderCache,
    PRESETS,
    RunConfig,
    TABLE3_PRESETS,
    cross_validate,
    load_cohort,
)
from .dataio import read_manifest
from .errors import (
    ArtifactKindError,
    CardiofuseError,
    ConfigurationError,
    TrainingError,
)
from .estimators import load_checkpoint, save_checkpoint
from .importance import build_importance_report, export_importance
from .models import EncoderConfig, FusionConfig
from .training import TrainConfig

logger = logging.getLogger("cardiofuse")

_SECTIONS = ("run", "schema", "encoder", "fusion", "train",
              "train.encoder", "train.fusion", "train.ehr")

_RUN_KEYS = {"preset": str, "seed": int, "k": int, "stratified": bool}
_SCHEMA_KEYS = {
    "window_days": tuple,
    "coverage_threshold": float,
    "imputation_scope": str,
}


def _coerce(name: str, target_type, raw: str):
    try:
        if target_type is bool:
            lowered = raw.strip().lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        if target_type is tuple:
            return tuple(int(part) for part in raw.replace(" ", "").split(","))
        return raw
    except ValueError as exc:
        raise ConfigurationError(f"cannot parse {name}={raw!r}: {exc}") from exc


def _dataclass_types(cls) -> dict[str, type]:
    out = {}
    for f in dataclasses.fields(cls):
        origin = getattr(f.type, "__origin__", None)
        if f.type in ("int", int):
            out[f.name] = int
        elif f.type in ("float", float):
            out[f.name] = float
        elif f.type in ("bool", bool):
            out[f.name] = bool
        elif origin is tuple or "tuple" in str(f.type):
            out[f.name] = tuple
        else:
            out[f.name] = str
    return out


def _collect_overrides(config_path: str | None, sets: list[str]) -> dict[str, dict[str, str]]:
    values: dict[str, dict[str, str]] = {section: {} for section in _SECTIONS}
    if config_path:
        parser = configparser.ConfigParser()
        read = parser.read(config_path)
        if not read:
            raise ConfigurationError(f"config file not found: {config_path}")
        for section in parser.sections():
            if section not in values:
                raise ConfigurationError(
                    f"unknown config section [{section}]; valid: {_SECTIONS}"
                )
            for key, raw in parser.items(section):
                values[section][key] = raw
    for item in sets or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        section, _, key = dotted.rpartition(".")
        if section not in values:
            raise ConfigurationError(f"--set: unknown section {section!r} in {item!r}")
        values[section][key] = raw
    return values


def _apply(section: str, raw_values: dict[str, str], types: dict[str, type]) -> dict:
    out = {}
    for key, raw in raw_values.items():
        if key not in types:
            raise ConfigurationError(f"unknown key {key!r} in section [{section}]")
        out[key] = _coerce(f"{section}.{key}", types[key], raw)
    return out


def build_run_config(args) -> RunConfig:
    """Resolve file + --set + flag layers into a validated RunConfig."""
    values = _collect_overrides(getattr(args, "config", None), getattr(args, "set", None))

    run_kwargs = _apply("run", values["run"], _RUN_KEYS)
    schema_kwargs = _apply("schema", values["schema"], _SCHEMA_KEYS)
    encoder_kwargs = _apply("encoder", values["encoder"], _dataclass_types(EncoderConfig))
    fusion_kwargs = _apply("fusion", values["fusion"], _dataclass_types(FusionConfig))
    train_types = _dataclass_types(TrainConfig)
    base_train = _apply("train", values["train"], train_types)
    stage_train = {
        stage: {**base_train, **_apply(f"train.{stage}", values[f"train.{stage}"], train_types)}
        for stage in ("encoder", "fusion", "ehr")
    }

    if getattr(args, "preset", None):
        run_kwargs["preset"] = args.preset
    if getattr(args, "seed", None) is not None:
        run_kwargs["seed"] = args.seed
    if getattr(args, "imputation_scope", None):
        schema_kwargs["imputation_scope"] = args.imputation_scope
    if "preset" not in run_kwargs:
        raise ConfigurationError("a preset is required (flag --preset or [run] preset)")

    try:
        run = RunConfig(
            preset=run_kwargs["preset"],
            seed=run_kwargs.get("seed", 0),
            k=run_kwargs.get("k", 5),
            stratified=run_kwargs.get("stratified", True),
            imputation_scope=schema_kwargs.get("imputation_scope", "train"),
            window_days=schema_kwargs.get("window_days", (-90, 30)),
            coverage_threshold=schema_kwargs.get("coverage_threshold", 0.1),
            encoder_config=EncoderConfig(**encoder_kwargs),
            fusion_config=FusionConfig(**fusion_kwargs),
            train_encoder=TrainConfig(**stage_train["encoder"]),
            train_fusion=TrainConfig(**stage_train["fusion"]),
            train_ehr=TrainConfig(**stage_train["ehr"]),
        )
    except TypeError as exc:
        raise ConfigurationError(f"bad configuration: {exc}") from exc
    run.validate()
    return run


def _out_root(args) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get("CARDIOFUSE_OUT", "runs"))


def _manifest_path(dataset: str) -> Path:
    path = Path(dataset)
    return path / "manifest.csv" if path.is_dir() else path


def _write_train_log(path: Path, report: CVReport) -> None:
    lines = []
    for fold, model in zip(report.folds, report.fold_models):
        history = getattr(model, "history_", None)
        if history is None:
            continue
        for epoch, loss in enumerate(history.epoch_losses):
            lines.append(f"fold={fold.fold} kind={model.kind_} epoch={epoch} loss={loss:.6f}")
        lines.append(
            f"fold={fold.fold} kind={model.kind_} wall_time_s={history.wall_time_s:.3f}"
        )
    path.write_text("\n".join(lines) + "\n")


def cmd_synth(args) -> int:
    spec = CohortSpec(
        n_patients=args.n,
        prevalence=args.prevalence,
        seed=args.seed,
        n_lab_codes=args.n_lab_codes,
        lab_missingness=args.lab_missingness,
        signal_ehr=args.signal_ehr,
        signal_plax=args.signal_plax,
        signal_a4c=args.signal_a4c,
        frames_per_clip=args.frames,
        frame_size=args.frame_size,
    )
    manifest = generate_cohort(spec, args.out)
    rows = read_manifest(manifest)
    n_pos = sum(1 for row in rows if row["label"] == "1")
    print(f"manifest: {manifest}")
    print(f"patients: {len(rows)} ({n_pos} positive, {len(rows) - n_pos} negative)")
    return 0


def _run_cv_preset(run: RunConfig, dataset, cache: EncoderCache, out_dir: Path,
                   n_jobs: int) -> CVReport:
    report = cross_validate(run, dataset, cache=cache, n_jobs=n_jobs, keep_models=True)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write_csv(out_dir / "report.csv")
    report.write_json(out_dir / "report.json")
    _write_train_log(out_dir / "train.log", report)
    preset = PRESETS[run.preset]
    for fold, (model, schema) in enumerate(zip(report.fold_models, report.fold_schemas)):
        if schema is not None:
            schema.save(out_dir / f"schema-fold{fold}.json")
        save_checkpoint(
            model,
            out_dir / f"fold{fold}.ckpt",
            schema=schema,
            extra={"preset": run.preset, "fold": fold,
                   "component_drop": list(preset.drop)},
        )
    return report


def cmd_cv(args) -> int:
    run = build_run_config(args)
    dataset = load_cohort(_manifest_path(args.dataset))
    out_dir = _out_root(args) / f"cv-{run.preset}-seed{run.seed}-{run.fingerprint()}"
    report = _run_cv_preset(run, dataset, EncoderCache(), out_dir, args.parallel_folds)
    for line in report.csv_lines():
        print(line)
    print(f"outputs: {out_dir}")
    return 0


def cmd_ablate(args) -> int:
    dataset = load_cohort(_manifest_path(args.dataset))
    cache = EncoderCache()
    reports = []
    base_fingerprint = None
    out_root = _out_root(args)
    for preset_name in TABLE3_PRESETS:
        args.preset = preset_name
        run = build_run_config(args)
        if base_fingerprint is None:
            base_fingerprint = run.fingerprint()
            out_dir = out_root / f"ablate-seed{run.seed}-{base_fingerprint}"
        report = _run_cv_preset(run, dataset, cache, out_dir / preset_name,
                                args.parallel_folds)
        reports.append(report)

    lines = ["preset,demo_vitals,metrics,labs,Accuracy,Sensitivity,Specificity,AUROC"]
    for report in reports:
        drop = set(PRESETS[report.preset].drop)
        flags = ",".join("0" if c in drop else "1" for c in ("demo_vitals", "metrics", "labs"))
        m = report.means
        lines.append(
            f"{report.preset},{flags},{m['accuracy']:.6f},{m['sensitivity']:.6f},"
            f"{m['specificity']:.6f},{m['auroc']:.6f}"
        )
    (out_dir / "ablation.csv").write_text("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    print(f"outputs: {out_dir}")
    return 0


def cmd_importance(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if model.kind_ != "intermediate_fusion":
        raise ArtifactKindError(
            f"importance needs an intermediate_fusion checkpoint, got {model.kind_!r}"
        )
    dataset = load_cohort(_manifest_path(args.dataset))
    schema = model.schema_
    from .ehr import component_mask, vectorize
    import numpy as np

    drop = set(model.encoder_provenance_.get("component_drop", []))
    keep = component_mask(schema, drop).astype(np.float64)
    ehr = np.stack([vectorize(r, schema).values for r in dataset.records]) * keep
    sampled = model.net_.plax_encoder.config.sampled_frames
    X = dataset.model_inputs(range(len(dataset.records)), ehr,
                             ("ehr", "plax", "a4c"), sampled)
    report = build_importance_report(model, X, layer_mode=args.layer_mode)
    ckpt_stem = Path(args.checkpoint).stem
    out_dir = _out_root(args) / f"importance-{ckpt_stem}-{dataset.fingerprint}"
    paths = export_importance(report, out_dir, plots=args.plots)
    for path in paths:
        print(f"wrote: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cardiofuse",
        description="Multimodal echo + EHR classification pipeline "
                    "(synthetic cohorts, cross-validation, importance analysis).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic cohort dataset")
    synth.add_argument("--n", type=int, required=True, help="number of patients")
    synth.add_argument("--prevalence", type=float, required=True)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--n-lab-codes", type=int, default=20)
    synth.add_argument("--lab-missingness", type=float, default=0.2)
    synth.add_argument("--signal-ehr", type=float, default=0.0)
    synth.add_argument("--signal-plax", type=float, default=0.0)
    synth.add_argument("--signal-a4c", type=float, default=0.0)
    synth.add_argument("--frames", type=int, default=30)
    synth.add_argument("--frame-size", type=int, default=32)
    synth.add_argument("--out", required=True, help="dataset directory to write")
    synth.set_defaults(func=cmd_synth)

    def add_run_args(p, needs_preset: bool):
        p.add_argument("--dataset", required=True, help="dataset directory or manifest path")
        if needs_preset:
            p.add_argument("--preset", required=False, choices=sorted(PRESETS),
                           help="experiment preset to run")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", help="INI config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override any config field (repeatable)")
        p.add_argument("--imputation-scope", choices=("train", "all"), default=None)
        p.add_argument("--parallel-folds", type=int, default=1,
                       help="fold worker threads; results equal serial execution")
        p.add_argument("--out", help="output root (default $CARDIOFUSE_OUT or ./runs)")

    cv = sub.add_parser("cv", help="run one preset under k-fold cross-validation")
    add_run_args(cv, needs_preset=True)
    cv.set_defaults(func=cmd_cv)

    ablate = sub.add_parser("ablate", help="run the four EHR-component ablation presets")
    add_run_args(ablate, needs_preset=False)
    ablate.set_defaults(func=cmd_ablate, preset=None)

    imp = sub.add_parser("importance", help="export importance tables for a checkpoint")
    imp.add_argument("--checkpoint", required=True)
    imp.add_argument("--dataset", required=True)
    imp.add_argument("--layer-mode", choices=("final", "mean"), default="final")
    imp.add_argument("--plots", action="store_true", help="also write pie-chart images")
    imp.add_argument("--out", help="output root (default $CARDIOFUSE_OUT or ./runs)")
    imp.set_defaults(func=cmd_importance)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingError as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return 3
    except ArtifactKindError as exc:
        print(f"artifact mismatch: {exc}", file=sys.stderr)
        return 4
    except CardiofuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
