"""Modality and EHR-entry importance from a trained intermediate-fusion model.

Modality importance reads the CLS row of the transformer attention (final
layer by default, head-averaged), drops the CLS self-attention mass and
renormalizes over the EHR/PLAX/A4C tokens, then averages over samples.

Entry importance is the column-wise L1 mass of the first EHR embedding
layer, normalized to a simplex; component importance sums those entry
weights per feature block. All outputs are non-negative and sum to one.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .ehr import FeatureSchema
from .errors import ArtifactKindError, ValidationError
from .estimators import IntermediateFusionModel
from .models import FUSION_TOKEN_ORDER

MODALITY_ORDER = ("EHR", "PLAX", "A4C")
COMPONENT_ORDER = ("demo_vitals", "metrics", "labs")


@dataclass
class ImportanceReport:
    modality_weights: dict[str, float]
    ehr_component_weights: dict[str, float]
    ehr_entry_weights: dict[str, float]


def _check_kind(model) -> None:
    if getattr(model, "kind_", None) != "intermediate_fusion":
        raise ArtifactKindError(
            f"importance analysis needs an intermediate_fusion model, "
            f"got {getattr(model, 'kind_', None)!r}"
        )


def modality_importance(
    model: IntermediateFusionModel, X: dict, layer_mode: str = "final"
) -> dict[str, float]:
    """Average share of CLS attention each modality token receives.

    ``layer_mode`` "final" uses the last transformer layer; "mean" averages
    all layers before aggregating.
    """
    _check_kind(model)
    if layer_mode not in ("final", "mean"):
        raise ValidationError(f"layer_mode must be 'final' or 'mean', got {layer_mode!r}")
    attns = model.attention_maps(X)  # list of [N, heads, T, T]
    if not attns:
        raise ValidationError("model produced no attention maps")
    stacked = torch.stack(attns)  # [L, N, heads, T, T]
    layers = stacked[-1:] if layer_mode == "final" else stacked
    cls_rows = layers.mean(dim=0).mean(dim=1)[:, 0, :]  # [N, T], head-averaged CLS row
    modal = cls_rows[:, 1:]  # drop CLS self-attention mass
    mass = modal.sum(dim=1, keepdim=True).clamp_min(1e-12)
    weights = (modal / mass).mean(dim=0)
    token_names = FUSION_TOKEN_ORDER[1:]
    return {name: float(weights[i]) for i, name in enumerate(token_names)}


def ehr_entry_importance(model: IntermediateFusionModel) -> dict[str, float]:
    """Per-feature share of the first EHR mapping layer's absolute weight mass.

    A pure function of the checkpointed weights: the score of entry j is
    sum_i |W[i, j]|, normalized to sum to one over entries.
    """
    _check_kind(model)
    schema: FeatureSchema | None = getattr(model, "schema_", None)
    if schema is None:
        raise ValidationError("model has no feature schema attached; cannot name entries")
    weight = model.net_.ehr_mapping_weight.detach().cpu().numpy()
    if weight.shape[1] != schema.n_features:
        raise ValidationError(
            f"schema has {schema.n_features} features but the mapping layer "
            f"has {weight.shape[1]} columns"
        )
    scores = np.abs(weight).sum(axis=0)
    total = scores.sum()
    if total <= 0:
        raise ValidationError("EHR mapping layer is all-zero; importance undefined")
    weights = scores / total
    return {name: float(weights[j]) for j, name in enumerate(schema.feature_names)}


def ehr_component_importance(
    model: IntermediateFusionModel,
) -> tuple[dict[str, float], dict[str, float]]:
    """(component weights, entry weights): block sums of the entry simplex."""
    entries = ehr_entry_importance(model)
    schema: FeatureSchema = model.schema_
    names = schema.feature_names
    components = {}
    for component, block in schema.block_slices().items():
        components[component] = float(sum(entries[n] for n in names[block]))
    return components, entries


def build_importance_report(
    model: IntermediateFusionModel, X: dict, layer_mode: str = "final"
) -> ImportanceReport:
    components, entries = ehr_component_importance(model)
    return ImportanceReport(
        modality_weights=modality_importance(model, X, layer_mode),
        ehr_component_weights=components,
        ehr_entry_weights=entries,
    )


def _write_weight_csv(path: Path, rows: list[tuple[str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("name", "weight"))
        for name, weight in rows:
            writer.writerow((name, repr(float(weight))))


def export_importance(
    report: ImportanceReport, out_dir: str | Path, plots: bool = False
) -> list[Path]:
    """Write the three importance tables (and optional pie charts).

    Files: modality_importance.csv (3 rows, fixed EHR/PLAX/A4C order),
    ehr_component_importance.csv (3 rows), ehr_entry_importance.csv (one row
    per feature, descending by weight, name as tiebreak). Re-exporting the
    same report overwrites identically.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    modality_rows = [(m, report.modality_weights[m]) for m in MODALITY_ORDER]
    component_rows = [(c, report.ehr_component_weights[c]) for c in COMPONENT_ORDER]
    entry_rows = sorted(report.ehr_entry_weights.items(), key=lambda kv: (-kv[1], kv[0]))

    paths = [
        out_dir / "modality_importance.csv",
        out_dir / "ehr_component_importance.csv",
        out_dir / "ehr_entry_importance.csv",
    ]
    _write_weight_csv(paths[0], modality_rows)
    _write_weight_csv(paths[1], component_rows)
    _write_weight_csv(paths[2], entry_rows)

    if plots:
        paths += _write_pie_charts(out_dir, modality_rows, component_rows, entry_rows)
    return paths


def _write_pie_charts(out_dir: Path, modality_rows, component_rows, entry_rows) -> list[Path]:
    try:
        import matplotlib
    except ImportError as exc:
        raise ValidationError(
            "pie charts need matplotlib; install the 'plots' extra"
        ) from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    charts = (
        ("modality_importance.png", modality_rows, "Modality importance"),
        ("ehr_component_importance.png", component_rows, "EHR component importance"),
        ("ehr_entry_importance.png", entry_rows[:12], "Top EHR entries"),
    )
    for filename, rows, title in charts:
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.pie([w for _, w in rows], labels=[n for n, _ in rows], autopct="%.1f%%")
        ax.set_title(title)
        path = out_dir / filename
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written
