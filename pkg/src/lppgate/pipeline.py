"""End-to-end orchestration shared by the CLI, the ablation runner, and the
acceptance suite: feature tables, file formats, and the stage functions
(extract, split, train, sweep, evaluate, ablate)."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import evaluation, policy, trainer
from .dataset import (
    LabeledExample,
    ResampleConfig,
    SplitSpec,
    label_correctness,
    make_example,
    resample,
    stratified_split,
)
from .features import (
    ALL_FAMILIES,
    DEFAULT_TOP_K,
    FeatureEntry,
    FeatureFamily,
    FeatureVector,
    NoLabelMass,
    assemble_feature_vector,
)
from .manifest import write_json_atomic, write_text_atomic
from .policy import CostModel, PolicyResult, cost_ratio_sensitivity, decisions_at, sweep_threshold
from .schema import OutcomeLabel, ResponseTrace
from .trainer import TrainedGate, cross_fit_calibrated, grid_search, predict_score

__all__ = [
    "FeatureTable",
    "extract_table",
    "save_features",
    "load_features",
    "save_labels",
    "load_labels",
    "write_id_list",
    "read_id_list",
    "build_examples",
    "split_examples",
    "train_gate",
    "sweep_gate",
    "evaluate_methods",
    "run_ablation",
    "PROFILE_TEST_NEGATIVES",
]

#: Dataset profiles fix the number of negative (error) cases in the test
#: split: 150 for the text profile, 45 for the multimodal profile.
PROFILE_TEST_NEGATIVES = {"openai-mod": 150, "multimodal": 45}


@dataclass
class FeatureTable:
    item_ids: list[str]
    names: list[str]
    matrix: np.ndarray
    families: dict[str, str]
    invalid_ids: list[str] = field(default_factory=list)

    def row_map(self) -> dict[str, int]:
        return {item: i for i, item in enumerate(self.item_ids)}

    def submatrix(self, ids: Sequence[str]) -> np.ndarray:
        rows = self.row_map()
        return self.matrix[[rows[i] for i in ids]]


def extract_table(
    traces: Iterable[ResponseTrace],
    include: Iterable[FeatureFamily] = ALL_FAMILIES,
    k: int = DEFAULT_TOP_K,
) -> FeatureTable:
    """Assemble one feature row per trace, in item_id order.

    Rows that raise NoLabelMass are excluded from the matrix and listed in
    invalid_ids, to be escalated by default downstream.
    """
    ordered = sorted(traces, key=lambda t: t.item_id)
    item_ids: list[str] = []
    rows: list[np.ndarray] = []
    names: list[str] | None = None
    families: dict[str, str] = {}
    invalid: list[str] = []
    for trace in ordered:
        try:
            fv = assemble_feature_vector(trace, include, k=k)
        except NoLabelMass:
            invalid.append(trace.item_id)
            continue
        if names is None:
            names = fv.qualified_names()
            families = fv.families()
        elif fv.qualified_names() != names:
            raise ValueError(f"inconsistent feature names at {trace.item_id!r}")
        item_ids.append(trace.item_id)
        rows.append(fv.values())
    if names is None:
        raise ValueError("no valid traces to extract features from")
    return FeatureTable(item_ids, names, np.stack(rows), families, invalid)


def save_features(table: FeatureTable, csv_path, sidecar_path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["item_id"] + table.names)
    for item_id, row in zip(table.item_ids, table.matrix):
        writer.writerow([item_id] + [repr(float(v)) for v in row])
    write_text_atomic(csv_path, buf.getvalue())
    write_json_atomic(
        sidecar_path,
        {
            "families": {
                fam.value: [n for n in table.names if table.families[n] == fam.value]
                for fam in ALL_FAMILIES
                if any(v == fam.value for v in table.families.values())
            },
            "invalid_items": sorted(table.invalid_ids),
        },
    )


def load_features(csv_path, sidecar_path) -> FeatureTable:
    import json

    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        names = header[1:]
        item_ids, rows = [], []
        for record in reader:
            item_ids.append(record[0])
            rows.append([float(v) for v in record[1:]])
    with open(sidecar_path, encoding="utf-8") as fh:
        sidecar = json.load(fh)
    families = {n: fam for fam, ns in sidecar["families"].items() for n in ns}
    return FeatureTable(
        item_ids, names, np.asarray(rows, dtype=float), families, sidecar.get("invalid_items", [])
    )


def save_labels(rows: Sequence, path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["item_id", "ground_truth", "llm_outcome"])
    for row in rows:
        writer.writerow([row.item_id, row.ground_truth, row.llm_outcome])
    write_text_atomic(path, buf.getvalue())


def load_labels(path) -> dict[str, tuple[int, OutcomeLabel]]:
    labels: dict[str, tuple[int, OutcomeLabel]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for record in csv.DictReader(fh):
            labels[record["item_id"]] = (
                int(record["ground_truth"]),
                OutcomeLabel(int(record["llm_outcome"])),
            )
    return labels


def write_id_list(ids: Sequence[str], path) -> None:
    write_text_atomic(path, "".join(f"{i}\n" for i in ids))


def read_id_list(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


def build_examples(
    table: FeatureTable, labels: Mapping[str, tuple[int, OutcomeLabel]]
) -> list[LabeledExample]:
    """Pair feature rows with labels; rows without labels are an error."""
    examples = []
    family_by_name = table.families
    for item_id, row in zip(table.item_ids, table.matrix):
        if item_id not in labels:
            raise KeyError(f"no label for item {item_id!r}")
        truth, outcome = labels[item_id]
        entries = tuple(
            FeatureEntry(
                name.split(".", 1)[1], FeatureFamily(family_by_name[name]), float(value)
            )
            for name, value in zip(table.names, row)
        )
        examples.append(make_example(item_id, FeatureVector(entries), outcome, truth))
    return examples


def split_examples(
    examples: Sequence[LabeledExample], spec: SplitSpec
) -> dict[str, list[str]]:
    train, validation, test = stratified_split(examples, spec)
    return {
        "train": [e.item_id for e in train],
        "validation": [e.item_id for e in validation],
        "test": [e.item_id for e in test],
    }


def _matrix_for(
    table: FeatureTable,
    labels: Mapping[str, tuple[int, OutcomeLabel]],
    ids: Sequence[str],
) -> tuple[np.ndarray, np.ndarray]:
    X = table.submatrix(ids)
    z = np.array([label_correctness(labels[i][1], labels[i][0]) for i in ids], dtype=int)
    return X, z


def train_gate(
    table: FeatureTable,
    labels: Mapping[str, tuple[int, OutcomeLabel]],
    train_ids: Sequence[str],
    resample_cfg: ResampleConfig | None = None,
    space: Sequence[trainer.RidgeConfig] | None = None,
    seed: int = 42,
) -> tuple[TrainedGate, dict]:
    """Resample the training split, grid-search the configuration, and fit
    the final cross-fit calibrated gate (threshold still unset)."""
    examples = build_examples(table, labels)
    by_id = {e.item_id: e for e in examples}
    train_examples = [by_id[i] for i in train_ids]
    if resample_cfg is None:
        resample_cfg = ResampleConfig(seed=seed)
    reduced, resample_report = resample(train_examples, resample_cfg)
    X = np.stack([e.features.values() for e in reduced])
    z = np.array([e.z for e in reduced], dtype=int)
    best_cfg, grid_report = grid_search(X, z, space=space, seed=seed)
    gate = cross_fit_calibrated(X, z, best_cfg, seed=seed, feature_names=table.names)
    report = {
        "resample": resample_report,
        "grid_size": len(grid_report),
        "chosen_config": {
            "alpha": best_cfg.alpha,
            "tol": best_cfg.tol,
            "max_iter": best_cfg.max_iter,
            "class_weight": best_cfg.class_weight,
            "calibration": best_cfg.calibration,
        },
        "grid": grid_report,
    }
    return gate, report


def sweep_gate(
    gate: TrainedGate,
    table: FeatureTable,
    labels: Mapping[str, tuple[int, OutcomeLabel]],
    validation_ids: Sequence[str],
    cost: CostModel,
    grid: np.ndarray | None = None,
) -> PolicyResult:
    """Choose tau* on validation scores and freeze it into the gate."""
    X_val, z_val = _matrix_for(table, labels, validation_ids)
    scores = predict_score(gate, table.names, X_val)
    result = sweep_threshold(scores, z_val, cost, grid)
    gate.tau_star = result.tau_star
    return result


def evaluate_methods(
    gate: TrainedGate,
    table: FeatureTable,
    labels: Mapping[str, tuple[int, OutcomeLabel]],
    validation_ids: Sequence[str],
    test_ids: Sequence[str],
    cost: CostModel,
    grid: np.ndarray | None = None,
    r_values: Sequence[float] = policy.DEFAULT_SENSITIVITY_RATIOS,
) -> dict[str, dict]:
    """Meta-model at its frozen threshold plus the three single-feature
    baselines (thresholds swept on validation) plus always-trust, all
    evaluated on the test split."""
    if gate.tau_star is None:
        raise ValueError("gate has no frozen threshold; run the sweep first")
    X_val, z_val = _matrix_for(table, labels, validation_ids)
    X_test, z_test = _matrix_for(table, labels, test_ids)

    results: dict[str, dict] = {}
    scores = predict_score(gate, table.names, X_test)
    decisions = decisions_at(scores, gate.tau_star)
    metrics = evaluation.compute_metrics(scores, decisions, z_test, cost)
    results["meta_model"] = {
        "tau_star": gate.tau_star,
        "metrics": metrics.to_dict(),
        "sensitivity": [
            {"r": r, "relative_cost": rel}
            for r, rel in cost_ratio_sensitivity(metrics.counts, r_values)
        ],
    }

    for spec in evaluation.BASELINES:
        val_policy, test_metrics = evaluation.run_baseline(
            spec, table.names, X_val, z_val, X_test, z_test, cost, grid
        )
        results[spec.feature] = {
            "tau_star": val_policy.tau_star,
            "metrics": test_metrics.to_dict(),
            "sensitivity": [
                {"r": r, "relative_cost": rel}
                for r, rel in cost_ratio_sensitivity(test_metrics.counts, r_values)
            ],
        }

    at_metrics = evaluation.always_trust_report(z_test, cost)
    results["always_trust"] = {"tau_star": None, "metrics": at_metrics.to_dict()}
    return results


def run_ablation(
    traces: Sequence[ResponseTrace],
    labels: Mapping[str, tuple[int, OutcomeLabel]],
    drop_families: Sequence[FeatureFamily],
    split_spec: SplitSpec,
    cost: CostModel,
    include: Iterable[FeatureFamily] = ALL_FAMILIES,
    resample_cfg: ResampleConfig | None = None,
    space: Sequence[trainer.RidgeConfig] | None = None,
    grid: np.ndarray | None = None,
    seed: int = 42,
    k: int = DEFAULT_TOP_K,
) -> list[dict]:
    """Re-run the full pipeline once per dropped family with the same seeds
    and report the test-cost delta against the full feature set."""
    include = tuple(include)

    def end_to_end(families: Iterable[FeatureFamily]) -> float:
        table = extract_table(traces, families, k=k)
        examples = build_examples(table, labels)
        ids = split_examples(examples, split_spec)
        gate, _ = train_gate(table, labels, ids["train"], resample_cfg, space, seed)
        sweep_gate(gate, table, labels, ids["validation"], cost, grid)
        X_test, z_test = _matrix_for(table, labels, ids["test"])
        scores = predict_score(gate, table.names, X_test)
        counts = policy.confusion(decisions_at(scores, gate.tau_star), z_test)
        return policy.expected_cost(counts, cost)

    full_cost = end_to_end(include)
    rows = []
    for family in drop_families:
        if family not in include:
            raise ValueError(f"family {family.value!r} not in the included set")
        remaining = tuple(f for f in include if f is not family)
        if not remaining:
            raise ValueError("cannot drop every feature family")
        cost_without = end_to_end(remaining)
        rows.append(
            {
                "dropped_family": family.value,
                "expected_cost": cost_without,
                "delta_vs_full": cost_without - full_cost,
                "full_cost": full_cost,
            }
        )
    return rows
