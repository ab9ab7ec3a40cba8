"""Macro metrics over coded attributes, plus report serialisation.

Accuracy is plain trace-over-total for each attribute. Precision, recall,
and F1 are computed per class and macro-averaged with equal class weight,
skipping classes that appear in neither truth nor prediction. Groups
average their member attributes; the overall quartet averages the groups,
so small groups weigh as much as large ones.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .assessment import RoadPrediction, StarConfusion
from .codebook import AttributeGroup, Codebook
from .dataset import SegmentRecord
from .errors import EmptyMatrix, SegmentMismatch

# Predicted-axis marker for segments where no valid class survived parsing.
# Never a real class code, never a truth label, never part of the macro.
MISSING_LABEL = "__none__"


@dataclass(frozen=True)
class ConfusionMatrix:
    attribute_id: str
    labels: tuple[str, ...]
    counts: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        n = len(self.labels)
        if len(set(self.labels)) != n:
            raise ValueError(f"{self.attribute_id}: duplicate labels")
        if len(self.counts) != n or any(len(row) != n for row in self.counts):
            raise ValueError(f"{self.attribute_id}: counts must be {n}x{n}")
        if any(cell < 0 for row in self.counts for cell in row):
            raise ValueError(f"{self.attribute_id}: negative count")

    def total(self) -> int:
        return sum(sum(row) for row in self.counts)

    def trace(self) -> int:
        return sum(self.counts[i][i] for i in range(len(self.labels)))


@dataclass(frozen=True)
class MetricQuartet:
    accuracy: float
    precision: float
    recall: float
    f1: float

    def as_dict(self) -> dict[str, float]:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


@dataclass(frozen=True)
class MetricsReport:
    per_attribute: Mapping[str, MetricQuartet]
    per_group: Mapping[str, MetricQuartet]
    overall: MetricQuartet
    coverage: Mapping[str, float]


def confusion_from_pairs(
    attribute_id: str,
    pairs: Sequence[tuple[str, str | None]],
    labels: Sequence[str],
) -> ConfusionMatrix:
    """Count (truth, predicted) pairs; None predictions fill a __none__ column."""
    axis = list(labels)
    if any(predicted is None for _, predicted in pairs):
        axis.append(MISSING_LABEL)
    index = {label: i for i, label in enumerate(axis)}
    counts = [[0] * len(axis) for _ in axis]
    for truth, predicted in pairs:
        if truth not in index or truth == MISSING_LABEL:
            raise ValueError(f"{attribute_id}: truth label {truth!r} not in labels")
        slot = MISSING_LABEL if predicted is None else predicted
        if slot not in index:
            raise ValueError(f"{attribute_id}: predicted label {slot!r} not in labels")
        counts[index[truth]][index[slot]] += 1
    return ConfusionMatrix(
        attribute_id=attribute_id,
        labels=tuple(axis),
        counts=tuple(tuple(row) for row in counts),
    )


def attribute_metrics(matrix: ConfusionMatrix) -> MetricQuartet:
    """Accuracy plus class-macro precision, recall, and F1 for one attribute."""
    total = matrix.total()
    if total == 0:
        raise EmptyMatrix(f"{matrix.attribute_id}: no counts to evaluate")
    accuracy = matrix.trace() / total

    precisions: list[float] = []
    recalls: list[float] = []
    f1s: list[float] = []
    for i, label in enumerate(matrix.labels):
        if label == MISSING_LABEL:
            continue
        row_sum = sum(matrix.counts[i])
        col_sum = sum(row[i] for row in matrix.counts)
        if row_sum == 0 and col_sum == 0:
            continue
        tp = matrix.counts[i][i]
        precision = tp / col_sum if col_sum else 0.0
        recall = tp / row_sum if row_sum else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        precisions.append(precision)
        recalls.append(recall)
        f1s.append(f1)

    def _mean(values: list[float]) -> float:
        return sum(values) / len(values) if values else 0.0

    return MetricQuartet(
        accuracy=accuracy,
        precision=_mean(precisions),
        recall=_mean(recalls),
        f1=_mean(f1s),
    )


def _pair_by_segment(
    predictions: Sequence[RoadPrediction], truths: Sequence[SegmentRecord]
) -> list[tuple[SegmentRecord, RoadPrediction]]:
    by_id: dict[str, RoadPrediction] = {}
    for prediction in predictions:
        if prediction.segment_id in by_id:
            raise SegmentMismatch(f"duplicate prediction for segment {prediction.segment_id}")
        by_id[prediction.segment_id] = prediction
    seen: set[str] = set()
    paired = []
    for segment in truths:
        if segment.segment_id in seen:
            raise SegmentMismatch(f"duplicate truth segment {segment.segment_id}")
        seen.add(segment.segment_id)
        if segment.segment_id not in by_id:
            raise SegmentMismatch(f"no prediction for segment {segment.segment_id}")
        paired.append((segment, by_id[segment.segment_id]))
    extra = set(by_id) - seen
    if extra:
        raise SegmentMismatch(f"predictions for unknown segments {sorted(extra)}")
    # Canonical order so reports never depend on input order.
    paired.sort(key=lambda item: item[0].segment_id)
    return paired


def confusion_matrices(
    predictions: Sequence[RoadPrediction],
    truths: Sequence[SegmentRecord],
    codebook: Codebook,
    *,
    include_missing: bool = True,
) -> dict[str, ConfusionMatrix]:
    """One matrix per attribute with ground truth, keyed by attribute id.

    `include_missing` keeps segments whose prediction resolved no class for
    the attribute, scoring them as wrong; turning it off drops them from the
    matrix instead.
    """
    paired = _pair_by_segment(predictions, truths)
    matrices: dict[str, ConfusionMatrix] = {}
    for attr in codebook:
        pairs: list[tuple[str, str | None]] = []
        for segment, prediction in paired:
            truth = segment.ground_truth.get(attr.id)
            if truth is None:
                continue
            predicted = prediction.aggregated.get(attr.id)
            if predicted is None and not include_missing:
                continue
            pairs.append((truth, predicted))
        if pairs:
            matrices[attr.id] = confusion_from_pairs(attr.id, pairs, attr.codes())
    return matrices


def build_report(
    predictions: Sequence[RoadPrediction],
    truths: Sequence[SegmentRecord],
    codebook: Codebook,
    *,
    include_missing: bool = True,
) -> MetricsReport:
    """Per-attribute, per-group, and overall macro quartets plus coverage."""
    paired = _pair_by_segment(predictions, truths)
    matrices = confusion_matrices(
        predictions, truths, codebook, include_missing=include_missing
    )

    per_attribute: dict[str, MetricQuartet] = {}
    coverage: dict[str, float] = {}
    for attr_id in sorted(matrices):
        per_attribute[attr_id] = attribute_metrics(matrices[attr_id])
    for attr in codebook:
        scored = [
            prediction.aggregated.get(attr.id)
            for segment, prediction in paired
            if attr.id in segment.ground_truth
        ]
        if scored:
            coverage[attr.id] = sum(code is not None for code in scored) / len(scored)

    def _mean_quartet(quartets: Iterable[MetricQuartet]) -> MetricQuartet:
        rows = list(quartets)
        n = len(rows)
        return MetricQuartet(
            accuracy=sum(q.accuracy for q in rows) / n,
            precision=sum(q.precision for q in rows) / n,
            recall=sum(q.recall for q in rows) / n,
            f1=sum(q.f1 for q in rows) / n,
        )

    per_group: dict[str, MetricQuartet] = {}
    for group in AttributeGroup:
        members = [
            per_attribute[attr.id]
            for attr in codebook
            if attr.group is group and attr.id in per_attribute
        ]
        if members:
            per_group[group.value] = _mean_quartet(members)
    if not per_group:
        raise EmptyMatrix("no attribute had any ground truth to evaluate")
    overall = _mean_quartet(per_group.values())
    return MetricsReport(
        per_attribute=per_attribute,
        per_group=per_group,
        overall=overall,
        coverage=coverage,
    )


def write_report_json(
    report: MetricsReport,
    path: str | Path,
    run_manifest: Mapping[str, str] | None = None,
) -> None:
    """Full-precision report document; keys sorted for stable bytes."""
    payload = {
        "overall": report.overall.as_dict(),
        "per_group": {name: q.as_dict() for name, q in report.per_group.items()},
        "per_attribute": {name: q.as_dict() for name, q in report.per_attribute.items()},
        "coverage": dict(report.coverage),
    }
    if run_manifest is not None:
        payload["run_manifest"] = dict(run_manifest)
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def _manifest_comment(run_manifest: Mapping[str, str]) -> str:
    fields = " ".join(f"{key}={run_manifest[key]}" for key in sorted(run_manifest))
    return f"# run-manifest {fields}"


def write_report_csv(
    report: MetricsReport,
    path: str | Path,
    run_manifest: Mapping[str, str] | None = None,
) -> None:
    """Presentation table: overall row, one row per group, one per attribute."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if run_manifest is not None:
            fh.write(_manifest_comment(run_manifest) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["scope", "name", "accuracy", "precision", "recall", "f1", "coverage"])

        def _row(scope: str, name: str, quartet: MetricQuartet, cov: float | None) -> None:
            writer.writerow(
                [
                    scope,
                    name,
                    f"{quartet.accuracy:.2f}",
                    f"{quartet.precision:.2f}",
                    f"{quartet.recall:.2f}",
                    f"{quartet.f1:.2f}",
                    "" if cov is None else f"{cov:.2f}",
                ]
            )

        _row("overall", "all groups", report.overall, None)
        for name, quartet in report.per_group.items():
            _row("group", name, quartet, None)
        for name in sorted(report.per_attribute):
            _row("attribute", name, report.per_attribute[name], report.coverage.get(name))


def write_confusion_csv(
    matrix: ConfusionMatrix,
    path: str | Path,
    run_manifest: Mapping[str, str] | None = None,
) -> None:
    """Square table with truth down the rows and predictions across."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if run_manifest is not None:
            fh.write(_manifest_comment(run_manifest) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["truth\\predicted", *matrix.labels])
        for label, row in zip(matrix.labels, matrix.counts):
            writer.writerow([label, *row])


def write_star_matrix_csv(
    confusion: StarConfusion,
    path: str | Path,
    run_manifest: Mapping[str, str] | None = None,
) -> None:
    """Star-rating confusion with the high-risk binary summary appended."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if run_manifest is not None:
            fh.write(_manifest_comment(run_manifest) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["truth\\predicted", "1", "2", "3", "4", "5"])
        for stars, row in enumerate(confusion.matrix, start=1):
            writer.writerow([str(stars), *row])
        writer.writerow([])
        writer.writerow(["high risk (< 3 stars)", "predicted low", "predicted high"])
        writer.writerow(["truth low", confusion.high_risk[0][0], confusion.high_risk[0][1]])
        writer.writerow(["truth high", confusion.high_risk[1][0], confusion.high_risk[1][1]])
