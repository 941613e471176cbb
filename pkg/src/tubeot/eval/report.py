"""Evaluation reports: a versioned JSON document plus a flat CSV summary.

Both are pure functions of their inputs; nothing time- or host-dependent is
recorded, so identical runs produce identical files.
"""

from __future__ import annotations

import csv
from collections.abc import Sequence
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field

from tubeot.errors import DataIOError
from tubeot.eval.probe import ProbeResult
from tubeot.eval.segmentation import METHODS, BenchmarkResult

REPORT_SCHEMA_VERSION = 1


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ProbeReport(_Model):
    format: Literal["tubeot-probe-report"] = "tubeot-probe-report"
    schema_version: int = REPORT_SCHEMA_VERSION
    checkpoint: str
    config: dict[str, Any]
    accuracy: float
    train_accuracy: float
    per_class_accuracy: dict[str, float] = Field(default_factory=dict)
    n_train: int
    n_test: int
    n_classes: int

    @classmethod
    def build(cls, result: ProbeResult, *, checkpoint: str, config: dict[str, Any]) -> ProbeReport:
        return cls(
            checkpoint=checkpoint,
            config=config,
            accuracy=result.accuracy,
            train_accuracy=result.train_accuracy,
            per_class_accuracy={str(k): v for k, v in sorted(result.per_class_accuracy.items())},
            n_train=result.n_train,
            n_test=result.n_test,
            n_classes=result.n_classes,
        )

    def summary_rows(self) -> list[dict[str, Any]]:
        rows: list[dict[str, Any]] = [
            {"metric": "accuracy", "value": self.accuracy},
            {"metric": "train_accuracy", "value": self.train_accuracy},
        ]
        rows += [
            {"metric": f"class_{label}_accuracy", "value": value}
            for label, value in self.per_class_accuracy.items()
        ]
        return rows


class ClipScoreEntry(_Model):
    clip_id: str
    regime: str
    method: str
    k: int
    miou: float


class SegmentationAggregate(_Model):
    regime: str
    method: str
    mean_k: float
    mean_miou: float
    n_clips: int
    skipped: int


class SegmentationReport(_Model):
    format: Literal["tubeot-segmentation-report"] = "tubeot-segmentation-report"
    schema_version: int = REPORT_SCHEMA_VERSION
    checkpoint: str
    config: dict[str, Any]
    aggregates: list[SegmentationAggregate] = Field(default_factory=list)
    clips: list[ClipScoreEntry] = Field(default_factory=list)

    @classmethod
    def build(
        cls,
        results: Sequence[BenchmarkResult],
        *,
        checkpoint: str,
        config: dict[str, Any],
    ) -> SegmentationReport:
        aggregates = [
            SegmentationAggregate(
                regime=result.regime,
                method=method,
                mean_k=result.mean_k(),
                mean_miou=result.mean_miou(method),
                n_clips=result.n_clips,
                skipped=result.skipped,
            )
            for result in results
            for method in METHODS
        ]
        clips = [
            ClipScoreEntry(
                clip_id=score.clip_id,
                regime=score.regime,
                method=score.method,
                k=score.k,
                miou=score.miou,
            )
            for result in results
            for score in result.scores
        ]
        return cls(checkpoint=checkpoint, config=config, aggregates=aggregates, clips=clips)

    def summary_rows(self) -> list[dict[str, Any]]:
        return [aggregate.model_dump() for aggregate in self.aggregates]


def write_report(report: BaseModel, path: Path) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc
    return path


def write_summary_csv(rows: Sequence[dict[str, Any]], path: Path) -> Path:
    """One CSV with the keys of the first row as header."""
    if not rows:
        raise DataIOError(f"nothing to write to {path}")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.DictWriter(handle, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc
    return path
