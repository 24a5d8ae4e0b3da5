"""Comparison-record data model and JSONL ingestion.

One record describes a single optimizer step: the prompt before the edit,
the prompt after it, the accuracies of both on a fixed evaluation set, and
the resulting gain. Records are immutable once loaded; any number of readers
may share a loaded collection.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .errors import IngestError

log = logging.getLogger(__name__)

TASK_GROUPS = ("commonsense", "math", "logical", "sequential", "multihop")

ANNOTATION_FEATURES = (
    "Clarity",
    "Engagement",
    "Politeness",
    "Intrinsic_load",
    "Extraneous_load",
    "Enc_germane_load",
    "Objectives",
    "Metacognition",
    "Demos",
    "Structural_logic",
    "Contextual_logic",
    "Hallucination_awareness",
)

# Bundled benchmark -> task-group table, applied only when a record carries
# no explicit task_group. Keys are matched case-insensitively.
DATASET_GROUPS = {
    "commonsenseqa": "commonsense",
    "commonsense_qa": "commonsense",
    "causal_judgement": "commonsense",
    "disambiguation_qa": "commonsense",
    "gsm8k": "math",
    "multiarith": "math",
    "boolean_expressions": "logical",
    "coin_flip": "logical",
    "last_letters": "sequential",
    "listops": "sequential",
    "strategyqa": "multihop",
    "date_understanding": "multihop",
}

GAIN_TOLERANCE = 1e-9


@dataclass(frozen=True)
class PromptState:
    """One prompt: instruction text plus its few-shot demo entries."""

    instruction_text: str
    demos: tuple[dict[str, str], ...] = ()
    raw_payload: Any = None

    def demo_text(self) -> str:
        """All demo values concatenated in key order, space separated."""
        parts = []
        for demo in self.demos:
            for key in sorted(demo):
                parts.append(str(demo[key]))
        return " ".join(parts)

    def to_json(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "instruction_text": self.instruction_text,
            "demos": [dict(d) for d in self.demos],
        }
        if self.raw_payload is not None:
            doc["raw_payload"] = self.raw_payload
        return doc


@dataclass(frozen=True)
class ComparisonRecord:
    pair_id: str
    framework: str
    backbone: str
    dataset: str
    task_group: str
    step_index: int
    before: PromptState
    after: PromptState
    accuracy_before: float
    accuracy_after: float
    gain: float
    annotations_before: dict[str, float] | None = None
    annotations_after: dict[str, float] | None = None
    extras: dict[str, Any] = field(default_factory=dict)

    @property
    def block_id(self) -> tuple[str, str]:
        return (self.dataset, self.backbone)

    def to_json(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "pair_id": self.pair_id,
            "framework": self.framework,
            "backbone": self.backbone,
            "dataset": self.dataset,
            "task_group": self.task_group,
            "step_index": self.step_index,
            "before": self.before.to_json(),
            "after": self.after.to_json(),
            "accuracy_before": self.accuracy_before,
            "accuracy_after": self.accuracy_after,
            "gain": self.gain,
        }
        if self.annotations_before is not None:
            doc["annotations_before"] = dict(self.annotations_before)
        if self.annotations_after is not None:
            doc["annotations_after"] = dict(self.annotations_after)
        doc.update(self.extras)
        return doc


@dataclass
class StoreStats:
    record_count: int
    per_dataset_counts: dict[str, int]
    per_group_counts: dict[str, int]
    per_block_counts: dict[tuple[str, str], int]
    skipped_count: int = 0

    def to_json(self) -> dict[str, Any]:
        return {
            "record_count": self.record_count,
            "per_dataset_counts": dict(sorted(self.per_dataset_counts.items())),
            "per_group_counts": dict(sorted(self.per_group_counts.items())),
            "per_block_counts": {
                f"{d}|{b}": n
                for (d, b), n in sorted(self.per_block_counts.items())
            },
            "skipped_count": self.skipped_count,
        }


_KNOWN_FIELDS = frozenset(
    {
        "pair_id",
        "framework",
        "backbone",
        "dataset",
        "task_group",
        "step_index",
        "before",
        "after",
        "accuracy_before",
        "accuracy_after",
        "gain",
        "annotations_before",
        "annotations_after",
    }
)


def headroom(record: ComparisonRecord) -> float:
    """Remaining room for improvement: 1 - accuracy_before."""
    return 1.0 - record.accuracy_before


def _parse_prompt_state(doc: Any, label: str) -> PromptState:
    if not isinstance(doc, dict):
        raise IngestError(f"field '{label}' must be an object")
    if "instruction_text" not in doc:
        raise IngestError(f"missing required field '{label}.instruction_text'")
    text = doc["instruction_text"]
    if not isinstance(text, str):
        raise IngestError(f"'{label}.instruction_text' must be a string")
    demos_raw = doc.get("demos", [])
    if not isinstance(demos_raw, list):
        raise IngestError(f"'{label}.demos' must be a list")
    demos = []
    for entry in demos_raw:
        if not isinstance(entry, dict):
            raise IngestError(f"'{label}.demos' entries must be objects")
        demos.append({str(k): str(v) for k, v in entry.items()})
    return PromptState(
        instruction_text=text,
        demos=tuple(demos),
        raw_payload=doc.get("raw_payload"),
    )


def _parse_annotations(doc: Any, label: str) -> dict[str, float]:
    if not isinstance(doc, dict):
        raise IngestError(f"field '{label}' must be an object")
    scores: dict[str, float] = {}
    for name, value in doc.items():
        if name not in ANNOTATION_FEATURES:
            raise IngestError(f"unknown annotation feature '{name}' in '{label}'")
        score = float(value)
        if not (1.0 <= score <= 10.0):
            raise IngestError(
                f"annotation score {name}={score} outside [1,10] in '{label}'"
            )
        scores[name] = score
    return scores


def parse_record(doc: dict[str, Any]) -> ComparisonRecord:
    """Validate one JSON document and build a ComparisonRecord.

    Raises IngestError on any malformed, missing, or out-of-range field.
    """
    for name in ("pair_id", "framework", "backbone", "dataset"):
        if name not in doc:
            raise IngestError(f"missing required field '{name}'")
        if not isinstance(doc[name], str):
            raise IngestError(f"field '{name}' must be a string")

    task_group = doc.get("task_group")
    if task_group is None:
        task_group = DATASET_GROUPS.get(str(doc["dataset"]).lower())
        if task_group is None:
            raise IngestError(
                f"missing required field 'task_group' and dataset "
                f"'{doc['dataset']}' is not in the bundled group table"
            )
    if task_group not in TASK_GROUPS:
        raise IngestError(f"unknown task_group '{task_group}'")

    if "step_index" not in doc:
        raise IngestError("missing required field 'step_index'")
    step_index = int(doc["step_index"])
    if step_index < 0:
        raise IngestError(f"step_index {step_index} must be >= 0")

    for name in ("before", "after"):
        if name not in doc:
            raise IngestError(f"missing required field '{name}'")
    before = _parse_prompt_state(doc["before"], "before")
    after = _parse_prompt_state(doc["after"], "after")

    for name in ("accuracy_before", "accuracy_after"):
        if name not in doc:
            raise IngestError(f"missing required field '{name}'")
    acc_before = float(doc["accuracy_before"])
    acc_after = float(doc["accuracy_after"])
    for name, acc in (("accuracy_before", acc_before), ("accuracy_after", acc_after)):
        if not (0.0 <= acc <= 1.0):
            raise IngestError(f"accuracy outside [0,1]: {name}={acc}")

    computed_gain = acc_after - acc_before
    if "gain" in doc and doc["gain"] is not None:
        gain = float(doc["gain"])
        if abs(gain - computed_gain) > GAIN_TOLERANCE:
            raise IngestError(
                f"gain {gain} disagrees with accuracy_after - accuracy_before "
                f"= {computed_gain}"
            )
    else:
        gain = computed_gain

    annotations_before = None
    if doc.get("annotations_before") is not None:
        annotations_before = _parse_annotations(
            doc["annotations_before"], "annotations_before"
        )
    annotations_after = None
    if doc.get("annotations_after") is not None:
        annotations_after = _parse_annotations(
            doc["annotations_after"], "annotations_after"
        )

    extras = {k: v for k, v in doc.items() if k not in _KNOWN_FIELDS}

    return ComparisonRecord(
        pair_id=str(doc["pair_id"]),
        framework=str(doc["framework"]),
        backbone=str(doc["backbone"]),
        dataset=str(doc["dataset"]),
        task_group=task_group,
        step_index=step_index,
        before=before,
        after=after,
        accuracy_before=acc_before,
        accuracy_after=acc_after,
        gain=gain,
        annotations_before=annotations_before,
        annotations_after=annotations_after,
        extras=extras,
    )


def compute_stats(
    records: list[ComparisonRecord], skipped_count: int = 0
) -> StoreStats:
    per_dataset: dict[str, int] = {}
    per_group: dict[str, int] = {}
    per_block: dict[tuple[str, str], int] = {}
    for rec in records:
        per_dataset[rec.dataset] = per_dataset.get(rec.dataset, 0) + 1
        per_group[rec.task_group] = per_group.get(rec.task_group, 0) + 1
        per_block[rec.block_id] = per_block.get(rec.block_id, 0) + 1
    return StoreStats(
        record_count=len(records),
        per_dataset_counts=per_dataset,
        per_group_counts=per_group,
        per_block_counts=per_block,
        skipped_count=skipped_count,
    )


def ingest(
    path: str | Path, strict: bool = True
) -> tuple[list[ComparisonRecord], StoreStats]:
    """Load a JSONL file of comparison records.

    In strict mode the first invalid line aborts the whole ingest; in lenient
    mode invalid lines are skipped and counted in StoreStats.skipped_count.
    Duplicate pair_ids are invalid in both modes (the duplicate line is the
    offending one).
    """
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"input file not found: {path}")

    records: list[ComparisonRecord] = []
    seen_ids: set[str] = set()
    skipped = 0
    with path.open("r", encoding="utf-8") as fh:
        for line_number, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                if not isinstance(doc, dict):
                    raise IngestError("line is not a JSON object")
                record = parse_record(doc)
                if record.pair_id in seen_ids:
                    raise IngestError(f"duplicate pair_id '{record.pair_id}'")
            except (IngestError, ValueError, TypeError) as exc:
                if strict:
                    if isinstance(exc, IngestError) and exc.line_number is None:
                        raise IngestError(str(exc), line_number) from exc
                    if not isinstance(exc, IngestError):
                        raise IngestError(f"invalid JSON: {exc}", line_number) from exc
                    raise
                skipped += 1
                log.warning("skipping invalid line %d: %s", line_number, exc)
                continue
            seen_ids.add(record.pair_id)
            records.append(record)

    return records, compute_stats(records, skipped)


def serialize(records: Iterable[ComparisonRecord], path: str | Path) -> None:
    """Write records back out as canonical JSONL (one record per line)."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), ensure_ascii=False, sort_keys=True))
            fh.write("\n")


def partition(
    records: list[ComparisonRecord], by: str
) -> dict[str | tuple[str, str], list[ComparisonRecord]]:
    """Split records into disjoint buckets by dataset, task_group, or block.

    Keys are returned in sorted order. An empty dimension value lands in the
    "" bucket with a warning.
    """
    if not records:
        raise ValueError("partition requires at least one record")
    if by not in ("dataset", "task_group", "block"):
        raise ValueError(f"unknown partition dimension '{by}'")

    buckets: dict[Any, list[ComparisonRecord]] = {}
    for rec in records:
        if by == "block":
            key: Any = rec.block_id
        else:
            key = getattr(rec, by)
        if key == "" or key == ("", ""):
            log.warning("record %s has empty %s value", rec.pair_id, by)
        buckets.setdefault(key, []).append(rec)
    return {k: buckets[k] for k in sorted(buckets)}
