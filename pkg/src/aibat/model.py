"""Domain types, JSON schemas, and validators shared by every pipeline stage.

All types are immutable value objects once constructed and safe to share
across threads. On-disk artifacts are UTF-8 JSON; helpers here convert
each type to and from plain JSON dicts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Any, Optional

import numpy as np

from .errors import AibatError


class NoteType(str, Enum):
    FLAGGED = "flagged"
    PLAIN = "plain"


class EntityType(str, Enum):
    REFERENCE_DESIGNATOR = "reference_designator"
    ITEM = "item"
    TABLE = "table"
    MATERIAL = "material"
    FIGURE = "figure"
    DOCUMENT = "document"
    OTHER = "other"


class SubstepType(str, Enum):
    TEXT = "text"
    TABLE = "table"
    CHOICE = "choice"


class SubstepAction(str, Enum):
    UPDATE = "update"
    CHOOSE = "choose"


REVIEW_LABELS = ("R0", "R1", "R2", "R3")


def canonical_json(value: Any) -> str:
    """Stable JSON encoding used for hashing and byte-deterministic artifacts."""
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def input_hash(value: Any) -> str:
    """sha256 over the canonical JSON encoding of a value."""
    return hashlib.sha256(canonical_json(value).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Raster types


@dataclass(frozen=True)
class PageImage:
    """One rasterized drawing page, 8-bit grayscale."""

    page_index: int
    pixels: np.ndarray  # shape (height, width), dtype uint8
    source_id: str = ""

    def __post_init__(self):
        if self.page_index < 0:
            raise ValueError("page_index must be >= 0")
        px = np.asarray(self.pixels, dtype=np.uint8)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("pixels must be a non-empty 2-D grayscale raster")
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class NoteCrop:
    """Provenance of one extracted note crop.

    ``bbox`` is (x, y, w, h) in page pixel coordinates. Pixel data is kept
    in memory during extraction only; JSON provenance stores the geometry
    and the optional debug-crop directory holds the rasters.
    """

    page_index: int
    bbox: tuple[int, int, int, int]
    column_index: int
    row_order: int
    pixels: Optional[np.ndarray] = None

    def __post_init__(self):
        x, y, w, h = self.bbox
        if w <= 0 or h <= 0:
            raise ValueError(f"degenerate crop bbox {self.bbox}")
        object.__setattr__(self, "bbox", (int(x), int(y), int(w), int(h)))

    def to_json(self) -> dict:
        return {
            "page_index": self.page_index,
            "bbox": list(self.bbox),
            "column_index": self.column_index,
            "row_order": self.row_order,
        }

    @classmethod
    def from_json(cls, d: dict) -> "NoteCrop":
        return cls(
            page_index=d["page_index"],
            bbox=tuple(d["bbox"]),
            column_index=d["column_index"],
            row_order=d["row_order"],
        )


@dataclass(frozen=True)
class DrawingNote:
    """One numbered note extracted from a drawing page."""

    note_number: int
    note_type: NoteType
    text: str
    crop_ref: NoteCrop

    def __post_init__(self):
        if self.note_number < 1:
            raise ValueError("note_number must be >= 1")
        if not self.text:
            raise ValueError("note text must be non-empty")

    def to_json(self) -> dict:
        return {
            "note_number": self.note_number,
            "note_type": self.note_type.value,
            "text": self.text,
            "crop_ref": self.crop_ref.to_json(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "DrawingNote":
        return cls(
            note_number=d["note_number"],
            note_type=NoteType(d["note_type"]),
            text=d["text"],
            crop_ref=NoteCrop.from_json(d["crop_ref"]),
        )


# ---------------------------------------------------------------------------
# Parsed note (first model call output)


@dataclass(frozen=True)
class NoteStep:
    action: str
    text: str

    def to_json(self) -> dict:
        return {"action": self.action, "text": self.text}


@dataclass(frozen=True)
class NoteEntity:
    ref: str
    type: EntityType

    def to_json(self) -> dict:
        return {"ref": self.ref, "type": self.type.value}


@dataclass(frozen=True)
class ParsedNote:
    """Structured decomposition of a note into steps, information, entities."""

    steps: tuple[NoteStep, ...]
    information: tuple[str, ...]
    entities: tuple[NoteEntity, ...]

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        object.__setattr__(self, "information", tuple(self.information))
        object.__setattr__(self, "entities", tuple(self.entities))
        for s in self.steps:
            _require_uppercase_token(s.action)
        for e in self.entities:
            if not e.ref:
                raise ValueError("entity ref must be non-empty")

    def actions(self) -> set[str]:
        return {s.action for s in self.steps}

    def to_json(self) -> dict:
        return {
            "steps": [s.to_json() for s in self.steps],
            "information": list(self.information),
            "entities": [e.to_json() for e in self.entities],
        }

    @classmethod
    def from_json(cls, d: dict) -> "ParsedNote":
        return cls(
            steps=tuple(NoteStep(s["action"], s["text"]) for s in d["steps"]),
            information=tuple(d["information"]),
            entities=tuple(NoteEntity(e["ref"], EntityType(e["type"])) for e in d["entities"]),
        )


def _require_uppercase_token(action: str):
    if not action or action != action.upper() or any(c.isspace() for c in action):
        raise ValueError(f"step action must be a non-empty uppercase token: {action!r}")


# ---------------------------------------------------------------------------
# Template and generated step


@dataclass(frozen=True)
class TemplateSubstep:
    """Smallest template unit filled by one generation call.

    Exactly one of ``data``/``options`` is populated, matching ``action``:
    update substeps carry data, choose substeps carry >= 2 distinct options.
    """

    substep_id: str
    type: SubstepType
    action: SubstepAction
    data: Optional[str] = None
    options: Optional[tuple[str, ...]] = None
    guidance: Optional[str] = None

    def __post_init__(self):
        if self.options is not None:
            object.__setattr__(self, "options", tuple(self.options))
        if self.action is SubstepAction.UPDATE:
            if self.data is None or self.options is not None:
                raise ValueError(f"{self.substep_id}: update substep must carry data only")
        else:
            if self.options is None or self.data is not None:
                raise ValueError(f"{self.substep_id}: choose substep must carry options only")
            if len(self.options) < 2:
                raise ValueError(f"{self.substep_id}: choose substep needs >= 2 options")
            if len(set(self.options)) != len(self.options):
                raise ValueError(f"{self.substep_id}: options must be distinct")

    def to_json(self) -> dict:
        d: dict[str, Any] = {
            "substep_id": self.substep_id,
            "type": self.type.value,
            "action": self.action.value,
        }
        if self.data is not None:
            d["data"] = self.data
        if self.options is not None:
            d["options"] = list(self.options)
        if self.guidance is not None:
            d["guidance"] = self.guidance
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TemplateSubstep":
        return cls(
            substep_id=d["substep_id"],
            type=SubstepType(d["type"]),
            action=SubstepAction(d["action"]),
            data=d.get("data"),
            options=tuple(d["options"]) if "options" in d else None,
            guidance=d.get("guidance"),
        )


@dataclass(frozen=True)
class TemplateStep:
    step_name: str
    trigger_actions: tuple[str, ...]
    substeps: tuple[TemplateSubstep, ...]

    def __post_init__(self):
        object.__setattr__(self, "trigger_actions", tuple(self.trigger_actions))
        object.__setattr__(self, "substeps", tuple(self.substeps))
        if not self.substeps:
            raise ValueError(f"step {self.step_name!r} has no substeps")
        for a in self.trigger_actions:
            _require_uppercase_token(a)

    def to_json(self) -> dict:
        return {
            "step_name": self.step_name,
            "trigger_actions": list(self.trigger_actions),
            "substeps": [s.to_json() for s in self.substeps],
        }

    @classmethod
    def from_json(cls, d: dict) -> "TemplateStep":
        return cls(
            step_name=d["step_name"],
            trigger_actions=tuple(d["trigger_actions"]),
            substeps=tuple(TemplateSubstep.from_json(s) for s in d["substeps"]),
        )


@dataclass(frozen=True)
class IbatTemplate:
    template_id: str
    steps: tuple[TemplateStep, ...]

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        names = [s.step_name for s in self.steps]
        if len(set(names)) != len(names):
            raise ValueError("template step names must be unique")

    def to_json(self) -> dict:
        return {"template_id": self.template_id, "steps": [s.to_json() for s in self.steps]}

    @classmethod
    def from_json(cls, d: dict) -> "IbatTemplate":
        return cls(
            template_id=d["template_id"],
            steps=tuple(TemplateStep.from_json(s) for s in d["steps"]),
        )


@dataclass(frozen=True)
class GeneratedStep:
    """Final substep content returned by the generation call."""

    substep_id: str
    type: SubstepType
    data: str

    def to_json(self) -> dict:
        return {"substep_id": self.substep_id, "type": self.type.value, "data": self.data}

    @classmethod
    def from_json(cls, d: dict) -> "GeneratedStep":
        return cls(substep_id=d["substep_id"], type=SubstepType(d["type"]), data=d["data"])


# ---------------------------------------------------------------------------
# Review and metrics


@dataclass(frozen=True)
class ReviewRecord:
    """SME judgment of one parsed note or generated substep.

    R0 means "no errors" and therefore excludes the error labels: a record
    carrying R0 must carry nothing else.
    """

    output_id: str
    labels: frozenset[str]
    reviewer: str
    timestamp: str
    edited_text: Optional[str] = None

    def __post_init__(self):
        labels = frozenset(self.labels)
        object.__setattr__(self, "labels", labels)
        if not labels:
            raise ValueError("labels must be non-empty")
        bad = labels - set(REVIEW_LABELS)
        if bad:
            raise ValueError(f"unknown review labels: {sorted(bad)}")
        if "R0" in labels and labels != {"R0"}:
            raise ValueError("R0 excludes error labels; a record with R0 must be exactly {R0}")
        _require_iso8601(self.timestamp)

    def to_json(self) -> dict:
        d: dict[str, Any] = {
            "output_id": self.output_id,
            "labels": sorted(self.labels),
            "reviewer": self.reviewer,
            "timestamp": self.timestamp,
        }
        if self.edited_text is not None:
            d["edited_text"] = self.edited_text
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ReviewRecord":
        return cls(
            output_id=d["output_id"],
            labels=frozenset(d["labels"]),
            reviewer=d["reviewer"],
            timestamp=d["timestamp"],
            edited_text=d.get("edited_text"),
        )


def _require_iso8601(ts: str):
    try:
        datetime.fromisoformat(ts.replace("Z", "+00:00"))
    except (ValueError, AttributeError) as exc:
        raise ValueError(f"timestamp is not ISO-8601: {ts!r}") from exc


@dataclass(frozen=True)
class CostEstimate:
    """Token usage priced in dollars per 1000 tokens."""

    prompt_tokens: int
    completion_tokens: int
    prompt_price: float
    completion_price: float
    total_dollars: float

    def __post_init__(self):
        expected = (
            self.prompt_tokens / 1000.0 * self.prompt_price
            + self.completion_tokens / 1000.0 * self.completion_price
        )
        if abs(expected - self.total_dollars) > 1e-9:
            raise ValueError(
                f"total_dollars {self.total_dollars} != priced tokens {expected}"
            )

    @classmethod
    def compute(
        cls, prompt_tokens: int, completion_tokens: int, prompt_price: float, completion_price: float
    ) -> "CostEstimate":
        total = prompt_tokens / 1000.0 * prompt_price + completion_tokens / 1000.0 * completion_price
        return cls(prompt_tokens, completion_tokens, prompt_price, completion_price, total)

    def to_json(self) -> dict:
        return {
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "prompt_price": self.prompt_price,
            "completion_price": self.completion_price,
            "total_dollars": self.total_dollars,
        }

    @classmethod
    def from_json(cls, d: dict) -> "CostEstimate":
        return cls(
            prompt_tokens=d["prompt_tokens"],
            completion_tokens=d["completion_tokens"],
            prompt_price=d["prompt_price"],
            completion_price=d["completion_price"],
            total_dollars=d["total_dollars"],
        )


@dataclass(frozen=True)
class MetricsReport:
    """Aggregated evaluation figures for one job.

    CER and flagged accuracy are None when no ground truth manifest exists;
    pr01 is None when no reviews were recorded yet.
    """

    cer_mean: Optional[float]
    cer_std: Optional[float]
    flagged_accuracy: Optional[float]
    r_counts: dict[str, int] = field(default_factory=dict)
    pr01: Optional[float] = None
    cost: Optional[CostEstimate] = None

    def __post_init__(self):
        if self.pr01 is not None and not (0.0 <= self.pr01 <= 1.0):
            raise ValueError("pr01 must be within [0, 1]")
        if any(v < 0 for v in self.r_counts.values()):
            raise ValueError("r_counts values must be >= 0")

    def to_json(self) -> dict:
        return {
            "cer_mean": self.cer_mean,
            "cer_std": self.cer_std,
            "flagged_accuracy": self.flagged_accuracy,
            "r_counts": dict(sorted(self.r_counts.items())),
            "pr01": self.pr01,
            "cost": self.cost.to_json() if self.cost else None,
        }

    @classmethod
    def from_json(cls, d: dict) -> "MetricsReport":
        return cls(
            cer_mean=d["cer_mean"],
            cer_std=d["cer_std"],
            flagged_accuracy=d["flagged_accuracy"],
            r_counts=dict(d["r_counts"]),
            pr01=d["pr01"],
            cost=CostEstimate.from_json(d["cost"]) if d.get("cost") else None,
        )


# ---------------------------------------------------------------------------
# JSON schemas enforced on model output
#
# Dialect: draft-07 subset (type, properties, required, items, enum) so the
# inference server can apply them as a decoding constraint.

PARSED_NOTE_SCHEMA: dict = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "properties": {
        "steps": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {"action": {"type": "string"}, "text": {"type": "string"}},
                "required": ["action", "text"],
            },
        },
        "information": {"type": "array", "items": {"type": "string"}},
        "entities": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "ref": {"type": "string"},
                    "type": {"enum": [t.value for t in EntityType]},
                },
                "required": ["ref", "type"],
            },
        },
    },
    "required": ["steps", "information", "entities"],
}

GENERATED_STEP_SCHEMA: dict = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "properties": {
        "type": {"enum": [t.value for t in SubstepType]},
        "data": {"type": "string"},
    },
    "required": ["type", "data"],
}


def generated_step_schema_for(substep: TemplateSubstep) -> dict:
    """Schema specialized to one substep: type pinned, choose data an enum."""
    data_schema: dict[str, Any]
    if substep.action is SubstepAction.CHOOSE:
        data_schema = {"enum": list(substep.options or ())}
    else:
        data_schema = {"type": "string"}
    return {
        "$schema": "http://json-schema.org/draft-07/schema#",
        "type": "object",
        "properties": {"type": {"enum": [substep.type.value]}, "data": data_schema},
        "required": ["type", "data"],
    }


def write_schema_files(out_dir) -> list[str]:
    """Emit the two schema documents as standalone files for the server."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    written = []
    for name, schema in (
        ("parsed_note.schema.json", PARSED_NOTE_SCHEMA),
        ("generated_step.schema.json", GENERATED_STEP_SCHEMA),
    ):
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(schema, fh, indent=2, sort_keys=True)
            fh.write("\n")
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# Schema checking


@dataclass(frozen=True)
class Violation:
    """One violated constraint, addressed by a JSON path like steps[0].text."""

    path: str
    message: str
    kind: str = "schema"

    def __str__(self):
        return f"{self.path or '$'}: {self.message}"


class SchemaViolationError(AibatError):
    """Candidate JSON did not satisfy the target schema or type invariants."""

    def __init__(self, violations: list[Violation]):
        super().__init__("; ".join(str(v) for v in violations) or "schema violation")
        self.violations = list(violations)


_TYPE_CHECKS = {
    "object": lambda v: isinstance(v, dict),
    "array": lambda v: isinstance(v, list),
    "string": lambda v: isinstance(v, str),
    "integer": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "number": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "boolean": lambda v: isinstance(v, bool),
    "null": lambda v: v is None,
}


def _json_equal(a: Any, b: Any) -> bool:
    # bool is an int subclass in Python; JSON treats them as distinct types
    if isinstance(a, bool) != isinstance(b, bool):
        return False
    return a == b


def check_schema(value: Any, schema: dict, path: str = "") -> list[Violation]:
    """Check a JSON value against the draft-07 subset used by this project.

    Supported keywords: type, properties, required, items, enum. Unknown
    keywords are ignored, matching draft-07 semantics for the subset.
    """
    out: list[Violation] = []
    if "enum" in schema:
        if not any(_json_equal(value, allowed) for allowed in schema["enum"]):
            out.append(Violation(path, f"value {value!r} not in enum {schema['enum']}"))
            return out
    if "type" in schema:
        expected = schema["type"]
        if not _TYPE_CHECKS[expected](value):
            out.append(Violation(path, f"expected {expected}, got {type(value).__name__}"))
            return out
    if isinstance(value, dict):
        for key in schema.get("required", ()):
            if key not in value:
                out.append(Violation(_join(path, key), "required property missing"))
        for key, subschema in schema.get("properties", {}).items():
            if key in value:
                out.extend(check_schema(value[key], subschema, _join(path, key)))
    if isinstance(value, list) and "items" in schema:
        for i, item in enumerate(value):
            out.extend(check_schema(item, schema["items"], f"{path}[{i}]"))
    return out


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def validate_parsed_note(candidate: Any) -> ParsedNote:
    """Accept a candidate JSON value as a ParsedNote or raise with a report.

    The schema check mirrors what the inference server enforces; the step
    action and entity ref invariants are checked on top of it.
    """
    violations = check_schema(candidate, PARSED_NOTE_SCHEMA)
    if violations:
        raise SchemaViolationError(violations)
    for i, step in enumerate(candidate["steps"]):
        try:
            _require_uppercase_token(step["action"])
        except ValueError as exc:
            violations.append(Violation(f"steps[{i}].action", str(exc), kind="invariant"))
    for i, entity in enumerate(candidate["entities"]):
        if not entity["ref"]:
            violations.append(Violation(f"entities[{i}].ref", "must be non-empty", kind="invariant"))
    if violations:
        raise SchemaViolationError(violations)
    return ParsedNote.from_json(candidate)


def validate_generated_step(candidate: Any, source: TemplateSubstep) -> GeneratedStep:
    """Accept candidate generation output for one substep or raise with a report.

    A choose-substep answer must reproduce one of the options byte for byte;
    anything else is reported with the distinct "choice-not-verbatim" kind.
    """
    violations = check_schema(candidate, GENERATED_STEP_SCHEMA)
    if violations:
        raise SchemaViolationError(violations)
    if candidate["type"] != source.type.value:
        violations.append(
            Violation("type", f"expected {source.type.value!r}, got {candidate['type']!r}", kind="invariant")
        )
    if source.action is SubstepAction.CHOOSE:
        if not any(candidate["data"] == opt for opt in source.options or ()):
            violations.append(
                Violation("data", "must be byte-identical to one of the options", kind="choice-not-verbatim")
            )
    if violations:
        raise SchemaViolationError(violations)
    return GeneratedStep(substep_id=source.substep_id, type=source.type, data=candidate["data"])
