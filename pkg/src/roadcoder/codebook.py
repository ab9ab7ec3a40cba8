"""Attribute schema: the coded road attributes, their classes, and risk ranking.

The codebook file is the single source of truth for which attributes exist,
which class codes each one admits, and how those classes rank by risk
(rank 0 = safest, strictly increasing = riskier). Everything downstream,
from prompt rendering and response validation to segment aggregation and
evaluation, resolves codes against a loaded ``Codebook``.

Codebook values are immutable after load and safe to share across workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Mapping

from .errors import DuplicateId, SchemaViolation, UnknownClassCode

FULL_ATTRIBUTE_COUNT = 52


class AttributeGroup(Enum):
    """The five reporting groups every attribute belongs to."""

    ObservedFlows = "Observed Flows"
    SpeedLimits = "Speed Limits"
    MidBlock = "Mid-block"
    Roadside = "Roadside"
    Intersections = "Intersections"


class Ordering(Enum):
    """Result of a risk comparison between two class codes."""

    LESS = -1
    EQUAL = 0
    GREATER = 1

    def inverse(self) -> "Ordering":
        return Ordering(-self.value)


@dataclass(frozen=True)
class AttributeClass:
    code: str
    label: str
    description: str
    risk_rank: int


@dataclass(frozen=True)
class AttributeDefinition:
    id: str
    display_name: str
    description: str
    group: AttributeGroup
    classes: tuple[AttributeClass, ...]
    single_class: bool = False

    def class_by_code(self, code: str) -> AttributeClass:
        for cls in self.classes:
            if cls.code == code:
                return cls
        raise UnknownClassCode(f"attribute {self.id!r} has no class code {code!r}")

    def codes(self) -> tuple[str, ...]:
        return tuple(c.code for c in self.classes)

    def risk_rank(self, code: str) -> int:
        return self.class_by_code(code).risk_rank

    def safest_class(self) -> AttributeClass:
        return min(self.classes, key=lambda c: c.risk_rank)


@dataclass(frozen=True)
class Codebook:
    attributes: tuple[AttributeDefinition, ...]
    version: str
    country_defaults: tuple[tuple[str, str], ...] = field(default_factory=tuple)

    def __iter__(self) -> Iterator[AttributeDefinition]:
        return iter(self.attributes)

    def __len__(self) -> int:
        return len(self.attributes)

    def ids(self) -> tuple[str, ...]:
        return tuple(a.id for a in self.attributes)

    def get(self, attribute_id: str) -> AttributeDefinition | None:
        for attr in self.attributes:
            if attr.id == attribute_id:
                return attr
        return None

    def __getitem__(self, attribute_id: str) -> AttributeDefinition:
        attr = self.get(attribute_id)
        if attr is None:
            raise KeyError(attribute_id)
        return attr

    def groups_present(self) -> tuple[AttributeGroup, ...]:
        seen: list[AttributeGroup] = []
        for attr in self.attributes:
            if attr.group not in seen:
                seen.append(attr.group)
        return tuple(seen)


_TOP_KEYS = {"version", "attribute_count", "country_defaults", "attributes"}
_ATTR_KEYS = {"id", "display_name", "description", "group", "classes", "single_class"}
_ATTR_REQUIRED = _ATTR_KEYS - {"single_class"}
_CLASS_KEYS = {"code", "label", "description", "risk_rank"}


def _check_keys(obj: Mapping, allowed: set[str], required: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise SchemaViolation(f"{where}: unknown keys {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise SchemaViolation(f"{where}: missing keys {sorted(missing)}")


def _parse_class(raw: object, where: str) -> AttributeClass:
    if not isinstance(raw, dict):
        raise SchemaViolation(f"{where}: class entry must be an object")
    _check_keys(raw, _CLASS_KEYS, _CLASS_KEYS, where)
    code = raw["code"]
    if not isinstance(code, str) or not code:
        raise SchemaViolation(f"{where}: class code must be a non-empty string")
    if not isinstance(raw["risk_rank"], int) or isinstance(raw["risk_rank"], bool):
        raise SchemaViolation(f"{where}: risk_rank must be an integer")
    for key in ("label", "description"):
        if not isinstance(raw[key], str):
            raise SchemaViolation(f"{where}: {key} must be a string")
    return AttributeClass(
        code=code,
        label=raw["label"],
        description=raw["description"],
        risk_rank=raw["risk_rank"],
    )


def _parse_attribute(raw: object, index: int) -> AttributeDefinition:
    where = f"attributes[{index}]"
    if not isinstance(raw, dict):
        raise SchemaViolation(f"{where}: must be an object")
    _check_keys(raw, _ATTR_KEYS, _ATTR_REQUIRED, where)
    attr_id = raw["id"]
    if not isinstance(attr_id, str) or not attr_id:
        raise SchemaViolation(f"{where}: id must be a non-empty string")
    where = f"attribute {attr_id!r}"
    try:
        group = AttributeGroup(raw["group"])
    except ValueError:
        raise SchemaViolation(
            f"{where}: group {raw['group']!r} not one of "
            f"{[g.value for g in AttributeGroup]}"
        ) from None
    if not isinstance(raw["classes"], list) or not raw["classes"]:
        raise SchemaViolation(f"{where}: classes must be a non-empty list")
    classes = tuple(
        _parse_class(c, f"{where} class[{i}]") for i, c in enumerate(raw["classes"])
    )
    codes = [c.code for c in classes]
    dupes = {c for c in codes if codes.count(c) > 1}
    if dupes:
        raise DuplicateId(f"{where}: duplicate class codes {sorted(dupes)}")
    ranks = [c.risk_rank for c in classes]
    if len(set(ranks)) != len(ranks):
        raise SchemaViolation(f"{where}: risk_rank values must be distinct")
    single = bool(raw.get("single_class", False))
    if len(classes) < 2 and not single:
        raise SchemaViolation(
            f"{where}: fewer than 2 classes and not flagged single_class"
        )
    if single and len(classes) != 1:
        raise SchemaViolation(f"{where}: single_class flag on a multi-class attribute")
    return AttributeDefinition(
        id=attr_id,
        display_name=raw["display_name"],
        description=raw["description"],
        group=group,
        classes=classes,
        single_class=single,
    )


def parse_codebook(raw: object, source: str = "<memory>") -> Codebook:
    """Validate a decoded JSON document and build a Codebook."""
    if not isinstance(raw, dict):
        raise SchemaViolation(f"{source}: top level must be an object")
    _check_keys(raw, _TOP_KEYS, {"version", "attributes"}, source)
    if not isinstance(raw["version"], str) or not raw["version"]:
        raise SchemaViolation(f"{source}: version must be a non-empty string")
    if not isinstance(raw["attributes"], list):
        raise SchemaViolation(f"{source}: attributes must be a list")
    attributes = tuple(
        _parse_attribute(a, i) for i, a in enumerate(raw["attributes"])
    )
    ids = [a.id for a in attributes]
    dupes = {i for i in ids if ids.count(i) > 1}
    if dupes:
        raise DuplicateId(f"{source}: duplicate attribute ids {sorted(dupes)}")

    declared = raw.get("attribute_count", FULL_ATTRIBUTE_COUNT)
    if not isinstance(declared, int) or isinstance(declared, bool):
        raise SchemaViolation(f"{source}: attribute_count must be an integer")
    if len(attributes) != declared:
        raise SchemaViolation(
            f"{source}: holds {len(attributes)} attributes but declares {declared} "
            f"(files smaller than the full {FULL_ATTRIBUTE_COUNT}-attribute schema "
            f"must set attribute_count)"
        )

    defaults_raw = raw.get("country_defaults", {})
    if not isinstance(defaults_raw, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in defaults_raw.items()
    ):
        raise SchemaViolation(f"{source}: country_defaults must map strings to strings")
    return Codebook(
        attributes=attributes,
        version=raw["version"],
        country_defaults=tuple(sorted(defaults_raw.items())),
    )


def load_codebook(path: str | Path) -> Codebook:
    """Load and validate a codebook file.

    Raises FileNotFoundError if the path does not exist and SchemaViolation
    (naming the offending attribute or class) on any malformed content.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"codebook file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"{path}: not valid JSON ({exc})") from exc
    return parse_codebook(raw, source=str(path))


def serialize_codebook(codebook: Codebook) -> dict:
    """Inverse of parse_codebook; load(serialize(cb)) == cb."""
    return {
        "version": codebook.version,
        "attribute_count": len(codebook.attributes),
        "country_defaults": dict(codebook.country_defaults),
        "attributes": [
            {
                "id": a.id,
                "display_name": a.display_name,
                "description": a.description,
                "group": a.group.value,
                "classes": [
                    {
                        "code": c.code,
                        "label": c.label,
                        "description": c.description,
                        "risk_rank": c.risk_rank,
                    }
                    for c in a.classes
                ],
                **({"single_class": True} if a.single_class else {}),
            }
            for a in codebook.attributes
        ],
    }


def save_codebook(codebook: Codebook, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(serialize_codebook(codebook), indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def risk_compare(attr: AttributeDefinition, a: str, b: str) -> Ordering:
    """Compare two class codes of one attribute by risk.

    LESS means ``a`` is safer than ``b``. Both codes must exist on the
    attribute; UnknownClassCode otherwise.
    """
    rank_a = attr.risk_rank(a)
    rank_b = attr.risk_rank(b)
    if rank_a < rank_b:
        return Ordering.LESS
    if rank_a > rank_b:
        return Ordering.GREATER
    return Ordering.EQUAL


def default_codebook_path() -> Path:
    """Path of the full attribute schema shipped with the package."""
    return Path(__file__).parent / "data" / "irap_codebook.json"
