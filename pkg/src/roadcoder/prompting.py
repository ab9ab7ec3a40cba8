"""Prompt assembly for attribute coding requests.

Builds the four-section system instruction (task, local context, attribute
details, output format) from template assets plus a codebook render, and the
per-image user prompt carrying id and coordinates. Both builders are pure:
identical inputs yield byte-identical prompts, which keeps response caching
sound.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

from .codebook import Codebook
from .dataset import ImageRecord
from .errors import InvalidConfiguration, MissingImageBytes, TemplateError

SECTION_HEADERS = (
    "## 1. Task specification",
    "## 2. Local context",
    "## 3. Attribute details",
    "## 4. Output format",
)

SYSTEM_PLACEHOLDERS = frozenset({"country", "local_context", "attribute_details"})
USER_PLACEHOLDERS = frozenset({"image_id", "latitude", "longitude"})

# Substituted when PromptConfig.local_context is left empty.
EMPTY_CONTEXT_SENTENCE = "No further local context was supplied for this survey."

_PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


@dataclass(frozen=True)
class PromptConfig:
    country: str
    local_context: str = ""
    output_language: str = "English"

    def __post_init__(self) -> None:
        if not self.country.strip():
            raise InvalidConfiguration("prompt config needs a non-empty country")


@dataclass(frozen=True)
class SystemInstruction:
    task_specification: str
    local_context: str
    attribute_details: str
    output_format: str
    rendered: str


@dataclass(frozen=True)
class UserPrompt:
    image_ref: bytes
    image_id: str
    latitude: float
    longitude: float
    rendered_text: str


def default_template_dir() -> Path:
    return Path(__file__).parent / "data" / "templates"


def load_template(path: str | Path, allowed: frozenset[str]) -> str:
    """Read a UTF-8 template, rejecting placeholders outside `allowed`."""
    text = Path(path).read_text(encoding="utf-8")
    unknown = sorted(set(_PLACEHOLDER.findall(text)) - allowed)
    if unknown:
        raise TemplateError(f"{path}: unknown placeholders {unknown}")
    return text


def _substitute(template: str, values: dict[str, str]) -> str:
    return _PLACEHOLDER.sub(lambda m: values[m.group(1)], template)


def render_attribute_details(codebook: Codebook) -> str:
    """Render every attribute as a coding-manual entry, grouped.

    Each attribute id heads exactly one entry and each class code appears on
    exactly one line of its entry, so downstream closed-set response
    validation matches what the model was offered.
    """
    lines: list[str] = []
    for group in codebook.groups_present():
        lines.append(f"# Attribute group: {group.value}")
        lines.append("")
        for attr in codebook:
            if attr.group is not group:
                continue
            lines.append(f"### {attr.id}: {attr.display_name}")
            lines.append(attr.description)
            lines.append("Select exactly one of the following codes:")
            for cls in attr.classes:
                lines.append(f'  - code "{cls.code}", {cls.label}: {cls.description}')
            lines.append("")
    return "\n".join(lines).rstrip() + "\n"


def _split_sections(rendered: str, source: str) -> tuple[str, str, str, str]:
    positions = []
    for header in SECTION_HEADERS:
        matches = [m.start() for m in re.finditer(re.escape(header), rendered)]
        if len(matches) != 1:
            raise TemplateError(
                f"{source}: section header {header!r} must appear exactly once"
            )
        positions.append(matches[0])
    if positions != sorted(positions):
        raise TemplateError(f"{source}: section headers out of order")
    bodies = []
    for i, header in enumerate(SECTION_HEADERS):
        start = positions[i] + len(header)
        end = positions[i + 1] if i + 1 < len(positions) else len(rendered)
        body = rendered[start:end].strip()
        if not body:
            raise TemplateError(f"{source}: section {header!r} is empty")
        bodies.append(body)
    return tuple(bodies)


def build_system_instruction(
    codebook: Codebook,
    config: PromptConfig,
    template_path: str | Path | None = None,
) -> SystemInstruction:
    path = Path(template_path) if template_path else default_template_dir() / "system_instruction.txt"
    template = load_template(path, SYSTEM_PLACEHOLDERS)
    context = config.local_context.strip() or EMPTY_CONTEXT_SENTENCE
    context = f"{context} Write every response in {config.output_language}."
    rendered = _substitute(
        template,
        {
            "country": config.country,
            "local_context": context,
            "attribute_details": render_attribute_details(codebook),
        },
    )
    task, local, details, fmt = _split_sections(rendered, str(path))
    return SystemInstruction(
        task_specification=task,
        local_context=local,
        attribute_details=details,
        output_format=fmt,
        rendered=rendered,
    )


def format_coordinate(value: float) -> str:
    return f"{value:.6f}"


def build_user_prompt(
    image: ImageRecord,
    template_path: str | Path | None = None,
) -> UserPrompt:
    path = Path(template_path) if template_path else default_template_dir() / "user_prompt.txt"
    template = load_template(path, USER_PLACEHOLDERS)
    if not image.path.is_file():
        raise MissingImageBytes(f"{image.image_id}: no image file at {image.path}")
    payload = image.path.read_bytes()
    rendered = _substitute(
        template,
        {
            "image_id": image.image_id,
            "latitude": format_coordinate(image.latitude),
            "longitude": format_coordinate(image.longitude),
        },
    )
    return UserPrompt(
        image_ref=payload,
        image_id=image.image_id,
        latitude=image.latitude,
        longitude=image.longitude,
        rendered_text=rendered,
    )
