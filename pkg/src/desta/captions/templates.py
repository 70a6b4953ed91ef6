"""Caption templates and their expansion from metadata.

Pattern syntax:

* ``[name]`` inserts an attribute; ``[text]`` inserts the quoted transcript.
* ``{...}`` is an optional clause, dropped when any attribute inside it is
  unspecified.
* ``{...|fallback}`` substitutes ``fallback`` instead of dropping.

Placeholders outside braces are mandatory.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources

from .records import UNSPECIFIED, MetadataRecord

PLACEHOLDERS = frozenset({"gender", "text", "emotion", "pitch", "volume", "speed"})
_SLOT = re.compile(r"\[([a-z_]+)\]")
_GROUP = re.compile(r"\{([^{}|]*)(?:\|([^{}]*))?\}")

REFERENCE_TEMPLATE_PATTERN = "A [gender] speaker says [text] with [emotion] emotion."


class TemplateError(ValueError):
    pass


class UnresolvedPlaceholder(TemplateError):
    def __init__(self, name: str, audio_id: str = "") -> None:
        super().__init__(f"mandatory placeholder [{name}] is unspecified for {audio_id or 'record'}")
        self.name = name


@dataclass(frozen=True)
class Template:
    id: str
    pattern: str

    def __post_init__(self) -> None:
        bad = sorted(set(_SLOT.findall(self.pattern)) - PLACEHOLDERS)
        if bad:
            raise TemplateError(f"template {self.id!r}: unknown placeholders {bad}")
        stripped = _GROUP.sub("", self.pattern)
        if "{" in stripped or "}" in stripped:
            raise TemplateError(f"template {self.id!r}: unbalanced or nested braces")

    @property
    def placeholders(self) -> frozenset[str]:
        return frozenset(_SLOT.findall(self.pattern))

    @property
    def has_text(self) -> bool:
        return "text" in self.placeholders


@dataclass(frozen=True)
class PromptSpec:
    id: str
    instruction: str
    style: str = "concise"


def render_value(record: MetadataRecord, name: str) -> str:
    if name == "text":
        return f'"{record.transcript}"'
    return record.attribute(name)


def _fill(fragment: str, record: MetadataRecord) -> str | None:
    """Fill slots; None if any slot is unspecified."""
    missing = False

    def sub(m: re.Match) -> str:
        nonlocal missing
        value = render_value(record, m.group(1))
        if value == UNSPECIFIED:
            missing = True
        return value

    out = _SLOT.sub(sub, fragment)
    return None if missing else out


def expand_template(record: MetadataRecord, template: Template) -> str:
    """Render ``template`` for ``record``.

    Raises:
        UnresolvedPlaceholder: a mandatory placeholder is unspecified.
    """

    def mandatory(m: re.Match) -> str:
        value = render_value(record, m.group(1))
        if value == UNSPECIFIED:
            raise UnresolvedPlaceholder(m.group(1), record.audio_id)
        return value

    # groups and literal runs are filled separately so transcript text is never re-scanned
    parts = []
    pos = 0
    for m in _GROUP.finditer(template.pattern):
        parts.append(_SLOT.sub(mandatory, template.pattern[pos:m.start()]))
        filled = _fill(m.group(1), record)
        if filled is None and m.group(2) is not None:
            filled = _fill(m.group(2), record)
        parts.append(filled or "")
        pos = m.end()
    parts.append(_SLOT.sub(mandatory, template.pattern[pos:]))
    return "".join(parts)


def load_templates(path=None) -> list[Template]:
    text = _read_data("templates.json", path)
    return [Template(**t) for t in json.loads(text)]


def load_prompts(path=None) -> list[PromptSpec]:
    text = _read_data("prompts.json", path)
    return [PromptSpec(**p) for p in json.loads(text)]


def _read_data(name: str, path=None) -> str:
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    return resources.files("desta.data").joinpath(name).read_text(encoding="utf-8")
