"""Record types and line-delimited JSON IO."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Iterator, Type, TypeVar

GENDERS = ("male", "female", "unspecified")
PITCHES = ("low", "normal", "high", "unspecified")
VOLUMES = ("soft", "normal", "loud", "unspecified")
SPEEDS = ("slow", "normal", "fast", "unspecified")
UNSPECIFIED = "unspecified"
GENERATOR_KINDS = ("offline", "remote")


class RecordError(ValueError):
    """A record violates its schema."""


@dataclass(frozen=True)
class MetadataRecord:
    audio_id: str
    transcript: str
    gender: str = UNSPECIFIED
    pitch: str = UNSPECIFIED
    volume: str = UNSPECIFIED
    speed: str = UNSPECIFIED
    emotion: str = UNSPECIFIED
    duration_s: float = 0.0
    source: str = "unknown"

    def __post_init__(self) -> None:
        if not self.audio_id:
            raise RecordError("audio_id must be non-empty")
        if not self.transcript or not self.transcript.strip():
            raise RecordError(f"{self.audio_id}: transcript must be non-empty")
        for name, allowed in (("gender", GENDERS), ("pitch", PITCHES), ("volume", VOLUMES), ("speed", SPEEDS)):
            if getattr(self, name) not in allowed:
                raise RecordError(f"{self.audio_id}: {name}={getattr(self, name)!r} not in {allowed}")
        if not self.emotion:
            raise RecordError(f"{self.audio_id}: emotion must be a label or 'unspecified'")
        if self.duration_s < 0:
            raise RecordError(f"{self.audio_id}: duration_s must be non-negative")

    def attribute(self, name: str) -> str:
        if name == "text":
            return self.transcript
        return getattr(self, name)


@dataclass(frozen=True)
class CaptionRecord:
    audio_id: str
    caption: str
    template_id: str
    prompt_id: str
    generator: str
    token_count: int

    def __post_init__(self) -> None:
        if self.generator not in GENERATOR_KINDS:
            raise RecordError(f"generator must be one of {GENERATOR_KINDS}, got {self.generator!r}")
        if self.token_count < 0:
            raise RecordError("token_count must be non-negative")


R = TypeVar("R")


def to_json_line(record) -> str:
    return json.dumps(asdict(record), ensure_ascii=False, separators=(", ", ": "))


def from_dict(cls: Type[R], obj: dict) -> R:
    names = {f.name for f in fields(cls)}
    unknown = set(obj) - names
    if unknown:
        raise RecordError(f"{cls.__name__}: unknown fields {sorted(unknown)}")
    try:
        return cls(**obj)
    except TypeError as exc:
        raise RecordError(f"{cls.__name__}: {exc}") from None


def read_jsonl(path: str | Path, cls: Type[R]) -> list[R]:
    """Parse one record per non-blank line; errors carry the line number."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(from_dict(cls, json.loads(line)))
            except (json.JSONDecodeError, RecordError) as exc:
                raise RecordError(f"{path}:{lineno}: {exc}") from None
    return out


def write_jsonl(path: str | Path, records: Iterable) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(to_json_line(r) + "\n")


def iter_dicts(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)
