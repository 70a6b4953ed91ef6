"""Caption checks against the source metadata."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

from .records import UNSPECIFIED, MetadataRecord

_QUOTES = str.maketrans("", "", "\"'“”‘’`")
_WS = re.compile(r"\s+")


@dataclass(frozen=True)
class ValidationReport:
    passed: bool
    reasons: tuple[str, ...] = field(default_factory=tuple)

    def __bool__(self) -> bool:
        return self.passed


def normalize_for_containment(text: str) -> str:
    """Collapse whitespace and drop quote characters."""
    return _WS.sub(" ", text.translate(_QUOTES)).strip()


def contains_transcript(caption: str, transcript: str) -> bool:
    needle = normalize_for_containment(transcript)
    return bool(needle) and needle in normalize_for_containment(caption)


@lru_cache(maxsize=None)
def load_lexicon(path: str | None = None) -> dict[str, dict[str, tuple[str, ...]]]:
    if path is None:
        text = resources.files("desta.data").joinpath("contradictions.json").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    raw = json.loads(text)
    return {attr: {val: tuple(terms) for val, terms in vals.items()} for attr, vals in raw.items()}


def _strip_transcript(caption: str, transcript: str) -> str:
    """Remove the spoken words so they cannot trigger the lexicon."""
    norm = normalize_for_containment(caption)
    needle = normalize_for_containment(transcript)
    return norm.replace(needle, " ") if needle else norm


def find_contradictions(caption: str, record: MetadataRecord, lexicon=None) -> list[str]:
    lexicon = load_lexicon() if lexicon is None else lexicon
    rest = _strip_transcript(caption, record.transcript).lower()
    hits = []
    for attr, table in lexicon.items():
        value = getattr(record, attr, UNSPECIFIED)
        if value == UNSPECIFIED:
            continue
        for term in table.get(value, ()):
            if re.search(rf"(?<![\w-]){re.escape(term.lower())}(?![\w-])", rest):
                hits.append(attr)
                break
    return hits


def validate_caption(caption: str, record: MetadataRecord, lexicon=None) -> ValidationReport:
    reasons = []
    if not contains_transcript(caption, record.transcript):
        reasons.append("transcript-missing")
    reasons += [f"attribute-contradiction:{a}" for a in find_contradictions(caption, record, lexicon)]
    return ValidationReport(not reasons, tuple(reasons))
