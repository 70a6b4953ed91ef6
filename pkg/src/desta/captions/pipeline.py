"""Caption generation over metadata records, and the manifest statistics."""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ..tokenizer import ByteTokenizer
from .generators import GeneratorError, OfflineParaphraser, TextGenerator
from .records import CaptionRecord, MetadataRecord, RecordError
from .templates import PromptSpec, Template, TemplateError, expand_template
from .validation import validate_caption

log = logging.getLogger(__name__)

DEFAULT_CAPTIONS_PER_AUDIO = 3


@dataclass
class SkipLog:
    """Why draws were dropped, as ``(audio_id, draw_index, reason)``."""

    entries: list[tuple[str, int, str]] = field(default_factory=list)

    def add(self, audio_id: str, draw: int, reason: str) -> None:
        log.info("skipped %s draw %d: %s", audio_id, draw, reason)
        self.entries.append((audio_id, draw, reason))

    def __len__(self) -> int:
        return len(self.entries)


def draw_seed(seed: int, audio_id: str, draw: int = -1) -> int:
    """Per-audio (and per-draw) seed; independent of scheduling order."""
    ss = np.random.SeedSequence([seed & 0xFFFFFFFF, zlib.crc32(audio_id.encode("utf-8")), draw + 1])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def draw_pairs(n_prompts: int, n_templates: int, n: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Draw ``n`` (prompt, template) index pairs uniformly.

    Pairs are distinct while ``n`` does not exceed the number of combinations.
    """
    total = n_prompts * n_templates
    if n <= total:
        flat = rng.choice(total, size=n, replace=False)
    else:
        flat = rng.integers(total, size=n)
    return [(int(f) // n_templates, int(f) % n_templates) for f in flat]


def generate_captions(record: MetadataRecord, prompts: Sequence[PromptSpec], templates: Sequence[Template],
                      n: int = DEFAULT_CAPTIONS_PER_AUDIO, generator: TextGenerator | None = None,
                      seed: int = 0, tokenizer: ByteTokenizer | None = None,
                      skips: SkipLog | None = None) -> list[CaptionRecord]:
    """Generate up to ``n`` validated captions for one audio clip.

    Draws that fail validation, repeat an earlier caption, or whose generator
    gives up are logged in ``skips`` and dropped; nothing is fabricated in
    their place.
    """
    if not prompts or not templates:
        raise ValueError("need at least one prompt and one template")
    generator = generator or OfflineParaphraser()
    tokenizer = tokenizer or ByteTokenizer.default()
    skips = skips if skips is not None else SkipLog()
    rng = np.random.default_rng(draw_seed(seed, record.audio_id))
    out: list[CaptionRecord] = []
    seen: set[str] = set()
    for i, (pi, ti) in enumerate(draw_pairs(len(prompts), len(templates), n, rng)):
        prompt, template = prompts[pi], templates[ti]
        try:
            seed_sentence = expand_template(record, template)
        except TemplateError as exc:
            skips.add(record.audio_id, i, f"template:{exc}")
            continue
        try:
            caption = generator.generate(prompt, [seed_sentence], draw_seed(seed, record.audio_id, i))
        except GeneratorError as exc:
            skips.add(record.audio_id, i, f"generator:{exc}")
            continue
        report = validate_caption(caption, record)
        if not report.passed:
            skips.add(record.audio_id, i, ",".join(report.reasons))
            continue
        if caption in seen:
            skips.add(record.audio_id, i, "duplicate")
            continue
        seen.add(caption)
        out.append(CaptionRecord(record.audio_id, caption, template.id, prompt.id, generator.kind,
                                 tokenizer.count(caption)))
    return out


def check_unique_ids(records: Iterable[MetadataRecord]) -> None:
    seen: dict[tuple[str, str], int] = {}
    for i, r in enumerate(records):
        key = (r.source, r.audio_id)
        if key in seen:
            raise RecordError(f"duplicate audio_id {r.audio_id!r} in source {r.source!r} (records {seen[key]} and {i})")
        seen[key] = i


def generate_dataset(records: Sequence[MetadataRecord], prompts: Sequence[PromptSpec],
                     templates: Sequence[Template], n: int = DEFAULT_CAPTIONS_PER_AUDIO,
                     generator: TextGenerator | None = None, seed: int = 0,
                     tokenizer: ByteTokenizer | None = None) -> tuple[list[CaptionRecord], SkipLog]:
    """Caption every record; output sorted by (audio_id, draw order)."""
    check_unique_ids(records)
    skips = SkipLog()
    tokenizer = tokenizer or ByteTokenizer.default()
    out: list[CaptionRecord] = []
    for r in sorted(records, key=lambda r: r.audio_id):
        out += generate_captions(r, prompts, templates, n, generator, seed, tokenizer, skips)
    return out, skips
