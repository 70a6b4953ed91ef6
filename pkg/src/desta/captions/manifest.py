"""Caption manifests and their summary statistics."""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

from .records import CaptionRecord, MetadataRecord


@dataclass(frozen=True)
class ManifestStats:
    num_audios: int
    num_captions: int
    total_duration_h: float
    avg_tokens: float
    empty: bool = False

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class DatasetManifest:
    """Caption records plus per-audio duration and source corpus.

    ``durations`` and ``audio_sources`` are keyed by audio_id; audios absent
    from them count as zero seconds from source ``"unknown"``.
    """

    records: list[CaptionRecord]
    durations: dict[str, float] = field(default_factory=dict)
    audio_sources: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_metadata(cls, records: Sequence[CaptionRecord], metadata: Sequence[MetadataRecord]) -> "DatasetManifest":
        return cls(list(records), {m.audio_id: m.duration_s for m in metadata},
                   {m.audio_id: m.source for m in metadata})

    @property
    def sources(self) -> dict[str, int]:
        """Captions per source corpus."""
        return dict(sorted(Counter(self.audio_sources.get(r.audio_id, "unknown") for r in self.records).items()))

    @property
    def stats(self) -> ManifestStats:
        return compute_manifest_stats(self)

    def split_by_source(self) -> dict[str, "DatasetManifest"]:
        groups: dict[str, list[CaptionRecord]] = {}
        for r in self.records:
            groups.setdefault(self.audio_sources.get(r.audio_id, "unknown"), []).append(r)
        return {src: DatasetManifest(recs, self.durations, self.audio_sources) for src, recs in sorted(groups.items())}


def compute_manifest_stats(manifest: DatasetManifest) -> ManifestStats:
    records = manifest.records
    if not records:
        return ManifestStats(0, 0, 0.0, 0.0, empty=True)
    audio_ids = {r.audio_id for r in records}
    seconds = sum(manifest.durations.get(a, 0.0) for a in sorted(audio_ids))
    tokens = sum(r.token_count for r in records)
    return ManifestStats(len(audio_ids), len(records), seconds / 3600.0, tokens / len(records))


def format_stats_table(per_source: Mapping[str, ManifestStats]) -> str:
    """Aligned text table, one column per source."""
    names = list(per_source)
    rows = [
        ("# Audios", [f"{per_source[n].num_audios:,}" for n in names]),
        ("# Captions", [f"{per_source[n].num_captions:,}" for n in names]),
        ("Duration(hours)", [f"{per_source[n].total_duration_h:.1f}" for n in names]),
        ("Avg. length(tokens)", [f"{per_source[n].avg_tokens:.1f}" for n in names]),
    ]
    width = max(12, *(len(n) for n in names)) if names else 12
    head = f"{'':<20}" + "".join(f"{n:>{width + 2}}" for n in names)
    lines = [head] + [f"{label:<20}" + "".join(f"{v:>{width + 2}}" for v in vals) for label, vals in rows]
    return "\n".join(lines)
