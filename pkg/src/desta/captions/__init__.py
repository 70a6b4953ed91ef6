from .generators import GeneratorError, OfflineParaphraser, RemoteGenerator, TextGenerator
from .manifest import DatasetManifest, ManifestStats, compute_manifest_stats, format_stats_table
from .pipeline import SkipLog, generate_captions, generate_dataset
from .records import CaptionRecord, MetadataRecord, RecordError, read_jsonl, write_jsonl
from .templates import (REFERENCE_TEMPLATE_PATTERN, PromptSpec, Template, TemplateError, UnresolvedPlaceholder,
                        expand_template, load_prompts, load_templates)
from .validation import ValidationReport, validate_caption

__all__ = [
    "CaptionRecord", "DatasetManifest", "GeneratorError", "ManifestStats", "MetadataRecord",
    "OfflineParaphraser", "REFERENCE_TEMPLATE_PATTERN", "PromptSpec", "RecordError", "RemoteGenerator",
    "SkipLog", "Template", "TemplateError", "TextGenerator", "UnresolvedPlaceholder", "ValidationReport",
    "compute_manifest_stats", "expand_template", "format_stats_table", "generate_captions",
    "generate_dataset", "load_prompts", "load_templates", "read_jsonl", "validate_caption", "write_jsonl",
]
