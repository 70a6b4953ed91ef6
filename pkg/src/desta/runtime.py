"""Glue shared by the CLI and the estimators: features, examples, responders."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .captions.records import CaptionRecord, MetadataRecord
from .config import ProjectConfig
from .encoder import AudioFeatureFile, EncoderOutput, TranscriptStore, read_features, synthesize_features
from .evaluation import TaskSample
from .model import SpeechLM
from .seeding import derive_rng
from .tokenizer import ByteTokenizer
from .trainer import TrainingExample, assemble_input, context_tokens


class FeatureSource:
    """Feature lookup by audio_id.

    Reads ``<features_dir>/<audio_id>.feat`` when present, otherwise
    synthesises features from the metadata record.
    """

    def __init__(self, metadata: Mapping[str, MetadataRecord], frames: int, feature_dim: int,
                 features_dir: str | Path | None = None, seed: int = 0) -> None:
        self.metadata = dict(metadata)
        self.frames = frames
        self.feature_dim = feature_dim
        self.features_dir = Path(features_dir) if features_dir else None
        self.seed = seed

    def get(self, audio_id: str) -> AudioFeatureFile:
        if self.features_dir is not None:
            path = self.features_dir / f"{audio_id}.feat"
            if path.exists():
                return read_features(path)
        if audio_id not in self.metadata:
            raise KeyError(f"no features or metadata for audio_id {audio_id!r}")
        return synthesize_features(self.metadata[audio_id], self.frames, self.feature_dim, self.seed)


class EncodingCache:
    """Memoised frozen-encoder outputs."""

    def __init__(self, model: SpeechLM, features: FeatureSource) -> None:
        self.model = model
        self.features = features
        self._cache: dict[str, EncoderOutput] = {}

    def __call__(self, audio_id: str) -> EncoderOutput:
        if audio_id not in self._cache:
            self._cache[audio_id] = self.model.encode(self.features.get(audio_id))
        return self._cache[audio_id]


def build_model(cfg: ProjectConfig, tokenizer: ByteTokenizer | None = None) -> SpeechLM:
    tokenizer = tokenizer or ByteTokenizer.default()
    return SpeechLM(cfg.model_config(tokenizer.vocab_size), tokenizer)


def build_examples(model: SpeechLM, captions: Sequence[CaptionRecord], store: TranscriptStore,
                   encodings: EncodingCache, prompts: Sequence[str], seed: int = 0) -> list[TrainingExample]:
    """One example per caption; the captioning prompt is drawn per example from ``prompts``."""
    rng = derive_rng(seed, "caption-prompts")
    choice = rng.integers(len(prompts), size=len(captions))
    prefix_len = model.prefix_length()
    out = []
    for c, k in zip(captions, choice):
        out.append(assemble_input(encodings(c.audio_id), store.lookup(c.audio_id), prompts[int(k)], c.caption,
                                  tokenizer=model.tokenizer, prefix_len=prefix_len,
                                  max_seq_len=model.lm.config.max_seq_len, audio_id=c.audio_id))
    return out


class Responder:
    """Answer a task sample: speech prefix, transcript, instruction, then greedy decoding."""

    def __init__(self, model: SpeechLM, store: TranscriptStore, encodings: EncodingCache, max_new: int = 16) -> None:
        self.model = model
        self.store = store
        self.encodings = encodings
        self.max_new = max_new

    def __call__(self, sample: TaskSample) -> str:
        tr, pr = context_tokens(self.model.tokenizer, self.store.lookup(sample.audio_id), sample.instruction)
        ids = self.model.generate(self.encodings(sample.audio_id), tr + pr, self.max_new)
        return self.model.tokenizer.decode(ids)


def caption_examples_from_texts(model: SpeechLM, encodings: Sequence[EncoderOutput], transcripts: Sequence[str],
                                prompts: Sequence[str], targets: Sequence[str]) -> list[TrainingExample]:
    prefix_len = model.prefix_length()
    return [assemble_input(e, t, p, y, tokenizer=model.tokenizer, prefix_len=prefix_len,
                           max_seq_len=model.lm.config.max_seq_len)
            for e, t, p, y in zip(encodings, transcripts, prompts, targets)]


def frozen_digest_arrays(model: SpeechLM) -> dict[str, bytes]:
    return {n: np.ascontiguousarray(p.data).tobytes() for n, p in model.named_parameters() if p.frozen}
