"""Synthetic corpora for desk-scale runs: metadata, features and tasks."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .captions.records import GENDERS, PITCHES, SPEEDS, VOLUMES, MetadataRecord, write_jsonl
from .encoder import synthesize_features, write_features
from .evaluation import TaskInstance, TaskSample, write_tasks

SUBJECTS = ("the cat", "my brother", "the old man", "our teacher", "the little girl", "a stranger",
            "the dog", "her friend", "the captain", "everyone")
VERBS = ("opened", "found", "carried", "painted", "watched", "liked", "cleaned", "forgot", "sold", "kept")
OBJECTS = ("the door", "a red box", "the window", "the garden", "a letter", "the boat", "some bread",
           "the keys", "a small bird", "the map")
TAILS = ("", " today", " again", " last night", " in the morning", " by the river")
EMOTIONS = ("neutral", "happy", "sad", "angry", "surprised")
SOURCES = ("LibriTTS", "IEMOCAP", "PromptTTS")


def make_transcript(rng: np.random.Generator) -> str:
    s = SUBJECTS[rng.integers(len(SUBJECTS))]
    v = VERBS[rng.integers(len(VERBS))]
    o = OBJECTS[rng.integers(len(OBJECTS))]
    t = TAILS[rng.integers(len(TAILS))]
    return f"{s[0].upper()}{s[1:]} {v} {o}{t}."


def make_metadata(n: int, seed: int = 0, unspecified_rate: float = 0.1) -> list[MetadataRecord]:
    """``n`` random records; each attribute is unspecified with ``unspecified_rate``."""
    rng = np.random.default_rng(seed)

    def pick(values: Sequence[str]) -> str:
        if rng.random() < unspecified_rate:
            return "unspecified"
        concrete = [v for v in values if v != "unspecified"]
        return concrete[rng.integers(len(concrete))]

    out = []
    for i in range(n):
        out.append(MetadataRecord(
            audio_id=f"utt{i:05d}",
            transcript=make_transcript(rng),
            gender=pick(GENDERS),
            pitch=pick(PITCHES),
            volume=pick(VOLUMES),
            speed=pick(SPEEDS),
            emotion=pick(EMOTIONS + ("unspecified",)),
            duration_s=round(float(rng.uniform(1.5, 8.0)), 2),
            source=SOURCES[i % len(SOURCES)],
        ))
    return out


# question templates: (dimension, attribute, instruction, options)
QUESTIONS = (
    ("SPK", "gender", "What is the gender of the speaker? Answer 'male' or 'female'.", ("male", "female")),
    ("PAR", "pitch", "Is the pitch of the voice low, normal or high? Answer 'low', 'normal' or 'high'.",
     ("low", "normal", "high")),
    ("PAR", "speed", "Does the speaker talk in a fast pace? Answer 'yes' or 'no'.", ("yes", "no")),
    ("DEG", "volume", "Is the speech loud? Answer 'yes' or 'no'.", ("yes", "no")),
    ("CON", "transcript", "Does the speaker mention a door? Answer 'yes' or 'no'.", ("yes", "no")),
    ("SEM", "emotion", "Does the speaker sound happy? Answer 'yes' or 'no'.", ("yes", "no")),
)


def _label(record: MetadataRecord, attribute: str, instruction: str) -> str | None:
    value = record.transcript if attribute == "transcript" else getattr(record, attribute)
    if value == "unspecified":
        return None
    if attribute == "speed":
        return "yes" if value == "fast" else "no"
    if attribute == "volume":
        return "yes" if value == "loud" else "no"
    if attribute == "transcript":
        return "yes" if "door" in value else "no"
    if attribute == "emotion":
        return "yes" if value == "happy" else "no"
    return value


def make_tasks(records: Sequence[MetadataRecord], samples_per_instance: int = 10) -> list[TaskInstance]:
    """One instance per question and split; seen and unseen use disjoint audios."""
    half = len(records) // 2
    pools = {"seen": records[:half], "unseen": records[half:]}
    tasks = []
    for dim, attr, instruction, options in QUESTIONS:
        for split, pool in pools.items():
            samples = []
            for r in pool:
                label = _label(r, attr, instruction)
                if label is None:
                    continue
                samples.append(TaskSample(instruction, r.audio_id, label, list(options)))
                if len(samples) >= samples_per_instance:
                    break
            if samples:
                tasks.append(TaskInstance(f"{split}-{dim}-{attr}", dim, split, samples))
    return tasks


def write_toy_corpus(out_dir: str | Path, n: int = 24, seed: int = 0, frames: int = 50,
                     feature_dim: int = 8, samples_per_instance: int = 6) -> dict[str, Path]:
    """Write metadata, feature files and a task manifest under ``out_dir``."""
    out = Path(out_dir)
    feat_dir = out / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    records = make_metadata(n, seed)
    write_jsonl(out / "metadata.jsonl", records)
    for r in records:
        write_features(feat_dir / f"{r.audio_id}.feat", synthesize_features(r, frames, feature_dim, seed))
    write_tasks(out / "tasks.jsonl", make_tasks(records, samples_per_instance))
    return {"metadata": out / "metadata.jsonl", "features": feat_dir, "tasks": out / "tasks.jsonl"}
