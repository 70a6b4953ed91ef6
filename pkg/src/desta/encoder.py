"""Frozen speech-encoder stand-in and the pre-computed transcript table.

The stub is a seeded stack of fixed random projections with a tanh
nonlinearity and residual connections. It emits one ``T x D`` hidden state per
layer, the shape the modality adapter consumes.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .captions.records import MetadataRecord, read_jsonl
from .nn import Module
from .tensor import Parameter

WHISPER_FRAMES = 1500
FEATURE_MAGIC = b"DESTAFEA"


class EncoderError(ValueError):
    pass


class MissingTranscriptError(KeyError):
    def __init__(self, audio_id: str) -> None:
        super().__init__(f"missing transcript for audio_id {audio_id!r}")
        self.audio_id = audio_id

    def __str__(self) -> str:
        return self.args[0]


@dataclass(frozen=True)
class AudioFeatureFile:
    audio_id: str
    features: np.ndarray  # (T0, F)

    def __post_init__(self) -> None:
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 2:
            raise EncoderError(f"{self.audio_id}: features must be 2-D (T0 x F), got shape {f.shape}")
        object.__setattr__(self, "features", f)


@dataclass(frozen=True)
class EncoderOutput:
    """Per-layer hidden states stacked as an (L, T, D) array."""

    layers: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.layers, dtype=np.float64)
        if arr.ndim != 3:
            raise EncoderError(f"encoder output must be (L, T, D), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise EncoderError("encoder output contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "layers", arr)

    @property
    def num_layers(self) -> int:
        return self.layers.shape[0]

    @property
    def frames(self) -> int:
        return self.layers.shape[1]

    @property
    def dim(self) -> int:
        return self.layers.shape[2]

    def select(self, indices: Iterable[int]) -> "EncoderOutput":
        return EncoderOutput(self.layers[list(indices)])


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 4
    dim: int = 16
    frames: int = 50
    feature_dim: int = 8
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("num_layers", "dim", "frames", "feature_dim"):
            if getattr(self, name) < 1:
                raise EncoderError(f"encoder {name} must be >= 1")


class EncoderStub(Module):
    """Deterministic frozen encoder; weights depend only on the config."""

    def __init__(self, config: EncoderConfig) -> None:
        self._config = config
        rng = np.random.default_rng([config.seed & 0xFFFFFFFF, 0xE1C0])
        d, f = config.dim, config.feature_dim
        self.input_proj = Parameter(rng.normal(0.0, 1.0 / np.sqrt(f), size=(f, d)), "input_proj", frozen=True)
        self.layer_weights = [
            Parameter(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d)), f"layer{i}.weight", frozen=True)
            for i in range(config.num_layers)
        ]
        self.layer_biases = [
            Parameter(rng.normal(0.0, 0.1, size=d), f"layer{i}.bias", frozen=True)
            for i in range(config.num_layers)
        ]

    @property
    def config(self) -> EncoderConfig:
        return self._config

    def fit_frames(self, features: np.ndarray) -> np.ndarray:
        """Zero-pad or truncate to the configured frame count."""
        T = self._config.frames
        if features.shape[0] >= T:
            return features[:T]
        return np.concatenate([features, np.zeros((T - features.shape[0], features.shape[1]))], axis=0)

    def encode(self, features: AudioFeatureFile | np.ndarray) -> EncoderOutput:
        x = features.features if isinstance(features, AudioFeatureFile) else np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1 or x.size == 0:
            raise EncoderError(f"empty or malformed features: shape {x.shape}")
        if x.shape[1] != self._config.feature_dim:
            raise EncoderError(f"feature dim {x.shape[1]} != configured {self._config.feature_dim}")
        h = np.tanh(self.fit_frames(x) @ self.input_proj.data)
        outs = []
        for w, b in zip(self.layer_weights, self.layer_biases):
            h = h + np.tanh(h @ w.data + b.data)
            outs.append(h)
        return EncoderOutput(np.stack(outs))


def encode(features: AudioFeatureFile, config: EncoderConfig) -> EncoderOutput:
    return EncoderStub(config).encode(features)


# ---------------------------------------------------------------------------
# feature files


def write_features(path: str | Path, item: AudioFeatureFile) -> None:
    """Header: magic, uint16 id length, id bytes, uint32 rows, uint32 cols; then <f8 payload."""
    aid = item.audio_id.encode("utf-8")
    rows, cols = item.features.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<H", len(aid)))
        fh.write(aid)
        fh.write(struct.pack("<II", rows, cols))
        fh.write(np.ascontiguousarray(item.features, dtype="<f8").tobytes())


def read_features(path: str | Path) -> AudioFeatureFile:
    raw = Path(path).read_bytes()
    if raw[:8] != FEATURE_MAGIC:
        raise EncoderError(f"{path}: not a feature file")
    (n,) = struct.unpack("<H", raw[8:10])
    aid = raw[10:10 + n].decode("utf-8")
    rows, cols = struct.unpack("<II", raw[10 + n:18 + n])
    if len(raw) < 18 + n + 8 * rows * cols:
        raise EncoderError(f"{path}: truncated feature payload")
    data = np.frombuffer(raw, dtype="<f8", count=rows * cols, offset=18 + n).astype(np.float64)
    item = AudioFeatureFile(aid, data.reshape(rows, cols))
    if rows < 1:
        raise EncoderError(f"{path}: feature file has no frames")
    return item


_ATTR_CODES = {
    "gender": {"male": -1.0, "female": 1.0},
    "pitch": {"low": -1.0, "normal": 0.0, "high": 1.0},
    "volume": {"soft": -1.0, "normal": 0.0, "loud": 1.0},
    "speed": {"slow": -1.0, "normal": 0.0, "fast": 1.0},
}


def synthesize_features(record: MetadataRecord, frames: int, feature_dim: int, seed: int = 0) -> AudioFeatureFile:
    """Synthetic features whose first channels encode the record's attributes.

    Channel ``k`` of the first four carries gender/pitch/volume/speed as a
    constant offset; the remaining channels hold transcript-seeded noise.
    """
    rng = np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(record.audio_id.encode("utf-8"))])
    x = 0.3 * rng.normal(size=(frames, feature_dim))
    content = np.random.default_rng(zlib.crc32(record.transcript.encode("utf-8"))).normal(size=feature_dim)
    x += 0.5 * content
    for k, (attr, codes) in enumerate(_ATTR_CODES.items()):
        if k < feature_dim:
            x[:, k] += codes.get(getattr(record, attr), 0.0)
    return AudioFeatureFile(record.audio_id, x)


# ---------------------------------------------------------------------------
# transcripts


class TranscriptStore:
    """Pre-computed transcripts keyed by audio_id."""

    def __init__(self, transcripts: Mapping[str, str]) -> None:
        self._table = dict(transcripts)

    @classmethod
    def from_records(cls, records: Iterable[MetadataRecord]) -> "TranscriptStore":
        return cls({r.audio_id: r.transcript for r in records})

    @classmethod
    def from_manifest(cls, path: str | Path) -> "TranscriptStore":
        return cls.from_records(read_jsonl(path, MetadataRecord))

    def __len__(self) -> int:
        return len(self._table)

    def __contains__(self, audio_id: str) -> bool:
        return audio_id in self._table

    def lookup(self, audio_id: str) -> str:
        try:
            return self._table[audio_id]
        except KeyError:
            raise MissingTranscriptError(audio_id) from None


def transcribe_lookup(audio_id: str, store: TranscriptStore) -> str:
    return store.lookup(audio_id)
