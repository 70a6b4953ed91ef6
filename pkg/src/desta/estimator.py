"""scikit-learn style wrappers around the caption pipeline and the speech model.

``CaptionGenerator`` turns metadata records into caption records.
``SpeechCaptioner`` trains adapter + LoRA on (features, transcript) inputs
with caption targets, then decodes responses.

Example:
    >>> est = SpeechCaptioner(epochs=1)                       # doctest: +SKIP
    >>> est.fit(X, captions).predict(X[:2])                   # doctest: +SKIP
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .captions import OfflineParaphraser, RemoteGenerator, generate_dataset, load_prompts, load_templates
from .captions.records import MetadataRecord, from_dict
from .encoder import EncoderConfig, EncoderOutput
from .lm import TinyLMConfig
from .lora import LoRAConfig
from .model import AdapterSettings, ModelConfig, SpeechLM
from .seeding import derive_seed
from .tokenizer import ByteTokenizer
from .trainer import CAPTION_PROMPTS, TrainerConfig, assemble_input, context_tokens, fit


# ---------------------------------------------------------------------------
# validation helpers


def check_metadata(X) -> list[MetadataRecord]:
    """Accept MetadataRecord instances or plain dicts; reject anything else."""
    out = []
    for i, x in enumerate(X):
        if isinstance(x, MetadataRecord):
            out.append(x)
        elif isinstance(x, dict):
            out.append(from_dict(MetadataRecord, x))
        else:
            raise TypeError(f"X[{i}]: expected MetadataRecord or dict, got {type(x).__name__}")
    if not out:
        raise ValueError("X is empty")
    return out


def check_features(features, feature_dim: int | None = None, name: str = "features") -> np.ndarray:
    """Return a finite float64 ``(frames, feature_dim)`` array."""
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name}: expected a 2-D (frames, feature_dim) array, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name}: no frames")
    if feature_dim is not None and arr.shape[1] != feature_dim:
        raise ValueError(f"{name}: expected {feature_dim} feature channels, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains NaN or inf")
    return arr


def check_speech_inputs(X, feature_dim: int | None = None) -> list[tuple[np.ndarray, str]]:
    """``X`` is a sequence of ``(features, transcript)`` pairs or ``{"features", "transcript"}`` dicts."""
    out = []
    for i, x in enumerate(X):
        if isinstance(x, dict):
            feats, text = x.get("features"), x.get("transcript")
        else:
            try:
                feats, text = x
            except (TypeError, ValueError):
                raise TypeError(f"X[{i}]: expected (features, transcript)") from None
        if not isinstance(text, str):
            raise TypeError(f"X[{i}]: transcript must be str, got {type(text).__name__}")
        out.append((check_features(feats, feature_dim, f"X[{i}].features"), text))
    if not out:
        raise ValueError("X is empty")
    return out


def check_lora_scale(s: float) -> float:
    s = float(s)
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"lora_scale {s} outside [0, 1]")
    return s


# ---------------------------------------------------------------------------


class CaptionGenerator(TransformerMixin, BaseEstimator):
    """Metadata records -> validated caption records.

    Args:
        n: captions per audio.
        generator: ``"offline"`` or ``"remote"``.
        endpoint: remote generator URL (falls back to the environment variable).
        seed: root seed for template/prompt draws.
    """

    def __init__(self, n: int = 3, generator: str = "offline", endpoint: str | None = None, seed: int = 0,
                 templates_path: str | None = None, prompts_path: str | None = None):
        self.n = n
        self.generator = generator
        self.endpoint = endpoint
        self.seed = seed
        self.templates_path = templates_path
        self.prompts_path = prompts_path

    def fit(self, X=None, y=None):
        if self.generator not in ("offline", "remote"):
            raise ValueError(f"generator must be 'offline' or 'remote', got {self.generator!r}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        self.templates_ = load_templates(self.templates_path)
        self.prompts_ = load_prompts(self.prompts_path)
        return self

    def transform(self, X):
        check_is_fitted(self, "templates_")
        records = check_metadata(X)
        gen = RemoteGenerator(self.endpoint) if self.generator == "remote" else OfflineParaphraser()
        captions, skips = generate_dataset(records, self.prompts_, self.templates_, n=self.n, generator=gen,
                                           seed=self.seed)
        self.skips_ = skips
        return captions


class SpeechCaptioner(BaseEstimator):
    """Adapter + LoRA training on caption targets at desk scale.

    ``transform`` returns adapter prefixes ``(N, prefix_len, d_model)``;
    ``predict`` greedily decodes a response for each input.
    """

    def __init__(self, adapter: str = "qformer", num_queries: int = 32, lora_rank: int = 8,
                 lora_alpha: float | None = None, lora_scale: float = 1.0, lr_max: float = 1e-2,
                 lr_min: float = 0.0, epochs: int = 5, batch_size: int = 12, frames: int = 50,
                 feature_dim: int = 8, encoder_layers: int = 4, encoder_dim: int = 16, d_model: int = 32,
                 max_new_tokens: int = 32, prompts: Sequence[str] = CAPTION_PROMPTS, seed: int = 0):
        self.adapter = adapter
        self.num_queries = num_queries
        self.lora_rank = lora_rank
        self.lora_alpha = lora_alpha
        self.lora_scale = lora_scale
        self.lr_max = lr_max
        self.lr_min = lr_min
        self.epochs = epochs
        self.batch_size = batch_size
        self.frames = frames
        self.feature_dim = feature_dim
        self.encoder_layers = encoder_layers
        self.encoder_dim = encoder_dim
        self.d_model = d_model
        self.max_new_tokens = max_new_tokens
        self.prompts = prompts
        self.seed = seed

    def _build(self) -> SpeechLM:
        tok = ByteTokenizer.default()
        alpha = float(self.lora_rank if self.lora_alpha is None else self.lora_alpha)
        cfg = ModelConfig(
            encoder=EncoderConfig(self.encoder_layers, self.encoder_dim, self.frames, self.feature_dim),
            adapter=AdapterSettings(kind=self.adapter, num_queries=self.num_queries),
            lm=TinyLMConfig(tok.vocab_size, d_model=self.d_model),
            lora=LoRAConfig(self.lora_rank, alpha) if self.lora_rank > 0 else None,
            seed=self.seed,
        )
        return SpeechLM(cfg, tok)

    def _encode(self, X) -> list[tuple[EncoderOutput, str]]:
        return [(self.model_.encode(f), t) for f, t in check_speech_inputs(X, self.feature_dim)]

    def fit(self, X, y):
        if len(X) != len(y):
            raise ValueError(f"X has {len(X)} inputs but y has {len(y)} targets")
        check_lora_scale(self.lora_scale)
        self.model_ = self._build()
        encoded = self._encode(X)
        rng = np.random.default_rng(derive_seed(self.seed, "estimator-prompts"))
        prefix_len = self.model_.prefix_length()
        examples = [
            assemble_input(enc, text, self.prompts[int(rng.integers(len(self.prompts)))], str(target),
                           tokenizer=self.model_.tokenizer, prefix_len=prefix_len,
                           max_seq_len=self.model_.lm.config.max_seq_len)
            for (enc, text), target in zip(encoded, y)
        ]
        tcfg = TrainerConfig(lr_max=self.lr_max, lr_min=self.lr_min, epochs=self.epochs,
                             batch_size=self.batch_size, seed=derive_seed(self.seed, "trainer"))
        result = fit(examples, self.model_, tcfg)
        self.train_losses_ = result.losses
        self.n_features_in_ = self.feature_dim
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        from .tensor import no_grad

        with no_grad():
            return np.stack([self.model_.prefix(enc).data for enc, _ in self._encode(X)])

    def predict(self, X, prompt: str | None = None) -> list[str]:
        check_is_fitted(self, "model_")
        self.model_.set_lora_scale(check_lora_scale(self.lora_scale))
        prompt = self.prompts[0] if prompt is None else prompt
        out = []
        for enc, text in self._encode(X):
            tr, pr = context_tokens(self.model_.tokenizer, text, prompt)
            out.append(self.model_.tokenizer.decode(self.model_.generate(enc, tr + pr, self.max_new_tokens)))
        return out
