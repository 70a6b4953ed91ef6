"""Text generators that turn template sentences into a caption.

Two implementations share one call signature:

* :class:`OfflineParaphraser` - rule-based clause reordering and synonym
  substitution, a pure function of its inputs.
* :class:`RemoteGenerator` - posts ``{"prompt", "seed_sentences"}`` to an HTTP
  endpoint and expects ``{"caption"}`` back.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
from functools import lru_cache
from importlib import resources
from typing import Protocol, Sequence

import numpy as np
import requests

from .templates import PromptSpec

log = logging.getLogger(__name__)

ENDPOINT_ENV = "DESTA_GENERATOR_URL"

_QUOTED = re.compile(r'"[^"]*"')
_SENT = re.compile(r"(?<=[.!?])\s+")
_WORD = re.compile(r"[A-Za-z]+")

OPENERS = {
    "vivid": ("In this clip, ", "Listen closely: ", ""),
    "formal": ("The recording presents the following. ", ""),
    "concise": ("",),
}


class GeneratorError(RuntimeError):
    """The generator could not produce a caption."""


class TextGenerator(Protocol):
    kind: str

    def generate(self, prompt: PromptSpec, seed_sentences: Sequence[str], seed: int) -> str: ...


@lru_cache(maxsize=1)
def _synonyms() -> dict[str, tuple[str, ...]]:
    raw = json.loads(resources.files("desta.data").joinpath("synonyms.json").read_text(encoding="utf-8"))
    return {k: tuple(v) for k, v in raw.items()}


class OfflineParaphraser:
    """Deterministic rule-based paraphraser.

    Quoted spans are shielded, sentences other than the one carrying the
    transcript are shuffled, and words from a fixed synonym table are swapped.
    """

    kind = "offline"

    def __init__(self, synonyms: dict[str, Sequence[str]] | None = None) -> None:
        self.synonyms = {k: tuple(v) for k, v in (synonyms or _synonyms()).items()}

    def generate(self, prompt: PromptSpec, seed_sentences: Sequence[str], seed: int) -> str:
        rng = np.random.default_rng(seed)
        shielded: list[str] = []

        def shield(m: re.Match) -> str:
            shielded.append(m.group(0))
            return f"\x00{len(shielded) - 1}\x00"

        sentences = []
        for s in seed_sentences:
            sentences += [p for p in _SENT.split(_QUOTED.sub(shield, s.strip())) if p]
        anchors = [s for s in sentences if "\x00" in s]
        rest = [s for s in sentences if "\x00" not in s]
        order = rng.permutation(len(rest))
        sentences = anchors + [rest[i] for i in order]

        def swap(m: re.Match) -> str:
            word = m.group(0)
            choices = self.synonyms.get(word.lower())
            if not choices:
                return word
            pick = choices[int(rng.integers(len(choices)))]
            return pick.capitalize() if word[0].isupper() else pick

        body = " ".join(_WORD.sub(swap, s) for s in sentences)
        openers = OPENERS.get(prompt.style, ("",))
        opener = openers[int(rng.integers(len(openers)))]
        if opener.endswith((", ", ": ")) and body[:1].isalpha():
            body = body[0].lower() + body[1:]
        text = opener + body
        return re.sub(r"\x00(\d+)\x00", lambda m: shielded[int(m.group(1))], text)


class RemoteGenerator:
    """Client for an HTTP caption service.

    The endpoint comes from the constructor or the ``DESTA_GENERATOR_URL``
    environment variable. Each call is retried ``retries`` times before
    :class:`GeneratorError` is raised.
    """

    kind = "remote"

    def __init__(self, endpoint: str | None = None, timeout: float = 30.0, retries: int = 3,
                 backoff: float = 0.5, session: requests.Session | None = None) -> None:
        endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
        if not endpoint:
            raise GeneratorError(f"no generator endpoint configured (set {ENDPOINT_ENV})")
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.session = session or requests.Session()

    def generate(self, prompt: PromptSpec, seed_sentences: Sequence[str], seed: int) -> str:
        payload = {"prompt": prompt.instruction, "seed_sentences": list(seed_sentences)}
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self.session.post(self.endpoint, json=payload, timeout=self.timeout)
                resp.raise_for_status()
                caption = resp.json()["caption"]
                if not isinstance(caption, str) or not caption.strip():
                    raise ValueError("empty caption in response")
                return caption
            except (requests.RequestException, ValueError, KeyError) as exc:
                last = exc
                log.warning("generator attempt %d/%d failed: %s", attempt + 1, self.retries + 1, exc)
                if attempt < self.retries and self.backoff:
                    time.sleep(self.backoff * 2**attempt)
        raise GeneratorError(f"remote generator failed after {self.retries + 1} attempts: {last}")
