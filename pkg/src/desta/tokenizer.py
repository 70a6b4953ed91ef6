"""Byte-level tokenizer with a small shipped merge table."""

from __future__ import annotations

from collections import Counter
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

BOS = 256
EOS = 257
PAD = 258
NUM_SPECIAL = 3
SPECIAL_NAMES = {BOS: "<bos>", EOS: "<eos>", PAD: "<pad>"}


class ByteTokenizer:
    """Bytes 0-255, three special ids, then one id per merge rule.

    Encoding applies merges in rank order over each whitespace-led chunk, so
    decoding any encoding reproduces the input text exactly.
    """

    def __init__(self, merges: Sequence[tuple[bytes, bytes]] = ()) -> None:
        self.merges = [(bytes(a), bytes(b)) for a, b in merges]
        self.vocab: list[bytes] = [bytes([i]) for i in range(256)] + [b"", b"", b""]
        self._ranks: dict[tuple[int, int], int] = {}
        self._token_id: dict[bytes, int] = {bytes([i]): i for i in range(256)}
        for a, b in self.merges:
            ia, ib = self._token_id[a], self._token_id[b]
            new_id = len(self.vocab)
            self._ranks[(ia, ib)] = new_id
            self.vocab.append(a + b)
            self._token_id.setdefault(a + b, new_id)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    bos_id = BOS
    eos_id = EOS
    pad_id = PAD

    @classmethod
    def from_file(cls, path: str | Path) -> "ByteTokenizer":
        return cls(_read_merges(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def default(cls) -> "ByteTokenizer":
        return _default_tokenizer()

    def _encode_chunk(self, chunk: bytes) -> list[int]:
        ids = list(chunk)
        while len(ids) > 1:
            best = None
            for i in range(len(ids) - 1):
                r = self._ranks.get((ids[i], ids[i + 1]))
                if r is not None and (best is None or r < best[0]):
                    best = (r, i)
            if best is None:
                break
            r, _ = best
            merged: list[int] = []
            i = 0
            while i < len(ids):
                if i < len(ids) - 1 and self._ranks.get((ids[i], ids[i + 1])) == r:
                    merged.append(r)
                    i += 2
                else:
                    merged.append(ids[i])
                    i += 1
            ids = merged
        return ids

    def encode(self, text: str) -> list[int]:
        out: list[int] = []
        for chunk in _chunks(text.encode("utf-8")):
            out.extend(self._encode_chunk(chunk))
        return out

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> str:
        parts = []
        for i in ids:
            i = int(i)
            if BOS <= i < BOS + NUM_SPECIAL:
                if not skip_special:
                    parts.append(SPECIAL_NAMES[i].encode())
                continue
            parts.append(self.vocab[i])
        return b"".join(parts).decode("utf-8", errors="replace")

    def count(self, text: str) -> int:
        return len(self.encode(text))


def _chunks(data: bytes) -> list[bytes]:
    """Split before every space so merges never cross word boundaries."""
    out, start = [], 0
    for i in range(1, len(data)):
        if data[i] == 0x20 and data[i - 1] != 0x20:
            out.append(data[start:i])
            start = i
    if data:
        out.append(data[start:])
    return out


def _read_merges(text: str) -> list[tuple[bytes, bytes]]:
    merges = []
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        a, b = line.split(" ")
        merges.append((bytes.fromhex(a), bytes.fromhex(b)))
    return merges


def format_merges(merges: Sequence[tuple[bytes, bytes]]) -> str:
    lines = ["# byte-pair merges, one per line: <hex left> <hex right>"]
    lines += [f"{a.hex()} {b.hex()}" for a, b in merges]
    return "\n".join(lines) + "\n"


def train_merges(corpus: Iterable[str], num_merges: int) -> list[tuple[bytes, bytes]]:
    """Greedy byte-pair merge learning; ties broken by the smaller pair bytes."""
    words = Counter()
    for text in corpus:
        for chunk in _chunks(text.encode("utf-8")):
            words[tuple(bytes([c]) for c in chunk)] += 1
    merges = []
    for _ in range(num_merges):
        pairs: Counter = Counter()
        for w, n in words.items():
            for a, b in zip(w, w[1:]):
                pairs[(a, b)] += n
        if not pairs:
            break
        (a, b), freq = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))
        if freq < 2:
            break
        merges.append((a, b))
        new_words: Counter = Counter()
        for w, n in words.items():
            out, i = [], 0
            while i < len(w):
                if i < len(w) - 1 and w[i] == a and w[i + 1] == b:
                    out.append(a + b)
                    i += 2
                else:
                    out.append(w[i])
                    i += 1
            new_words[tuple(out)] += n
        words = new_words
    return merges


@lru_cache(maxsize=1)
def _default_tokenizer() -> ByteTokenizer:
    text = resources.files("desta.data").joinpath("merges.txt").read_text(encoding="utf-8")
    return ByteTokenizer(_read_merges(text))
