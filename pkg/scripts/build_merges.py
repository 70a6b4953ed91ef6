"""Regenerate src/desta/data/merges.txt from synthetic captions and prompts."""

from pathlib import Path

from desta.captions import generate_dataset, load_prompts, load_templates
from desta.synthetic import QUESTIONS, make_metadata
from desta.tokenizer import ByteTokenizer, format_merges, train_merges
from desta.trainer import CAPTION_PROMPTS

NUM_MERGES = 256


def corpus():
    records = make_metadata(1500, seed=123)
    caps, _ = generate_dataset(records, load_prompts(), load_templates(), n=3, seed=123,
                               tokenizer=ByteTokenizer())
    yield from (c.caption for c in caps)
    yield from (r.transcript for r in records)
    for _ in range(50):
        yield from CAPTION_PROMPTS
        yield from (q[2] for q in QUESTIONS)


if __name__ == "__main__":
    merges = train_merges(corpus(), NUM_MERGES)
    out = Path(__file__).resolve().parents[1] / "src" / "desta" / "data" / "merges.txt"
    out.write_text(format_merges(merges), encoding="utf-8")
    print(f"wrote {len(merges)} merges to {out}")
