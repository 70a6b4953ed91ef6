import numpy as np
import pytest

from desta.encoder import EncoderConfig, synthesize_features
from desta.lm import TinyLMConfig
from desta.lora import LoRAConfig
from desta.model import AdapterSettings, ModelConfig, SpeechLM
from desta.synthetic import make_metadata
from desta.tokenizer import ByteTokenizer
from desta.trainer import assemble_input

# acceptance lines collected across the session, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, name: str, passed: bool, detail: str) -> None:
    line = f"ACCEPTANCE {number:>2} {'PASS' if passed else 'FAIL'} {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tokenizer():
    return ByteTokenizer.default()


def toy_config(tokenizer, kind="qformer", rank=4, num_queries=64, seed=0, lora=True):
    """L=4, D=16, T=50 encoder; 2-layer d=32 LM; LoRA rank ``rank`` on q/k/v."""
    return ModelConfig(
        encoder=EncoderConfig(num_layers=4, dim=16, frames=50, feature_dim=8),
        adapter=AdapterSettings(kind=kind, qformer_dim=32, num_queries=num_queries, cnn_mid_dim=32),
        lm=TinyLMConfig(tokenizer.vocab_size, num_layers=2, num_heads=4, d_model=32),
        lora=LoRAConfig(rank=rank, alpha=float(rank)) if lora else None,
        seed=seed,
    )


@pytest.fixture
def toy_model(tokenizer):
    return SpeechLM(toy_config(tokenizer), tokenizer)


def caption_examples(model, records, captions, prompt="Describe the speech."):
    cfg = model.encoder.config
    return [
        assemble_input(model.encode(synthesize_features(r, cfg.frames, cfg.feature_dim)), r.transcript, prompt, c,
                       tokenizer=model.tokenizer, prefix_len=model.prefix_length(),
                       max_seq_len=model.lm.config.max_seq_len, audio_id=r.audio_id)
        for r, c in zip(records, captions)
    ]


@pytest.fixture(scope="session")
def records():
    return make_metadata(12, seed=3)


def randomize_lora(model, seed=1, std=0.1):
    rng = np.random.default_rng(seed)
    for pair in model.lora_pairs():
        pair.B.data[...] = rng.normal(0.0, std, size=pair.B.shape)
