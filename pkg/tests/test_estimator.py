import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from desta.captions import CaptionRecord
from desta.encoder import read_features, synthesize_features, write_features
from desta.estimator import (CaptionGenerator, SpeechCaptioner, check_features, check_lora_scale, check_metadata,
                             check_speech_inputs)
from desta.runtime import FeatureSource
from desta.synthetic import make_metadata
from desta.tokenizer import BOS, ByteTokenizer, _chunks, train_merges


def _inputs(n, seed=0):
    recs = make_metadata(n, seed=seed)
    return [(synthesize_features(r, 50, 8).features, r.transcript) for r in recs], recs


def test_validation_helpers():
    with pytest.raises(TypeError):
        check_metadata([3])
    with pytest.raises(ValueError):
        check_metadata([])
    assert check_metadata([{"audio_id": "a", "transcript": "hi"}])[0].audio_id == "a"
    with pytest.raises(ValueError, match="2-D"):
        check_features(np.zeros(5))
    with pytest.raises(ValueError, match="channels"):
        check_features(np.zeros((4, 3)), feature_dim=8)
    with pytest.raises(ValueError, match="NaN"):
        check_features(np.full((2, 8), np.nan))
    with pytest.raises(TypeError, match="transcript"):
        check_speech_inputs([(np.zeros((2, 8)), 5)])
    with pytest.raises(ValueError):
        check_lora_scale(-0.1)


def test_caption_generator_transform():
    gen = CaptionGenerator(n=2, seed=1)
    assert clone(gen).get_params() == gen.get_params()
    caps = gen.fit().transform(make_metadata(5, seed=0))
    assert len(caps) == 10 and all(isinstance(c, CaptionRecord) for c in caps)
    assert len(gen.skips_) == 0
    with pytest.raises(ValueError):
        CaptionGenerator(generator="gpt").fit()


def test_speech_captioner_fit_transform_predict():
    X, recs = _inputs(4)
    y = [f'The speaker says "{r.transcript}".' for r in recs]
    est = SpeechCaptioner(adapter="cnn", lora_rank=2, epochs=1, batch_size=2, frames=50, d_model=16,
                          max_new_tokens=3)
    assert clone(est).get_params()["lora_rank"] == 2
    est.fit(X, y)
    assert len(est.train_losses_) == 2 and all(np.isfinite(est.train_losses_))
    prefix = est.transform(X[:3])
    assert prefix.shape[0] == 3 and prefix.shape[2] == 16
    out = est.predict(X[:2])
    assert len(out) == 2 and all(isinstance(s, str) for s in out)
    with pytest.raises(ValueError, match="targets"):
        est.fit(X, y[:1])


def test_unfitted_estimator_raises():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        SpeechCaptioner().predict([(np.zeros((4, 8)), "hi")])


# --- runtime feature lookup --------------------------------------------------------


def test_feature_source_prefers_files_and_falls_back(tmp_path):
    recs = make_metadata(2, seed=0)
    custom = synthesize_features(recs[0], 7, 8, seed=99)
    write_features(tmp_path / f"{recs[0].audio_id}.feat", custom)
    src = FeatureSource({r.audio_id: r for r in recs}, 20, 8, tmp_path)
    assert src.get(recs[0].audio_id).features.shape == (7, 8)
    assert src.get(recs[1].audio_id).features.shape == (20, 8)
    with pytest.raises(KeyError):
        src.get("missing")
    assert np.array_equal(read_features(tmp_path / f"{recs[0].audio_id}.feat").features, custom.features)


# --- tokenizer ---------------------------------------------------------------------


@given(st.text(max_size=60))
@settings(max_examples=150, deadline=None)
def test_tokenizer_round_trip(text):
    tok = ByteTokenizer.default()
    ids = tok.encode(text)
    assert tok.decode(ids) == text and tok.count(text) == len(ids)


def test_tokenizer_specials_and_vocab():
    tok = ByteTokenizer.default()
    assert tok.vocab_size == 515 and tok.bos_id == BOS == 256
    assert tok.decode([BOS, 104, 105, tok.eos_id]) == "hi"


def test_merges_never_cross_spaces():
    merges = train_merges(["ab ab ab ab"], 10)
    assert all(b" " not in (a + b)[1:] for a, b in merges)
    tok = ByteTokenizer(merges)
    pieces = [tok.vocab[i] for i in tok.encode("ab ab")]
    assert b"".join(pieces) == b"ab ab" and all(b" " not in p[1:] for p in pieces)
    assert _chunks(b"a  b") == [b"a", b"  b"]
