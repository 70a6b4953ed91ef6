import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from desta.adapter import (AdapterConfigError, CnnAdapterConfig, LayerWeights, ModalityAdapter, QformerConfig,
                           weighted_layer_sum)
from desta.captions import MetadataRecord
from desta.encoder import (AudioFeatureFile, EncoderConfig, EncoderError, EncoderOutput, EncoderStub,
                           MissingTranscriptError, TranscriptStore, read_features, synthesize_features,
                           write_features)
from desta.tensor import ShapeError, Tensor, conv1d_length, no_grad

REC = MetadataRecord("a", "hello", gender="male", pitch="high")


# --- encoder stub ------------------------------------------------------------


def test_encoder_is_deterministic_and_read_only():
    feats = synthesize_features(REC, 50, 8)
    a = EncoderStub(EncoderConfig(seed=3)).encode(feats)
    b = EncoderStub(EncoderConfig(seed=3)).encode(feats)
    assert a.layers.shape == (4, 50, 16)
    assert np.array_equal(a.layers, b.layers)
    with pytest.raises(ValueError):
        a.layers[0, 0, 0] = 1.0


def test_encoder_parameters_are_frozen():
    enc = EncoderStub(EncoderConfig())
    assert all(p.frozen for _, p in enc.named_parameters())
    assert enc.num_parameters(trainable_only=True) == 0


def test_encoder_pads_and_truncates():
    enc = EncoderStub(EncoderConfig(frames=10, feature_dim=3))
    assert enc.encode(np.ones((4, 3))).frames == 10
    assert enc.encode(np.ones((40, 3))).frames == 10
    with pytest.raises(EncoderError):
        enc.encode(np.ones((0, 3)))
    with pytest.raises(EncoderError, match="feature dim"):
        enc.encode(np.ones((5, 4)))


def test_encoder_output_rejects_nonfinite():
    bad = np.zeros((2, 3, 4))
    bad[1, 1, 1] = np.nan
    with pytest.raises(EncoderError):
        EncoderOutput(bad)


def test_synthetic_features_encode_attributes():
    female = synthesize_features(MetadataRecord("a", "hello", gender="female"), 30, 8)
    male = synthesize_features(MetadataRecord("a", "hello", gender="male"), 30, 8)
    assert np.allclose(female.features[:, 0] - male.features[:, 0], 2.0)


def test_feature_file_round_trip(tmp_path):
    item = AudioFeatureFile("utt-é", np.arange(12.0).reshape(4, 3))
    write_features(tmp_path / "f.feat", item)
    back = read_features(tmp_path / "f.feat")
    assert back.audio_id == "utt-é" and np.array_equal(back.features, item.features)
    data = (tmp_path / "f.feat").read_bytes()
    (tmp_path / "cut.feat").write_bytes(data[:-1])
    with pytest.raises(EncoderError, match="truncated"):
        read_features(tmp_path / "cut.feat")


def test_transcript_store_missing_id():
    store = TranscriptStore.from_records([REC])
    assert store.lookup("a") == "hello"
    with pytest.raises(MissingTranscriptError, match="zz"):
        store.lookup("zz")


# --- layer weighting -----------------------------------------------------------


def test_weighted_sum_uniform_at_init_equals_mean():
    stack = np.random.default_rng(0).normal(size=(4, 6, 5))
    out = weighted_layer_sum(EncoderOutput(stack), LayerWeights(4)).data
    np.testing.assert_allclose(out, stack.mean(0), atol=1e-14)


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3))
@settings(max_examples=40, deadline=None)
def test_weighted_sum_is_convex_combination(logits):
    stack = np.random.default_rng(1).normal(size=(3, 4, 2))
    w = LayerWeights(3)
    w.logits.data[...] = logits
    out = weighted_layer_sum(stack, w).data
    assert np.all(out <= stack.max(0) + 1e-12) and np.all(out >= stack.min(0) - 1e-12)
    np.testing.assert_allclose(w.weights().data.sum(), 1.0, atol=1e-12)


def test_layer_count_mismatch():
    with pytest.raises(ShapeError, match="3 layers"):
        weighted_layer_sum(np.zeros((3, 2, 2)), LayerWeights(4))


def test_layer_indices_select_a_subset():
    ad = ModalityAdapter("qformer", 4, QformerConfig(16, 32, 32, num_queries=8), np.random.default_rng(0),
                         layer_indices=(1, 3))
    assert ad.layer_weights.num_layers == 2
    with no_grad():
        assert ad(EncoderOutput(np.zeros((4, 10, 16)))).shape == (8, 32)


# --- adapter bodies --------------------------------------------------------------


def _enc(t):
    return EncoderOutput(np.random.default_rng(t).normal(size=(4, t, 16)))


@pytest.mark.parametrize("kernel,stride,padding", [(5, 5, 0), (3, 2, 1), (4, 1, 2)])
@pytest.mark.parametrize("t", [25, 61, 100])
def test_cnn_output_length(kernel, stride, padding, t):
    cfg = CnnAdapterConfig(16, 8, 32, kernel, stride, padding)
    ad = ModalityAdapter("cnn", 4, cfg, np.random.default_rng(0))
    expect = conv1d_length(conv1d_length(t, kernel, stride, padding), kernel, stride, padding)
    assert ad.output_length(t) == expect
    with no_grad():
        assert ad(_enc(t)).shape == (expect, 32)


def test_cnn_too_short_input_names_minimum():
    ad = ModalityAdapter("cnn", 4, CnnAdapterConfig(16, 8, 32), np.random.default_rng(0))
    assert CnnAdapterConfig(16, 8, 32).min_frames() == 25
    with pytest.raises(ShapeError, match="at least 25 frames"):
        ad(_enc(24))


def test_qformer_head_divisibility():
    with pytest.raises(AdapterConfigError):
        QformerConfig(16, 30, 32, num_heads=4)


def test_qformer_output_independent_of_length():
    ad = ModalityAdapter("qformer", 4, QformerConfig(16, 32, 24, num_queries=5), np.random.default_rng(0))
    with no_grad():
        for t in (1, 3, 77):
            assert ad(_enc(t)).shape == (5, 24)


def test_qformer_without_positions_is_permutation_invariant():
    ad = ModalityAdapter("qformer", 4, QformerConfig(16, 32, 24, num_queries=5), np.random.default_rng(0))
    enc = _enc(9)
    perm = EncoderOutput(enc.layers[:, ::-1])
    with no_grad():
        np.testing.assert_allclose(ad(enc).data, ad(perm).data, atol=1e-12)
    pos = ModalityAdapter("qformer", 4, QformerConfig(16, 32, 24, num_queries=5, encoder_positions=True),
                          np.random.default_rng(0))
    with no_grad():
        assert not np.allclose(pos(enc).data, pos(perm).data)


def test_unknown_adapter_kind():
    with pytest.raises(AdapterConfigError):
        ModalityAdapter("rnn", 4, QformerConfig(16, 32, 32), np.random.default_rng(0))
