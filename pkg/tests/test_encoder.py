import numpy as np
import pytest

from reciter_id.audio_io import AudioClip
from reciter_id.encoder import (EncoderConfig, compute_mask_spec, feature_encoder, frame_align,
                                frame_valid_mask, init_encoder_params, log_mel_energies, mel_filter_edges,
                                mfcc, self_attention, span_mask, transformer_encode)
from reciter_id.errors import ClipTooShort, EmptyLabels, InputTooShort, ShapeMismatch
from reciter_id.numcore import Tensor, precision


def test_default_schedule():
    config = EncoderConfig()
    assert config.hop == 320
    assert config.receptive_field == 400
    assert config.output_length(16000) == 49
    assert config.output_length(400) == 1
    assert config.output_length(399) == 0


def test_feature_encoder_frame_rate():
    config = EncoderConfig()
    params = init_encoder_params(config, seed=0)
    waveform = Tensor(np.random.default_rng(0).uniform(-0.5, 0.5, 16000))
    assert feature_encoder(waveform, params, config).shape == (49, config.model_dim)
    with pytest.raises(InputTooShort):
        feature_encoder(Tensor(np.zeros(399)), params, config)


def test_feature_encoder_batched_matches_single(tiny_encoder, float64):
    params = init_encoder_params(tiny_encoder, seed=1)
    waves = np.random.default_rng(1).standard_normal((2, 200))
    batched = feature_encoder(Tensor(waves), params, tiny_encoder).data
    single = feature_encoder(Tensor(waves[1]), params, tiny_encoder).data
    np.testing.assert_allclose(batched[1], single, atol=1e-12)


def test_mfcc_frames():
    clip = AudioClip(np.random.default_rng(2).uniform(-0.5, 0.5, 16000))
    features = mfcc(clip)
    assert features.shape == (98, 13)
    silence = mfcc(AudioClip(np.zeros(16000))).data
    np.testing.assert_array_equal(silence, np.broadcast_to(silence[0], silence.shape))
    with pytest.raises(ClipTooShort):
        mfcc(AudioClip(np.zeros(399)))


def test_tone_peaks_in_its_filter():
    t = np.arange(16000) / 16000.0
    energies = log_mel_energies(AudioClip(0.5 * np.sin(2 * np.pi * 440.0 * t)))
    loudest = int(np.argmax(energies.mean(axis=0)))
    low, _, high = mel_filter_edges(16000)[loudest]
    assert low < 440.0 < high


def test_mask_spec_edge_cases():
    rng = np.random.default_rng(0)
    assert len(compute_mask_spec(49, 0.0, 10, rng)) == 0
    assert compute_mask_spec(49, 1.0, 10, rng).masked_indices == frozenset(range(49))
    spec = compute_mask_spec(5, 1.0, 10, rng)
    assert spec.masked_indices == frozenset(range(5))
    assert all(s + n <= 5 for s, n in spec.spans)
    spec = compute_mask_spec(20, 0.0, 3, rng, min_spans=1)
    assert len(spec.spans) == 1 and 1 <= len(spec) <= 3


def test_mask_fraction():
    fractions = [len(compute_mask_spec(10000, 0.065, 10, np.random.default_rng(seed))) / 10000
                 for seed in range(5)]
    assert np.mean(fractions) == pytest.approx(1 - (1 - 0.065) ** 10, abs=0.02)


def test_span_mask_replaces_with_embedding(tiny_encoder):
    frames = Tensor(np.random.default_rng(3).standard_normal((30, 16)))
    embedding = Tensor(np.full(16, 7.0))
    masked, spec = span_mask(frames, embedding, tiny_encoder, seed=4, min_spans=1)
    assert len(spec) > 0
    for t in range(30):
        expected = embedding.data if t in spec.masked_indices else frames.data[t]
        np.testing.assert_array_equal(masked.data[t], expected)


def test_span_mask_respects_valid_length(tiny_encoder):
    frames = Tensor(np.zeros((30, 16)))
    config = EncoderConfig(conv_layers=tiny_encoder.conv_layers, model_dim=16, n_heads=2, n_layers=1,
                           ffn_dim=32, mask_prob=1.0, mask_span=3)
    _, spec = span_mask(frames, Tensor(np.ones(16)), config, seed=0, valid_length=12)
    assert spec.masked_indices == frozenset(range(12))


def test_attention_rows_sum_to_one(float64):
    rng = np.random.default_rng(5)
    d = 8
    params = {f'attn.{p}.{kind}': Tensor(rng.standard_normal((d, d)) if kind == 'weight'
                                         else rng.standard_normal(d))
              for p in 'qkvo' for kind in ('weight', 'bias')}
    key_mask = np.array([True] * 4 + [False] * 2)[None, None, None, :]
    _, weights = self_attention(Tensor(rng.standard_normal((1, 6, d))), params, '', 2, key_mask,
                                return_weights=True)
    np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(weights.data[..., 4:] == 0.0)


def test_zeroed_blocks_return_positional_input(tiny_encoder, float64):
    params = init_encoder_params(tiny_encoder, seed=0)
    for name in params:
        if '.attn.o.' in name or '.ffn.out.' in name:
            params[name] = Tensor(np.zeros(params[name].shape))
    frames = np.random.default_rng(6).standard_normal((10, 16))
    out = transformer_encode(Tensor(frames), None, params, tiny_encoder)
    np.testing.assert_allclose(out.data, frames + params['pos_embedding'].data[:10], atol=1e-12)


def test_padding_is_isolated(tiny_encoder, float64):
    params = init_encoder_params(tiny_encoder, seed=2)
    rng = np.random.default_rng(7)
    frames = rng.standard_normal((2, 12, 16))
    valid = np.array([[True] * 12, [True] * 7 + [False] * 5])
    out = transformer_encode(Tensor(frames), valid, params, tiny_encoder).data

    noisy = frames.copy()
    noisy[1, 7:] = rng.standard_normal((5, 16)) * 100
    out_noisy = transformer_encode(Tensor(noisy), valid, params, tiny_encoder).data
    np.testing.assert_allclose(out_noisy[1, :7], out[1, :7], atol=1e-10)

    alone = transformer_encode(Tensor(frames[1, :7]), None, params, tiny_encoder).data
    np.testing.assert_allclose(out[1, :7], alone, atol=1e-10)


def test_masked_content_does_not_leak(tiny_encoder, float64):
    params = init_encoder_params(tiny_encoder, seed=3)
    rng = np.random.default_rng(8)
    frames = rng.standard_normal((20, 16))
    masked, spec = span_mask(Tensor(frames), params['mask_embedding'], tiny_encoder, seed=9, min_spans=2)
    out = transformer_encode(masked, None, params, tiny_encoder).data

    altered = frames.copy()
    altered[spec.index_array] = rng.standard_normal((len(spec), 16))
    masked2, spec2 = span_mask(Tensor(altered), params['mask_embedding'], tiny_encoder, seed=9, min_spans=2)
    assert spec2 == spec
    np.testing.assert_array_equal(transformer_encode(masked2, None, params, tiny_encoder).data, out)


def test_transformer_shape_errors(tiny_encoder):
    params = init_encoder_params(tiny_encoder, seed=0)
    with pytest.raises(ShapeMismatch):
        transformer_encode(Tensor(np.zeros((5, 8))), None, params, tiny_encoder)
    with pytest.raises(ShapeMismatch):
        transformer_encode(Tensor(np.zeros((513, 16))), None, params, tiny_encoder)


def test_frame_valid_mask(tiny_encoder):
    valid = frame_valid_mask([200, 100], tiny_encoder, tiny_encoder.output_length(200))
    assert valid.shape == (2, 9)
    assert valid[0].all()
    assert valid[1].sum() == tiny_encoder.output_length(100)


def test_frame_align_default_hops():
    np.testing.assert_array_equal(frame_align(np.arange(98), 49), np.arange(0, 98, 2))


def test_frame_align_tie_goes_earlier():
    labels = np.array([10, 11, 12, 13])
    aligned = frame_align(labels, 3, teacher_hop=2, teacher_win=2, latent_hop=3, latent_win=2)
    # latent centers 1, 4, 7; teacher centers 1, 3, 5, 7
    np.testing.assert_array_equal(aligned, [10, 11, 13])


def test_frame_align_clips_to_last_label():
    np.testing.assert_array_equal(frame_align([4, 5], 4), [4, 5, 5, 5])
    with pytest.raises(EmptyLabels):
        frame_align([], 3)


def test_init_params_float32_by_default(tiny_encoder):
    params = init_encoder_params(tiny_encoder, seed=0)
    assert all(p.dtype == np.float32 for p in params.values())
    with precision(np.float64):
        assert init_encoder_params(tiny_encoder, seed=0)['mask_embedding'].dtype == np.float64
