import math

import pytest
import torch

from indivaid.encoders import (
    EncoderConfig,
    FeatureVector,
    MAX_TEMPERATURE,
    PERIOD_ID,
    ToyEncoders,
    image_to_tensor,
)


def _image(config, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(3, config.resolution, config.resolution, generator=g, dtype=torch.float64)


class TestEncoderConfig:
    def test_context_length_floor(self):
        with pytest.raises(ValueError, match="context_length"):
            EncoderConfig(context_length=7)

    def test_unknown_backend(self):
        with pytest.raises(ValueError, match="backend"):
            EncoderConfig(backend="resnet")

    def test_pretrained_defaults(self):
        cfg = EncoderConfig.pretrained_defaults()
        assert (cfg.image_width, cfg.embed_dim, cfg.context_length) == (768, 512, 77)


class TestEncodeImage:
    def test_deterministic_for_same_image(self, toy_encoders):
        img = _image(toy_encoders.config)
        a = toy_encoders.encode_image(img)
        b = toy_encoders.encode_image(img)
        assert torch.equal(a.values, b.values)

    @pytest.mark.parametrize("embed_dim", [16, 512])
    def test_output_width(self, embed_dim):
        cfg = EncoderConfig(embed_dim=embed_dim, resolution=32)
        enc = ToyEncoders(cfg)
        feat = enc.encode_image(_image(cfg))
        assert len(feat) == embed_dim
        assert not feat.normalized

    def test_batch_shape(self, toy_encoders):
        cfg = toy_encoders.config
        batch = torch.rand(5, 3, cfg.resolution, cfg.resolution, dtype=torch.float64)
        out = toy_encoders.encode_image(batch)
        assert out.shape == (5, cfg.embed_dim)

    def test_resolution_mismatch_rejected(self, toy_encoders):
        bad = torch.rand(3, 16, 16, dtype=torch.float64)
        with pytest.raises(ValueError, match="expected"):
            toy_encoders.encode_image(bad)

    def test_frozen_path_detaches(self, toy_encoders):
        img = _image(toy_encoders.config)
        frozen = toy_encoders.encode_image(img, trainable=False)
        assert not frozen.values.requires_grad
        live = toy_encoders.encode_image(img, trainable=True)
        assert live.values.requires_grad


class TestEncodeText:
    def _sequence(self, config, seed=0):
        g = torch.Generator().manual_seed(seed)
        return torch.rand(config.context_length, config.word_dim, generator=g, dtype=torch.float64)

    def test_deterministic(self, toy_encoders):
        seq = self._sequence(toy_encoders.config)
        a = toy_encoders.encode_text(seq, eos_position=7)
        b = toy_encoders.encode_text(seq, eos_position=7)
        assert torch.equal(a.values, b.values)

    def test_output_width(self, toy_encoders):
        seq = self._sequence(toy_encoders.config)
        assert len(toy_encoders.encode_text(seq, eos_position=7)) == toy_encoders.config.embed_dim

    def test_causal_mask_ignores_later_positions(self, toy_encoders):
        # Oracle: recompute with and without a perturbation after the readout position.
        seq = self._sequence(toy_encoders.config)
        eos = 7
        base = toy_encoders.encode_text(seq, eos)
        perturbed = seq.clone()
        perturbed[eos + 1 :] += 3.0
        after = toy_encoders.encode_text(perturbed, eos)
        assert torch.equal(base.values, after.values)

    def test_earlier_positions_do_matter(self, toy_encoders):
        seq = self._sequence(toy_encoders.config)
        eos = 7
        base = toy_encoders.encode_text(seq, eos)
        perturbed = seq.clone()
        perturbed[eos - 1] += 3.0
        after = toy_encoders.encode_text(perturbed, eos)
        assert not torch.allclose(base.values, after.values)

    def test_eos_out_of_range(self, toy_encoders):
        seq = self._sequence(toy_encoders.config)
        with pytest.raises(ValueError, match="eos_position"):
            toy_encoders.encode_text(seq, eos_position=seq.shape[0])
        with pytest.raises(ValueError, match="eos_position"):
            toy_encoders.encode_text(seq, eos_position=0)


class TestWordEmbed:
    def test_same_id_same_row(self, toy_encoders):
        rows = toy_encoders.word_embed([5, 5])
        assert torch.equal(rows[0], rows[1])

    def test_rows_finite_and_nonzero(self, toy_encoders):
        rows = toy_encoders.word_embed(list(range(toy_encoders.config.vocab_size)))
        norms = torch.linalg.vector_norm(rows, dim=1)
        assert torch.isfinite(norms).all()
        assert (norms > 0).all()

    def test_out_of_range_id(self, toy_encoders):
        with pytest.raises(ValueError, match="token id"):
            toy_encoders.word_embed([toy_encoders.config.vocab_size])

    def test_context_phrase_embeds_to_four_rows(self, toy_encoders):
        ids = toy_encoders.tokenize("A photo of a")
        assert len(ids) == 4
        rows = toy_encoders.word_embed(ids)
        assert rows.shape == (4, toy_encoders.config.word_dim)


class TestTokenizer:
    def test_trailing_period_is_its_own_token(self, toy_encoders):
        ids = toy_encoders.tokenize("a photo of a stoat.")
        assert len(ids) == 6
        assert ids[-1] == PERIOD_ID

    def test_case_insensitive_and_stable(self, toy_encoders):
        assert toy_encoders.tokenize("Stoat") == toy_encoders.tokenize("stoat")
        assert toy_encoders.tokenize("stoat") == toy_encoders.tokenize("stoat")

    def test_ids_in_vocab(self, toy_encoders):
        ids = toy_encoders.tokenize("the quick brown fox jumps over the lazy dog.")
        assert all(0 <= i < toy_encoders.config.vocab_size for i in ids)


class TestTemperature:
    def test_initial_value(self, toy_encoders):
        assert float(toy_encoders.temperature.detach()) == pytest.approx(1.0 / 0.07, rel=1e-12)

    def test_clamped_at_ceiling(self, toy_encoders):
        with torch.no_grad():
            toy_encoders.log_temperature.fill_(10.0)
        assert float(toy_encoders.temperature.detach()) == MAX_TEMPERATURE


class TestFeatureVector:
    def test_normalized_flag_validated(self):
        with pytest.raises(ValueError, match="norm"):
            FeatureVector(torch.tensor([3.0, 4.0]), normalized=True)

    def test_normalize(self):
        fv = FeatureVector(torch.tensor([3.0, 4.0], dtype=torch.float64)).normalize()
        assert fv.normalized
        assert float(torch.linalg.vector_norm(fv.values)) == pytest.approx(1.0, abs=1e-12)

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError, match="zero"):
            FeatureVector(torch.zeros(4)).normalize()

    def test_must_be_one_dimensional(self):
        with pytest.raises(ValueError, match="1-D"):
            FeatureVector(torch.zeros(2, 2))


def test_image_to_tensor_layout():
    import numpy as np

    arr = np.zeros((4, 5, 3), dtype=np.float32)
    arr[0, 0, 0] = 1.0
    t = image_to_tensor(arr)
    assert t.shape == (3, 4, 5)
    assert t.dtype == torch.float64
    assert t[0, 0, 0] == 1.0


def test_same_seed_same_weights_different_seed_differs():
    a = ToyEncoders(EncoderConfig(toy_seed=3))
    b = ToyEncoders(EncoderConfig(toy_seed=3))
    c = ToyEncoders(EncoderConfig(toy_seed=4))
    assert torch.equal(a.tower_w1, b.tower_w1)
    assert not torch.equal(a.tower_w1, c.tower_w1)


def test_pretrained_backend_loads_or_fails_cleanly():
    """Without cached weights the pretrained backend must raise a clear error."""
    from indivaid.encoders import ClipEncoders

    config = EncoderConfig.pretrained_defaults()
    try:
        enc = ClipEncoders(config)
    except RuntimeError as exc:
        assert "pretrained" in str(exc) or "INDIVAID_CACHE" in str(exc)
        pytest.skip("pretrained weights unavailable in this environment")
    feat = enc.encode_image(torch.rand(3, 224, 224))
    assert len(feat) == config.embed_dim
    ids = enc.tokenize("A photo of a")
    assert enc.word_embed(ids).shape == (len(ids), config.word_dim)
