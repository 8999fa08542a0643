import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from expansionnet.errors import ConfigurationError, ContractError, DimensionError, LengthError
from expansionnet.gradcheck import check_gradients
from expansionnet.model import Captioner, ModelConfig, repeat_rows
from expansionnet.tensor import Tensor, relu
from expansionnet.training import xe_loss

from conftest import random_tokens


class TestModelConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert (cfg.d_model, cfg.d_ff, cfg.n_enc_layers, cfg.n_dec_layers) == (64, 128, 3, 3)
        assert (cfg.enc_mode, cfg.enc_n_e, cfg.dec_mode, cfg.dec_n_e, cfg.n_heads) == ("static", 16, "dynamic_causal", 4, 4)

    @pytest.mark.parametrize("mode", ["static", "dynamic_bidirectional"])
    def test_non_causal_decoder_rejected(self, mode):
        with pytest.raises(ConfigurationError):
            ModelConfig(dec_mode=mode)

    def test_causal_encoder_rejected(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(enc_mode="dynamic_causal")

    def test_short_max_len_rejected(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(max_seq_len=1)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigurationError, match="bogus"):
            ModelConfig.from_dict({"bogus": 1})

    def test_round_trip(self):
        cfg = ModelConfig.tiny(enc_mode="dynamic_bidirectional")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_full_scale_constructible(self):
        cfg = ModelConfig.full_scale()
        assert (cfg.d_model, cfg.d_ff, cfg.enc_n_e, cfg.dec_n_e, cfg.n_heads) == (512, 2048, 64, 16, 8)


class TestEncode:
    @pytest.mark.parametrize("N", [1, 2, 9])
    def test_memory_shape(self, tiny_model, N):
        feats = np.random.default_rng(N).normal(size=(N, 5))
        assert tiny_model.encode(feats).shape == (N, 8)

    def test_zero_layers_is_projection(self):
        model = Captioner(ModelConfig.tiny(n_enc_layers=0))
        feats = np.random.default_rng(0).normal(size=(3, 5))
        np.testing.assert_array_equal(model.encode(feats).data, relu(model.input_proj(feats)).data)

    def test_width_mismatch(self, tiny_model):
        with pytest.raises(DimensionError):
            tiny_model.encode(np.ones((2, 4)))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 7), st.integers(0, 2**31))
    def test_static_encoder_equivariance(self, N, seed):
        model = Captioner(ModelConfig.tiny(n_enc_layers=2, enc_n_e=3))
        rng = np.random.default_rng(seed)
        feats = rng.normal(size=(N, 5))
        perm = rng.permutation(N)
        np.testing.assert_allclose(model.encode(feats[perm]).data, model.encode(feats).data[perm], atol=1e-10)

    def test_padded_batch_matches_single(self, tiny_model):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(2, 5)), rng.normal(size=(4, 5))
        batch = np.zeros((2, 4, 5))
        batch[0, :2], batch[1] = a, b
        valid = np.array([[True, True, False, False], [True] * 4])
        tokens = random_tokens(rng, 4, 7, batch=2)
        out = tiny_model(batch, tokens, valid).data
        np.testing.assert_allclose(out[0], tiny_model(a, tokens[0]).data, atol=1e-12)
        np.testing.assert_allclose(out[1], tiny_model(b, tokens[1]).data, atol=1e-12)


class TestDecodeLogits:
    def test_shape(self, tiny_model):
        rng = np.random.default_rng(0)
        memory = tiny_model.encode(rng.normal(size=(3, 5)))
        assert tiny_model.decode_logits(random_tokens(rng, 4, 7), memory).shape == (4, 7)

    def test_too_long(self, tiny_model):
        memory = tiny_model.encode(np.ones((2, 5)))
        with pytest.raises(LengthError):
            tiny_model.decode_logits(random_tokens(np.random.default_rng(0), 7, 7), memory)

    def test_must_start_with_sos(self, tiny_model):
        memory = tiny_model.encode(np.ones((2, 5)))
        with pytest.raises(ContractError):
            tiny_model.decode_logits(np.array([4, 5]), memory)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 2**31))
    def test_causality(self, T, seed):
        model = Captioner(ModelConfig.tiny(n_dec_layers=2))
        rng = np.random.default_rng(seed)
        memory = model.encode(rng.normal(size=(3, 5)))
        tokens = random_tokens(rng, T, 7)
        t = int(rng.integers(1, T))
        changed = tokens.copy()
        changed[t] = (changed[t] + 1 + rng.integers(0, 6)) % 7
        a = model.decode_logits(tokens, memory).data
        b = model.decode_logits(changed, memory).data
        assert np.abs(a[:t] - b[:t]).max() < 1e-12

    def test_baseline_attention_decoder_is_causal(self):
        model = Captioner(ModelConfig.tiny(dec_layer_kind="attention", enc_layer_kind="attention"))
        rng = np.random.default_rng(2)
        memory = model.encode(rng.normal(size=(3, 5)))
        tokens = random_tokens(rng, 5, 7)
        changed = tokens.copy()
        changed[3] = (tokens[3] + 1) % 7
        a, b = model.decode_logits(tokens, memory).data, model.decode_logits(changed, memory).data
        assert np.abs(a[:3] - b[:3]).max() < 1e-12

    def test_duplicated_memory_row(self, tiny_model):
        rng = np.random.default_rng(3)
        row = rng.normal(size=(1, 8))
        tokens = random_tokens(rng, 4, 7)
        single = tiny_model.decode_logits(tokens, row).data
        doubled = tiny_model.decode_logits(tokens, np.repeat(row, 2, axis=0)).data
        np.testing.assert_allclose(single, doubled, atol=1e-12)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 2**31))
    def test_logits_invariant_to_feature_order(self, N, seed):
        model = Captioner(ModelConfig.tiny())
        rng = np.random.default_rng(seed)
        feats = rng.normal(size=(N, 5))
        tokens = random_tokens(rng, 5, 7)
        perm = rng.permutation(N)
        np.testing.assert_allclose(model(feats[perm], tokens).data, model(feats, tokens).data, atol=1e-10)


class TestPersistence:
    def test_save_load_bit_exact(self, tmp_path, tiny_model):
        path = tmp_path / "m.ckpt"
        tiny_model.save(path)
        loaded = Captioner.load(path)
        assert loaded.config == tiny_model.config
        for (na, a), (nb, b) in zip(tiny_model.named_parameters(), loaded.named_parameters()):
            assert na == nb
            assert a.data.tobytes() == b.data.tobytes()

    def test_state_dict_shape_mismatch(self, tiny_model):
        other = Captioner(ModelConfig.tiny(d_ff=12))
        with pytest.raises(DimensionError):
            tiny_model.load_state_dict(other.state_dict())

    def test_init_is_seeded(self):
        a, b = Captioner(ModelConfig.tiny()), Captioner(ModelConfig.tiny())
        for (_, x), (_, y) in zip(a.named_parameters(), b.named_parameters()):
            assert np.array_equal(x.data, y.data)


def test_repeat_rows_gradient():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 2, 2)), requires_grad=True)
    idx = np.array([0, 0, 2, 1, 2])
    out = repeat_rows(x, idx)
    np.testing.assert_array_equal(out.data, x.data[idx])
    out.sum().backward()
    np.testing.assert_array_equal(x.grad[:, 0, 0], [2, 1, 2])


@pytest.mark.parametrize(
    "overrides",
    [{}, {"enc_mode": "dynamic_bidirectional"}, {"enc_layer_kind": "attention", "dec_layer_kind": "attention"}],
)
def test_end_to_end_gradients(overrides):
    model = Captioner(ModelConfig.tiny(**overrides))
    rng = np.random.default_rng(11)
    feats = rng.normal(size=(2, 5))
    tokens = random_tokens(rng, 4, 7)
    tokens[1:] = rng.integers(3, 7, size=3)
    results = check_gradients(lambda: xe_loss(model(feats, tokens[:-1]), tokens[1:]), model.named_parameters())
    bad = [r for r in results if not r.ok(1e-4)]
    assert not bad, bad
