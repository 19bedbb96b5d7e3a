"""Transformer tests: memory attention, mesh gating, causality, checkpoints."""

import math

import numpy as np
import pytest

from dualscribe import autodiff as ad
from dualscribe.autodiff import Tape, Tensor
from dualscribe.errors import DataError, ShapeError
from dualscribe.model import (
    AttentionParams,
    ModelConfig,
    apply_state,
    attention,
    causal_mask,
    decode_forward,
    encode,
    init_transformer_params,
    load_checkpoint,
    meshed_cross_attention,
    memory_self_attention,
    save_checkpoint,
    sinusoidal_positions,
)

from helpers import check_grads_against_fd
from references import np_mha, np_vanilla_decoder, np_vanilla_encoder


def tiny_config(**over):
    base = dict(
        vocab_size=11, d_model=16, memory_slots=3, n_enc_layers=2,
        n_dec_layers=2, n_heads=2, ffn_dim=16, max_len=16, dropout_rate=0.0,
    )
    base.update(over)
    return ModelConfig(**base)


class TestModelConfig:
    def test_full_scale_defaults(self):
        cfg = ModelConfig(vocab_size=100)
        assert cfg.d_model == 512
        assert cfg.memory_slots == 40
        assert (cfg.n_enc_layers, cfg.n_dec_layers, cfg.n_heads) == (3, 3, 8)

    def test_head_divisibility(self):
        with pytest.raises(DataError):
            tiny_config(d_model=10, n_heads=3)

    def test_min_vocab(self):
        with pytest.raises(DataError):
            tiny_config(vocab_size=3)

    def test_negative_memory(self):
        with pytest.raises(DataError):
            tiny_config(memory_slots=-1)


class TestMemorySelfAttention:
    def test_zero_memory_matches_standard_mha_bitwise(self):
        cfg = tiny_config(memory_slots=0)
        rng = np.random.default_rng(0)
        params = init_transformer_params(cfg, rng)
        p = params.enc_layers[0].attn
        assert p.memory_k is None
        x = rng.normal(size=(5, cfg.d_model))
        ours = memory_self_attention(Tensor(x), p, cfg.n_heads).data
        theirs = np_mha(x, x, p, cfg.n_heads)
        assert np.array_equal(ours, theirs)

    def test_weights_sum_to_one_over_all_slots(self):
        cfg = tiny_config()
        rng = np.random.default_rng(1)
        params = init_transformer_params(cfg, rng)
        p = params.enc_layers[0].attn
        x = rng.normal(size=(4, cfg.d_model))
        _, weights = memory_self_attention(Tensor(x), p, cfg.n_heads, want_weights=True)
        assert weights.shape == (cfg.n_heads, 4, 4 + cfg.memory_slots)
        assert np.abs(weights.sum(axis=-1) - 1.0).max() <= 1e-12

    def test_hand_computed_three_slot_oracle(self):
        # single head, d_model 2, one query row, two memory slots; all
        # projections identity so the slot scores are plain dot products.
        eye = np.eye(2)
        zero = np.zeros(2)
        p = AttentionParams(
            w_q=Tensor(eye), b_q=Tensor(zero),
            w_k=Tensor(eye), b_k=Tensor(zero),
            w_v=Tensor(eye), b_v=Tensor(zero),
            w_o=Tensor(eye), b_o=Tensor(zero),
            memory_k=Tensor([[0.5, 0.2], [-0.4, 1.0]]),
            memory_v=Tensor([[2.0, -1.0], [0.5, 0.3]]),
        )
        x = np.array([[0.3, -0.7]])
        out, weights = memory_self_attention(Tensor(x), p, 1, want_weights=True)

        inv_sqrt_d = 1.0 / math.sqrt(2.0)
        scores = [
            (0.3 * 0.3 + (-0.7) * (-0.7)) * inv_sqrt_d,
            (0.3 * 0.5 + (-0.7) * 0.2) * inv_sqrt_d,
            (0.3 * (-0.4) + (-0.7) * 1.0) * inv_sqrt_d,
        ]
        exps = [math.exp(s - max(scores)) for s in scores]
        total = sum(exps)
        expected_w = [e / total for e in exps]
        assert np.abs(weights[0, 0] - expected_w).max() <= 1e-10

        slot_values = [x[0], np.array([2.0, -1.0]), np.array([0.5, 0.3])]
        expected_out = sum(w * v for w, v in zip(expected_w, slot_values))
        assert np.abs(out.data[0] - expected_out).max() <= 1e-10

    def test_memory_rows_change_output(self):
        cfg = tiny_config()
        rng = np.random.default_rng(2)
        params = init_transformer_params(cfg, rng)
        p = params.enc_layers[0].attn
        x = rng.normal(size=(3, cfg.d_model))
        base = memory_self_attention(Tensor(x), p, cfg.n_heads).data
        p.memory_v.data = p.memory_v.data + 1.0
        assert not np.array_equal(memory_self_attention(Tensor(x), p, cfg.n_heads).data, base)


class TestEncode:
    def test_trace_length_and_shapes(self):
        for n_layers in (1, 3):
            cfg = tiny_config(n_enc_layers=n_layers)
            rng = np.random.default_rng(0)
            params = init_transformer_params(cfg, rng)
            regions = Tensor(rng.normal(size=(6, cfg.d_model)))
            trace = encode(regions, cfg, params)
            assert len(trace) == n_layers
            assert all(level.shape == (6, cfg.d_model) for level in trace)

    def test_zero_memory_encoder_bitwise_vanilla(self):
        cfg = tiny_config(memory_slots=0)
        rng = np.random.default_rng(3)
        params = init_transformer_params(cfg, rng)
        regions = rng.normal(size=(5, cfg.d_model))
        ours = encode(Tensor(regions), cfg, params)
        theirs = np_vanilla_encoder(regions, cfg, params)
        for a, b in zip(ours, theirs):
            assert np.array_equal(a.data, b)

    def test_sequence_too_long(self):
        cfg = tiny_config(max_len=4)
        params = init_transformer_params(cfg, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            encode(Tensor(np.zeros((5, cfg.d_model))), cfg, params)

    @pytest.mark.parametrize("seed", range(5))
    def test_every_encoder_parameter_gets_gradient(self, seed):
        cfg = tiny_config()
        rng = np.random.default_rng(seed)
        params = init_transformer_params(cfg, rng)
        regions = Tensor(rng.normal(size=(4, cfg.d_model)))
        probe = Tensor(rng.normal(size=(4, cfg.d_model)))
        with Tape():
            trace = encode(regions, cfg, params)
            loss = ad.sum_all(ad.mul(trace[-1], probe))
            ad.backward(loss)
        enc_named = {
            name: p
            for i, layer in enumerate(params.enc_layers)
            for name, p in layer.named(f"enc{i}")
        }
        for name, p in enc_named.items():
            assert p.grad is not None and np.any(p.grad != 0.0), name

    def test_fd_spot_check_on_three_encoder_parameters(self):
        cfg = tiny_config(n_enc_layers=1)
        rng = np.random.default_rng(17)
        params = init_transformer_params(cfg, rng)
        regions = Tensor(rng.normal(size=(3, cfg.d_model)))
        probe = Tensor(rng.normal(size=(3, cfg.d_model)))
        named = dict(params.enc_layers[0].named("enc0"))
        picks = rng.choice(sorted(named), size=3, replace=False)

        def build_loss():
            return ad.sum_all(ad.mul(encode(regions, cfg, params)[-1], probe))

        check_grads_against_fd(build_loss, {k: named[k] for k in picks})


class TestMeshedCrossAttention:
    def _setup(self, cfg, seed=0):
        rng = np.random.default_rng(seed)
        params = init_transformer_params(cfg, rng)
        trace = [Tensor(rng.normal(size=(4, cfg.d_model))) for _ in range(cfg.n_enc_layers)]
        y = Tensor(rng.normal(size=(1, 3, cfg.d_model)))
        return params, trace, y

    def test_single_layer_saturated_gate_is_plain_cross_attention(self):
        cfg = tiny_config(n_enc_layers=1)
        params, trace, y = self._setup(cfg)
        layer = params.dec_layers[0]
        layer.gates[0].b.data[:] = 30.0  # sigmoid ~ 1 everywhere
        out = meshed_cross_attention(y, trace, layer, cfg.n_heads).data
        plain = np_mha(y.data, trace[0].data, layer.cross_attn, cfg.n_heads)
        assert np.abs(out - plain).max() <= 1e-9  # N=1 so the 1/sqrt(N) scale is 1

    def test_identical_levels_and_gates_collapse_to_scaled_single(self):
        cfg = tiny_config(n_enc_layers=3)
        params, trace, y = self._setup(cfg, seed=5)
        layer = params.dec_layers[0]
        shared = trace[0]
        for g in layer.gates[1:]:
            g.w.data = layer.gates[0].w.data.copy()
            g.b.data = layer.gates[0].b.data.copy()
        out = meshed_cross_attention(y, [shared] * 3, layer, cfg.n_heads).data

        c = np_mha(y.data, shared.data, layer.cross_attn, cfg.n_heads)
        gate_in = np.concatenate([y.data, c], axis=-1)
        alpha = 1.0 / (1.0 + np.exp(-(gate_in @ layer.gates[0].w.data + layer.gates[0].b.data)))
        expected = (3.0 / math.sqrt(3.0)) * (alpha * c)
        assert np.abs(out - expected).max() <= 1e-12

    def test_gate_values_lie_in_unit_interval(self):
        cfg = tiny_config(n_enc_layers=2)
        params, trace, y = self._setup(cfg, seed=6)
        _, gates = meshed_cross_attention(
            y, trace, params.dec_layers[0], cfg.n_heads, want_gates=True
        )
        for alpha in gates:
            assert np.all(alpha > 0.0) and np.all(alpha < 1.0)

    def test_empty_trace_rejected(self):
        cfg = tiny_config()
        params, _, y = self._setup(cfg)
        with pytest.raises(ShapeError):
            meshed_cross_attention(y, [], params.dec_layers[0], cfg.n_heads)


class TestDecodeForward:
    def test_output_shape(self):
        cfg = tiny_config()
        rng = np.random.default_rng(0)
        params = init_transformer_params(cfg, rng)
        trace = encode(Tensor(rng.normal(size=(4, cfg.d_model))), cfg, params)
        tokens = rng.integers(0, cfg.vocab_size, size=(2, 5))
        logits = decode_forward(tokens, trace, cfg, params)
        assert logits.shape == (2, 5, cfg.vocab_size)

    def test_causality_exact_under_future_perturbation(self):
        cfg = tiny_config()
        rng = np.random.default_rng(1)
        params = init_transformer_params(cfg, rng)
        # the head starts zero-initialized; randomize it so logits move at all
        params.out_w.data = rng.normal(size=params.out_w.shape)
        trace = encode(Tensor(rng.normal(size=(4, cfg.d_model))), cfg, params)
        tokens = rng.integers(0, cfg.vocab_size, size=(1, 7))
        base = decode_forward(tokens, trace, cfg, params).data
        for k in range(1, 7):
            perturbed = tokens.copy()
            perturbed[0, k:] = (perturbed[0, k:] + 1 + rng.integers(0, cfg.vocab_size - 1)) % cfg.vocab_size
            got = decode_forward(perturbed, trace, cfg, params).data
            assert np.array_equal(got[:, :k], base[:, :k])
            assert not np.array_equal(got[:, k:], base[:, k:])

    def test_gates_saturated_to_last_layer_match_vanilla_decoder(self):
        cfg = tiny_config(n_enc_layers=3, n_dec_layers=2)
        rng = np.random.default_rng(2)
        params = init_transformer_params(cfg, rng)
        for layer in params.dec_layers:
            for gate in layer.gates[:-1]:
                gate.b.data[:] = -30.0
            layer.gates[-1].b.data[:] = 30.0
            for gate in layer.gates:
                gate.w.data[:] = 0.0
        trace = encode(Tensor(rng.normal(size=(4, cfg.d_model))), cfg, params)
        tokens = rng.integers(0, cfg.vocab_size, size=(1, 5))
        ours = decode_forward(tokens, trace, cfg, params).data
        vanilla = np_vanilla_decoder(
            tokens, trace[-1].data, cfg, params,
            cross_scale=1.0 / math.sqrt(cfg.n_enc_layers),
        )
        assert np.abs(ours - vanilla).max() <= 1e-6

    def test_token_id_out_of_range(self):
        cfg = tiny_config()
        params = init_transformer_params(cfg, np.random.default_rng(0))
        trace = encode(Tensor(np.zeros((2, cfg.d_model))), cfg, params)
        with pytest.raises(ShapeError):
            decode_forward(np.array([[cfg.vocab_size]]), trace, cfg, params)

    def test_attention_rows_sum_to_one_with_causal_mask(self):
        cfg = tiny_config()
        rng = np.random.default_rng(3)
        params = init_transformer_params(cfg, rng)
        y = Tensor(rng.normal(size=(1, 5, cfg.d_model)))
        _, weights = attention(
            y, y, params.dec_layers[0].self_attn, cfg.n_heads,
            mask=causal_mask(5), want_weights=True,
        )
        assert np.abs(weights.sum(axis=-1) - 1.0).max() <= 1e-12
        # masked (future) slots carry exactly zero weight
        for t in range(5):
            assert np.all(weights[..., t, t + 1 :] == 0.0)

    def test_cross_attention_rows_sum_to_one(self):
        cfg = tiny_config()
        rng = np.random.default_rng(4)
        params = init_transformer_params(cfg, rng)
        y = Tensor(rng.normal(size=(2, 3, cfg.d_model)))
        level = Tensor(rng.normal(size=(6, cfg.d_model)))
        _, weights = attention(
            y, level, params.dec_layers[0].cross_attn, cfg.n_heads, want_weights=True
        )
        assert weights.shape[-1] == 6
        assert np.abs(weights.sum(axis=-1) - 1.0).max() <= 1e-12


class TestSinusoidalPositions:
    def test_shape_and_first_row(self):
        table = sinusoidal_positions(8, 6)
        assert table.shape == (8, 6)
        assert np.array_equal(table[0], [0, 1, 0, 1, 0, 1])

    def test_distinct_rows(self):
        table = sinusoidal_positions(16, 8)
        assert len({tuple(row) for row in np.round(table, 12)}) == 16


class TestCheckpoints:
    def test_round_trip_bitwise_logits(self, tmp_path):
        cfg = tiny_config()
        rng = np.random.default_rng(4)
        params = init_transformer_params(cfg, rng)
        regions = rng.normal(size=(4, cfg.d_model))
        tokens = rng.integers(0, cfg.vocab_size, size=(1, 6))
        before = decode_forward(
            tokens, encode(Tensor(regions), cfg, params), cfg, params
        ).data

        path = str(tmp_path / "model.m2ck")
        save_checkpoint(path, cfg, dict(params.named_parameters()), extras={"note": "t"})
        cfg2, state, extras = load_checkpoint(path)
        assert extras == {"note": "t"}
        params2 = init_transformer_params(cfg2, np.random.default_rng(999))
        apply_state(dict(params2.named_parameters()), state)
        after = decode_forward(
            tokens, encode(Tensor(regions), cfg2, params2), cfg2, params2
        ).data
        assert np.array_equal(before, after)

    def test_shape_mismatch_fails_loudly(self, tmp_path):
        cfg = tiny_config()
        params = init_transformer_params(cfg, np.random.default_rng(0))
        path = str(tmp_path / "model.m2ck")
        save_checkpoint(path, cfg, dict(params.named_parameters()))
        _, state, _ = load_checkpoint(path)
        wrong = init_transformer_params(tiny_config(d_model=32), np.random.default_rng(0))
        with pytest.raises(DataError):
            apply_state(dict(wrong.named_parameters()), state)

    def test_missing_parameter_fails_loudly(self, tmp_path):
        cfg = tiny_config()
        params = init_transformer_params(cfg, np.random.default_rng(0))
        named = dict(params.named_parameters())
        named.pop("model.out_w")
        path = str(tmp_path / "model.m2ck")
        save_checkpoint(path, cfg, named)
        _, state, _ = load_checkpoint(path)
        with pytest.raises(DataError) as err:
            apply_state(dict(params.named_parameters()), state)
        assert "out_w" in str(err.value)

    def test_truncated_file_rejected(self, tmp_path):
        cfg = tiny_config()
        params = init_transformer_params(cfg, np.random.default_rng(0))
        path = tmp_path / "model.m2ck"
        save_checkpoint(str(path), cfg, dict(params.named_parameters()))
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 20])
        with pytest.raises(DataError):
            load_checkpoint(str(path))
