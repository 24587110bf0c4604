import numpy as np
import pytest

from conftest import tiny_model
from seqbench import autodiff as ad
from seqbench.counting import OpCounter
from seqbench.model import (
    Model,
    ModelConfig,
    decode_full_nar,
    decoder_forward,
    disco_forward,
    encode,
    init_incremental_state,
    init_params,
    load_checkpoint,
    output_logits,
    param_count,
    predict_length,
    save_checkpoint,
    sinusoid_table,
    top_lengths,
)
from seqbench.tasks import MASK_ID


class TestConfigValidation:
    def test_depths_must_be_positive(self):
        with pytest.raises(ValueError):
            ModelConfig(E=0, D=1)
        with pytest.raises(ValueError):
            ModelConfig(E=1, D=0)

    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            ModelConfig(E=1, D=1, d_model=30, heads=4)

    def test_unknown_modes(self):
        with pytest.raises(ValueError):
            ModelConfig(E=1, D=1, decoder_mode="diagonal")
        with pytest.raises(ValueError):
            ModelConfig(E=1, D=1, positions="rotary")


class TestEncoder:
    def test_oversize_input_rejected(self):
        m = tiny_model(max_len=6)
        with pytest.raises(ValueError, match="max_len"):
            m.encode(np.full((1, 9), 5))

    def test_token_id_outside_vocab(self):
        m = tiny_model(vocab=16)
        with pytest.raises(ValueError, match="vocab"):
            m.encode(np.array([[5, 99]]))

    def test_identical_rows_identical_outputs(self):
        m = tiny_model(seed=3)
        src = np.array([[5, 6, 7], [5, 6, 7]])
        enc = m.encode(src)
        states = ad.value_of(enc.states)
        assert np.array_equal(states[0], states[1])

    def test_single_token_single_layer(self):
        m = tiny_model(E=1, D=1, seed=4)
        enc = m.encode(np.array([[7]]))
        assert np.isfinite(ad.value_of(enc.states)).all()

    def test_padding_masked_out(self):
        # a padded position must not change real positions' states
        m = tiny_model(seed=5)
        short = m.encode(np.array([[5, 6, 7]]))
        padded = m.encode(np.array([[5, 6, 7, 0, 0]]))
        a = ad.value_of(short.states)[0, :3]
        b = ad.value_of(padded.states)[0, :3]
        assert np.abs(a - b).max() < 1e-12


class TestCausality:
    def test_future_tokens_cannot_change_past_logits(self):
        m = tiny_model(seed=6)
        enc = m.encode(np.array([[5, 6, 7, 8]]))
        base = np.array([[1, 5, 6, 7]])
        logits1 = ad.value_of(output_logits(
            m.config, m.params,
            decoder_forward(m.config, m.params, base, enc, causal=True)))
        mutated = base.copy()
        mutated[0, 3] = 12
        logits2 = ad.value_of(output_logits(
            m.config, m.params,
            decoder_forward(m.config, m.params, mutated, enc, causal=True)))
        assert np.array_equal(logits1[0, :3], logits2[0, :3])
        assert not np.array_equal(logits1[0, 3], logits2[0, 3])

    def test_bidirectional_sees_future(self):
        m = tiny_model(seed=7, mode="bidirectional")
        enc = m.encode(np.array([[5, 6, 7, 8]]))
        a = ad.value_of(m.decode_full_nar(np.array([[9, 10, 11, 12]]), enc))
        b = ad.value_of(m.decode_full_nar(np.array([[9, 10, 11, 13]]), enc))
        assert np.abs(a[0, 0] - b[0, 0]).max() > 1e-9


class TestIncrementalState:
    def test_cache_length_tracks_steps(self):
        m = tiny_model(seed=8)
        enc = m.encode(np.array([[5, 6, 7]]))
        st = m.init_incremental_state(enc, max_steps=5)
        assert st.step == 0
        for t in range(3):
            _, st = m.decode_step_ar(np.array([1]), st, enc)
            assert st.step == t + 1

    def test_batch_mismatch_rejected(self):
        m = tiny_model(seed=9)
        enc = m.encode(np.array([[5, 6, 7]]))
        st = m.init_incremental_state(enc)
        with pytest.raises(ValueError, match="batch"):
            m.decode_step_ar(np.array([1, 1]), st, enc)

    def test_capacity_exhaustion(self):
        m = tiny_model(seed=10)
        enc = m.encode(np.array([[5, 6]]))
        st = m.init_incremental_state(enc, max_steps=1)
        _, st = m.decode_step_ar(np.array([1]), st, enc)
        _, st = m.decode_step_ar(np.array([5]), st, enc)
        with pytest.raises(ValueError, match="capacity"):
            m.decode_step_ar(np.array([5]), st, enc)

    def test_incremental_matches_full_recomputation(self):
        rng = np.random.default_rng(0)
        for trial in range(10):
            m = tiny_model(seed=100 + trial)
            src = rng.integers(4, 20, size=rng.integers(2, 8)).tolist()
            enc = m.encode(np.array([src]))
            st = m.init_incremental_state(enc, max_steps=6)
            prefix = [1]
            for t in range(5):
                logits, st = m.decode_step_ar(np.array([prefix[-1]]), st, enc)
                full = ad.value_of(output_logits(
                    m.config, m.params,
                    decoder_forward(m.config, m.params, np.array([prefix]),
                                    enc, causal=True)))[0, -1]
                assert np.argmax(logits[0]) == np.argmax(full)
                assert np.abs(logits[0] - full).max() < 1e-9
                prefix.append(int(np.argmax(logits[0])) or 4)

    def test_requires_causal_mode(self):
        m = tiny_model(seed=11, mode="bidirectional")
        enc = m.encode(np.array([[5, 6]]))
        with pytest.raises(ValueError, match="causal"):
            m.init_incremental_state(enc)


class TestNarPasses:
    def test_mask_id_outside_vocab_rejected(self):
        m = tiny_model(seed=12, mode="bidirectional", vocab=16)
        enc = m.encode(np.array([[5, 6]]))
        with pytest.raises(ValueError, match="vocab"):
            m.decode_full_nar(np.array([[3, 99]]), enc)

    def test_requires_bidirectional(self):
        m = tiny_model(seed=13)
        enc = m.encode(np.array([[5, 6]]))
        with pytest.raises(ValueError, match="bidirectional"):
            m.decode_full_nar(np.array([[3, 3]]), enc)

    def test_all_positions_get_logits(self):
        m = tiny_model(seed=14, mode="bidirectional")
        enc = m.encode(np.array([[5, 6, 7]]))
        logits = ad.value_of(m.decode_full_nar(np.full((1, 4), MASK_ID), enc))
        assert logits.shape == (1, 4, 20)
        assert np.isfinite(logits).all()

    def test_position_embeddings_active(self):
        # permuting two observed tokens changes the logits
        m = tiny_model(seed=15, mode="bidirectional")
        enc = m.encode(np.array([[5, 6, 7]]))
        a = ad.value_of(m.decode_full_nar(np.array([[8, 9, MASK_ID]]), enc))
        b = ad.value_of(m.decode_full_nar(np.array([[9, 8, MASK_ID]]), enc))
        assert np.abs(a - b).max() > 1e-9

    def test_disco_empty_subsets_equal_allmask_at_depth_one(self):
        m = tiny_model(seed=16, mode="bidirectional", E=1, D=1)
        enc = m.encode(np.array([[5, 6, 7]]))
        toks = np.array([[8, 9, 10]])
        cmlm = ad.value_of(m.decode_full_nar(np.full((1, 3), MASK_ID), enc))
        disco = ad.value_of(m.disco_forward(toks, np.zeros((1, 3, 3), bool), enc))
        assert np.abs(cmlm - disco).max() < 1e-12

    def test_disco_gates_conditioning(self):
        m = tiny_model(seed=17, mode="bidirectional")
        enc = m.encode(np.array([[5, 6, 7]]))
        allowed = np.zeros((1, 3, 3), bool)
        allowed[0, 0, 2] = True      # position 0 sees token 2 only
        a = ad.value_of(m.disco_forward(np.array([[8, 9, 10]]), allowed, enc))
        b = ad.value_of(m.disco_forward(np.array([[8, 9, 11]]), allowed, enc))
        assert np.abs(a[0, 0] - b[0, 0]).max() > 1e-9      # sees change at 2
        c = ad.value_of(m.disco_forward(np.array([[8, 12, 10]]), allowed, enc))
        assert np.abs(a[0, 0] - c[0, 0]).max() < 1e-12     # blind to change at 1

    def test_disco_never_sees_self(self):
        m = tiny_model(seed=18, mode="bidirectional")
        enc = m.encode(np.array([[5, 6, 7]]))
        allowed = np.ones((1, 3, 3), bool)     # diagonal forced off internally
        a = ad.value_of(m.disco_forward(np.array([[8, 9, 10]]), allowed, enc))
        b = ad.value_of(m.disco_forward(np.array([[12, 9, 10]]), allowed, enc))
        assert np.abs(a[0, 0] - b[0, 0]).max() < 1e-12


class TestLengthHead:
    def test_zero_weights_uniform(self):
        m = tiny_model(seed=19, mode="bidirectional", max_len=10)
        m.params["len_head.w"][:] = 0.0
        m.params["len_head.b"][:] = 0.0
        enc = m.encode(np.array([[5, 6, 7]]))
        probs = m.predict_length(enc)
        assert probs.shape == (1, 10)
        assert np.allclose(probs, 0.1)

    def test_top_lengths_tie_break_shorter(self):
        probs = np.array([[0.2, 0.3, 0.3, 0.2]])
        lengths = top_lengths(probs, 3, 4)
        assert lengths.tolist() == [[2, 3, 1]]

    def test_requires_bidirectional(self):
        m = tiny_model(seed=20)
        enc = m.encode(np.array([[5, 6]]))
        with pytest.raises(ValueError, match="bidirectional"):
            predict_length(m.config, m.params, enc)


class TestParams:
    def test_decoder_layer_has_more_params_than_encoder_layer(self):
        # cross attention makes a full decoder layer strictly bigger
        for d, ffn in ((32, 64), (64, 256), (256, 1024)):
            cfg = ModelConfig(E=2, D=2, d_model=d, d_ffn=ffn, heads=4,
                              vocab_size=16, max_len=8)
            params = init_params(cfg, seed=0)
            enc_layer = param_count(params, "enc.0.")
            dec_layer = param_count(params, "dec.0.")
            assert dec_layer > enc_layer

    def test_ffn_free_decoder_removes_exactly_ffn_blocks(self):
        base = ModelConfig(E=1, D=2, d_model=32, d_ffn=64, heads=4,
                           vocab_size=16, max_len=8)
        slim_cfg = ModelConfig(E=1, D=2, d_model=32, d_ffn=64, heads=4,
                               vocab_size=16, max_len=8,
                               decoder_ffn_enabled=False)
        full = init_params(base, seed=0)
        slim = init_params(slim_cfg, seed=0)
        removed = set(full) - set(slim)
        assert removed == {f"dec.{i}.{n}" for i in range(2)
                           for n in ("ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
                                     "norm3.gain", "norm3.bias")}

    def test_ffn_free_decoder_reduces_step_macs(self):
        src = np.array([[5, 6, 7]])
        macs = {}
        for ffn in (True, False):
            m = tiny_model(seed=21, decoder_ffn_enabled=ffn)
            enc = m.encode(src)
            c = OpCounter()
            st = m.init_incremental_state(enc, max_steps=3, counter=c)
            m.decode_step_ar(np.array([1]), st, enc, counter=c)
            macs[ffn] = c.bucket_total("decoder")
        assert macs[False] < macs[True]

    def test_weight_tying_uses_embedding_transpose(self):
        m = tiny_model(seed=22)
        assert "out_proj.w" not in m.params
        h = np.ones((1, 1, m.config.d_model))
        logits = ad.value_of(output_logits(m.config, m.params, h))
        expected = h @ ad.value_of(m.params["embed.token"]).T
        assert np.abs(logits - expected).max() < 1e-12

    def test_untied_has_separate_tables(self):
        m = tiny_model(seed=23, weight_tying=False)
        assert "out_proj.w" in m.params
        assert "enc_embed.token" in m.params and "dec_embed.token" in m.params

    def test_sinusoidal_positions_option(self):
        m = tiny_model(seed=24, positions="sinusoidal")
        assert "enc.pos" not in m.params
        enc = m.encode(np.array([[5, 6, 7]]))
        assert np.isfinite(ad.value_of(enc.states)).all()
        table = sinusoid_table(8, 16)
        assert table.shape == (8, 16)
        assert np.abs(table).max() <= 1.0


class TestCheckpoints:
    def test_bit_exact_roundtrip(self, tmp_path):
        m = tiny_model(seed=25, mode="bidirectional")
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, m.config, m.params, {"update": 3, "dev_metric": 0.5})
        cfg, params, extra = load_checkpoint(p1)
        assert cfg == m.config
        assert extra == {"update": 3, "dev_metric": 0.5}
        save_checkpoint(p2, cfg, params, extra)
        assert p1.read_bytes() == p2.read_bytes()
        assert all(np.array_equal(m.params[k], params[k]) for k in m.params)

    def test_rejects_non_finite(self, tmp_path):
        m = tiny_model(seed=26)
        m.params["enc.norm.gain"][0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            save_checkpoint(tmp_path / "x.ckpt", m.config, m.params)

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "y.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(ValueError, match="not a seqbench checkpoint"):
            load_checkpoint(path)

    def test_float32_dtype_preserved(self, tmp_path):
        m = tiny_model(seed=27, dtype="float32")
        save_checkpoint(tmp_path / "f.ckpt", m.config, m.params)
        _, params, _ = load_checkpoint(tmp_path / "f.ckpt")
        assert all(v.dtype == np.float32 for v in params.values())


class TestDropoutDeterminism:
    def test_same_rng_same_output(self):
        m = tiny_model(seed=28, dropout=0.2)
        src = np.array([[5, 6, 7]])
        a = ad.value_of(encode(m.config, m.params, src,
                               dropout_rng=np.random.default_rng(1)).states)
        b = ad.value_of(encode(m.config, m.params, src,
                               dropout_rng=np.random.default_rng(1)).states)
        c = ad.value_of(encode(m.config, m.params, src,
                               dropout_rng=np.random.default_rng(2)).states)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
