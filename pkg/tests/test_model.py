import numpy as np
import pytest

from lazyinfer import (
    ConfigError,
    InputError,
    ModelConfig,
    WeightFormatError,
    embed,
    layer_forward,
    load_model,
    logits,
    save_model,
)

from conftest import make_model
from reference import ref_layer


class TestConfig:
    def test_valid(self):
        ModelConfig(12, 8, 256, 1024, 258, 8192).validate()

    @pytest.mark.parametrize("kwargs", [
        dict(num_layers=1),            # too shallow
        dict(vocab_size=1),
        dict(num_heads=3),             # 16 % 3 != 0
        dict(d_model=6, num_heads=2),  # head_dim 3 odd
        dict(d_ff=0),
        dict(max_position=0),
    ])
    def test_invalid(self, kwargs):
        base = dict(num_layers=3, num_heads=2, d_model=16, d_ff=32,
                    vocab_size=258, max_position=128)
        base.update(kwargs)
        with pytest.raises(ConfigError):
            ModelConfig(**base).validate()


class TestRandomModel:
    def test_same_seed_identical_bytes(self, tmp_path):
        cfg, w1 = make_model(seed=4)
        _, w2 = make_model(seed=4)
        p1, p2 = tmp_path / "a.lzwt", tmp_path / "b.lzwt"
        save_model(p1, cfg, w1)
        save_model(p2, cfg, w2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_different_seeds_differ(self):
        _, w1 = make_model(seed=1)
        _, w2 = make_model(seed=2)
        assert not np.array_equal(w1.embedding, w2.embedding)

    def test_round_trip_exact(self, tmp_path):
        cfg, w = make_model(seed=9)
        path = tmp_path / "m.lzwt"
        save_model(path, cfg, w)
        cfg2, w2 = load_model(path)
        assert cfg2 == cfg
        assert np.array_equal(w.embedding, w2.embedding)
        for a, b in zip(w.layers, w2.layers):
            for name in ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down",
                         "attn_norm_gain", "mlp_norm_gain"):
                assert np.array_equal(getattr(a, name), getattr(b, name))
        # canonical encoding: re-saving the loaded weights is byte-identical
        path2 = tmp_path / "m2.lzwt"
        save_model(path2, cfg2, w2)
        assert path.read_bytes() == path2.read_bytes()


class TestLzwtFormat:
    def _write(self, tmp_path):
        cfg, w = make_model()
        path = tmp_path / "m.lzwt"
        save_model(path, cfg, w)
        return path

    def test_truncated_file(self, tmp_path):
        path = self._write(tmp_path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(WeightFormatError):
            load_model(path)

    def test_bad_magic(self, tmp_path):
        path = self._write(tmp_path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(WeightFormatError):
            load_model(path)

    def test_corrupt_payload_fails_checksum(self, tmp_path):
        path = self._write(tmp_path)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(WeightFormatError):
            load_model(path)

    def test_header_shape_mismatch(self, tmp_path):
        import json
        import struct
        path = self._write(tmp_path)
        blob = path.read_bytes()
        (hlen,) = struct.unpack_from("<Q", blob, 8)
        header = json.loads(blob[16:16 + hlen])
        header["tensors"]["embed.weight"]["shape"] = [7, 7]
        hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        path.write_bytes(blob[:8] + struct.pack("<Q", len(hjson)) + hjson
                         + blob[16 + hlen:])
        with pytest.raises(WeightFormatError):
            load_model(path)


class TestEmbed:
    def test_empty(self, small_model):
        _, w = small_model
        assert embed(w, []).shape == (0, 16)

    def test_repeated_id_identical_rows(self, small_model):
        _, w = small_model
        rows = embed(w, [5, 5])
        assert np.array_equal(rows[0], rows[1])

    def test_equals_table_lookup(self, small_model):
        _, w = small_model
        ids = [3, 250, 0, 257]
        rows = embed(w, ids)
        for i, t in enumerate(ids):
            assert np.array_equal(rows[i], w.embedding[t])

    def test_out_of_range(self, small_model):
        _, w = small_model
        with pytest.raises(InputError):
            embed(w, [258])


class TestLayerForward:
    def test_single_token_attends_to_itself(self, small_model):
        cfg, w = small_model
        h = embed(w, [42])
        out = layer_forward(cfg, w, 0, h, [0])
        assert out.probs.probs.shape == (2, 1, 1)
        assert np.array_equal(out.probs.probs,
                              np.ones((2, 1, 1), np.float32))

    def test_row_counts_match_live_set(self, small_model, rng):
        cfg, w = small_model
        h = embed(w, rng.integers(0, 258, size=5).tolist())
        out = layer_forward(cfg, w, 1, h, [0, 1, 2, 3, 4])
        assert out.hidden.shape == (5, cfg.d_model)
        assert out.keys.shape == (5, cfg.d_model)
        assert out.values.shape == (5, cfg.d_model)

    def test_full_set_matches_dense_reference(self, small_model, rng):
        cfg, w = small_model
        ids = rng.integers(0, 258, size=9).tolist()
        h = embed(w, ids)
        positions = np.arange(9)
        got = layer_forward(cfg, w, 2, h, positions).hidden
        want = ref_layer(cfg, w.layers[2], h, positions)
        assert np.abs(got.astype(np.float64) - want).max() < 1e-6

    def test_position_collision_rejected(self, small_model):
        cfg, w = small_model
        h = embed(w, [1, 2])
        k = np.zeros((1, cfg.d_model), np.float32)
        with pytest.raises(InputError):
            layer_forward(cfg, w, 0, h, [0, 1], k, k, [1])

    def test_context_merge_order_irrelevant_to_result(self, small_model, rng):
        """Splitting the token set into live vs context must not change what a
        live query computes."""
        cfg, w = small_model
        ids = rng.integers(0, 258, size=6).tolist()
        h = embed(w, ids)
        full = layer_forward(cfg, w, 0, h, np.arange(6))
        # recompute only the last token, first five provided as context
        part = layer_forward(cfg, w, 0, h[5:], [5],
                             full.keys[:5], full.values[:5], np.arange(5))
        assert np.abs(part.hidden[0].astype(np.float64)
                      - full.hidden[5].astype(np.float64)).max() < 1e-6


class TestLogits:
    def test_zero_hidden_zero_scores(self, small_model):
        _, w = small_model
        out = logits(w, np.zeros(16, np.float32))
        assert np.array_equal(out, np.zeros(258, np.float32))

    def test_length_is_vocab(self, small_model, rng):
        _, w = small_model
        assert logits(w, rng.standard_normal(16).astype(np.float32)).shape == (258,)

    def test_argmax_matches_dot_product_scan(self, small_model, rng):
        _, w = small_model
        h = rng.standard_normal(16).astype(np.float32)
        out = logits(w, h)
        best, best_score = 0, -np.inf
        for t in range(258):
            s = float(np.asarray(w.embedding[t], np.float64)
                      @ np.asarray(h, np.float64))
            if s > best_score:
                best, best_score = t, s
        assert int(np.argmax(out)) == best

    def test_untied_unembedding_used(self, small_model, rng):
        _, w = small_model
        w.unembedding = rng.standard_normal((258, 16)).astype(np.float32)
        h = rng.standard_normal(16).astype(np.float32)
        out = logits(w, h)
        want = (w.unembedding.astype(np.float64)
                @ h.astype(np.float64)).astype(np.float32)
        assert np.abs(out - want).max() < 1e-6

    def test_untied_round_trips(self, tmp_path, small_model, rng):
        cfg, w = small_model
        w.unembedding = rng.standard_normal((258, 16)).astype(np.float32)
        path = tmp_path / "untied.lzwt"
        save_model(path, cfg, w)
        _, w2 = load_model(path)
        assert np.array_equal(w.unembedding, w2.unembedding)
