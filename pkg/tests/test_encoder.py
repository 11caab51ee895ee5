import numpy as np
import pytest

from readie import autodiff as ad
from readie.autodiff import Tensor, finite_difference_check
from readie.encoder import EncoderConfig, TransformerEncoder, Vocabulary, pool_mean
from readie.params import ParameterStore


def _tiny_encoder(vocab_size=12, hidden=16, layers=2, heads=2, max_len=32, seed=0):
    store = ParameterStore()
    cfg = EncoderConfig(hidden_size=hidden, num_layers=layers, num_heads=heads,
                        ffn_multiplier=2, max_seq_len=max_len, vocab_size=vocab_size)
    enc = TransformerEncoder(store, cfg, np.random.default_rng(seed))
    return store, enc


class TestVocabulary:
    def test_direct_lookup(self):
        v = Vocabulary(num_st=4)
        v.add_words(["a", "b"])
        a, b = v.id_of("a"), v.id_of("b")
        assert v.tokenize("a b a").ids == [a, b, a]

    def test_empty_input(self):
        v = Vocabulary(num_st=2)
        assert v.tokenize("").ids == []

    def test_oov_maps_to_unk(self):
        v = Vocabulary(num_st=2)
        assert v.tokenize("never_seen").ids == [v.unk_id]

    def test_offset_map_is_identity(self):
        v = Vocabulary(num_st=2)
        v.add_words(["x", "y", "z"])
        tok = v.tokenize("x y z")
        assert tok.word_offsets == [0, 1, 2]

    def test_st_ids_contiguous_and_ordered(self):
        v = Vocabulary(num_st=5)
        ids = [v.st_id(i) for i in range(5)]
        assert ids == list(range(ids[0], ids[0] + 5))

    def test_st_out_of_range(self):
        v = Vocabulary(num_st=3)
        with pytest.raises(ValueError):
            v.st_id(3)

    def test_round_trip(self, tmp_path):
        v = Vocabulary(num_st=6)
        v.add_words(["alpha", "beta", "gamma"])
        path = tmp_path / "vocab.txt"
        v.save(path)
        v2 = Vocabulary.load(path)
        assert v2.tokens() == v.tokens()
        assert v2.num_st == 6
        assert v2.st_id(5) == v.st_id(5)
        assert v2.id_of("beta") == v.id_of("beta")


class TestEncoder:
    def test_output_shape(self):
        _, enc = _tiny_encoder(hidden=16)
        out = enc.encode(np.arange(7))
        assert out.shape == (7, 16)

    def test_over_length_rejected(self):
        _, enc = _tiny_encoder(max_len=8)
        with pytest.raises(ValueError):
            enc.encode(np.zeros(9, dtype=np.int64))

    def test_deterministic(self):
        _, enc = _tiny_encoder(seed=3)
        ids = np.array([1, 5, 2, 7])
        a = enc.encode(ids).data
        b = enc.encode(ids).data
        assert np.array_equal(a, b)

    def test_forward_counter(self):
        _, enc = _tiny_encoder()
        assert enc.forward_count == 0
        enc.encode(np.arange(4))
        assert enc.forward_count == 1
        enc.encode_batch(np.zeros((3, 5), dtype=np.int64), np.ones((3, 5)))
        assert enc.forward_count == 4

    def test_appending_pad_leaves_real_tokens_unchanged(self):
        _, enc = _tiny_encoder(seed=5)
        ids = np.array([4, 9, 1, 6, 2])
        plain = enc.encode(ids).data
        padded_ids = np.concatenate([ids, [0, 0, 0]]).reshape(1, -1)
        mask = np.array([[1.0] * 5 + [0.0] * 3])
        padded = enc.encode_batch(padded_ids, mask).data[0, :5]
        assert np.array_equal(plain, padded)

    def test_batch_rows_independent(self):
        _, enc = _tiny_encoder(seed=6)
        a = np.array([3, 1, 4, 1, 5])
        b = np.array([9, 2, 6])
        ids = np.zeros((2, 5), dtype=np.int64)
        mask = np.zeros((2, 5))
        ids[0, :5], mask[0, :5] = a, 1.0
        ids[1, :3], mask[1, :3] = b, 1.0
        batched = enc.encode_batch(ids, mask).data
        assert np.array_equal(batched[0, :5], enc.encode(a).data)
        assert np.array_equal(batched[1, :3], enc.encode(b).data)

    def test_embedding_gradient_matches_finite_differences(self):
        store, enc = _tiny_encoder(vocab_size=8, hidden=8, layers=1, heads=2, seed=7)
        ids = np.array([1, 3, 5])
        probe = Tensor(np.random.default_rng(8).normal(size=(3, 8)))
        table = store["enc.tok_emb"]

        def loss():
            return ad.tensor_sum(ad.mul(enc.encode(ids), probe))

        finite_difference_check(loss, [table])


class TestPooling:
    def test_mean(self):
        x = Tensor(np.array([[2.0, 0.0], [0.0, 2.0]]))
        out = pool_mean(x, np.ones(2))
        assert np.allclose(out.data, [1.0, 1.0])

    def test_single_row_identity(self):
        row = np.array([[3.0, -1.0, 2.0]])
        out = pool_mean(Tensor(row), np.ones(1))
        assert np.allclose(out.data, row[0])

    def test_idempotent_on_identical_rows(self):
        row = np.array([1.5, 2.5, -3.0])
        x = Tensor(np.tile(row, (4, 1)))
        out = pool_mean(x, np.ones(4))
        assert np.allclose(out.data, row)

    def test_masked_rows_excluded(self):
        x = Tensor(np.array([[2.0, 2.0], [100.0, 100.0]]))
        out = pool_mean(x, np.array([1.0, 0.0]))
        assert np.allclose(out.data, [2.0, 2.0])

    def test_all_masked_rejected(self):
        with pytest.raises(ValueError):
            pool_mean(Tensor(np.ones((2, 3))), np.zeros(2))

    def test_batched(self):
        x = Tensor(np.arange(12, dtype=np.float64).reshape(2, 3, 2))
        mask = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 1.0]])
        out = pool_mean(x, mask)
        assert out.shape == (2, 2)
        assert np.allclose(out.data[0], x.data[0, :2].mean(axis=0))
        assert np.allclose(out.data[1], x.data[1].mean(axis=0))
