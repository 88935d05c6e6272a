import numpy as np
import pytest

from dcgen.corpus import ClickSequence, Item, ItemCatalog
from dcgen.encoder import (COSINE, INNER_PRODUCT, CandidateRef, CandidateSet,
                           Gradients, Parameters, batch_backward,
                           batch_forward, encode_item, encode_user,
                           similarity)


def toy_catalog(num_items=6, num_cats=0):
    items = []
    for i in range(num_items):
        feats = [(0, i)]
        if num_cats:
            feats.append((1, i % num_cats))
        items.append(Item(id=i, features=tuple(feats)))
    vocab = [num_items] + ([num_cats] if num_cats else [])
    return ItemCatalog(items=items, feature_vocab_sizes=vocab,
                       token_to_id={f"i{i}": i for i in range(num_items)},
                       field_names=["cat"] if num_cats else [])


def make_params(catalog, d=4, mode=INNER_PRODUCT, tau=0.1, gamma=1.0, seed=0):
    return Parameters.init_random(catalog.feature_vocab_sizes, d,
                                  similarity_mode=mode, tau=tau, gamma=gamma,
                                  rng=np.random.default_rng(seed))


class TestEncodeItem:
    def test_single_feature_returns_row(self):
        cat = toy_catalog(3)
        params = make_params(cat, d=2)
        vec, _ = encode_item(params, cat.items[1])
        assert np.array_equal(vec, params.tables[0][1])

    def test_two_features_mean(self):
        cat = toy_catalog(2, num_cats=2)
        params = make_params(cat, d=2)
        params.tables[0][0] = [1.0, 0.0]
        params.tables[1][0] = [0.0, 1.0]
        vec, _ = encode_item(params, cat.items[0])
        assert np.allclose(vec, [0.5, 0.5])

    def test_bit_identical_recompute(self):
        cat = toy_catalog(5, num_cats=3)
        params = make_params(cat, seed=9)
        a, _ = encode_item(params, cat.items[4])
        b, _ = encode_item(params, cat.items[4])
        assert a.tobytes() == b.tobytes()

    def test_out_of_range_feature(self):
        cat = toy_catalog(3)
        params = make_params(cat)
        bad = Item(id=0, features=((0, 17),))
        with pytest.raises(ValueError, match="out of range"):
            encode_item(params, bad)


class TestEncodeUser:
    def test_plain_mean(self):
        cat = toy_catalog(4)
        params = make_params(cat, d=3, gamma=1.0)
        v0, v1 = params.tables[0][0], params.tables[0][1]
        u, _ = encode_user(params, ClickSequence((0, 1)), cat)
        assert np.allclose(u, (v0 + v1) / 2.0)

    def test_decay_weights(self):
        cat = toy_catalog(4)
        params = make_params(cat, d=3, gamma=0.5)
        v0, v1 = params.tables[0][0], params.tables[0][1]
        u, _ = encode_user(params, ClickSequence((0, 1)), cat)
        assert np.allclose(u, (0.5 * v0 + 1.0 * v1) / 1.5)

    def test_single_item_any_gamma(self):
        cat = toy_catalog(4)
        for gamma in (1.0, 0.5, 0.1):
            params = make_params(cat, d=3, gamma=gamma)
            u, _ = encode_user(params, ClickSequence((2,)), cat)
            assert np.allclose(u, params.tables[0][2])

    def test_empty_sequence_rejected(self):
        with pytest.raises(ValueError):
            ClickSequence(())


class TestSimilarity:
    def test_inner_product(self):
        assert similarity(np.array([2.0, 1.0]), np.array([1.0, 0.0]),
                          INNER_PRODUCT) == 2.0

    def test_cosine_with_temperature(self):
        got = similarity(np.array([1.0, 0.0]), np.array([1.0, 0.0]),
                         COSINE, tau=0.1)
        assert got == pytest.approx(10.0, abs=1e-12)

    def test_cosine_orthogonal(self):
        for tau in (0.1, 1.0, 7.0):
            got = similarity(np.array([1.0, 0.0]), np.array([0.0, 1.0]),
                             COSINE, tau=tau)
            assert got == pytest.approx(0.0, abs=1e-15)

    def test_zero_vector_cosine_error(self):
        with pytest.raises(ValueError, match="zero"):
            similarity(np.zeros(2), np.array([1.0, 0.0]), COSINE)


def _forward_setup(mode=INNER_PRODUCT, gamma=1.0, seed=0, num_cats=3):
    cat = toy_catalog(8, num_cats=num_cats)
    params = make_params(cat, d=4, mode=mode, gamma=gamma, seed=seed)
    sequences = [ClickSequence((0, 1)), ClickSequence((2,))]
    entries = tuple(CandidateRef(item=cat.items[i]) for i in (1, 3, 5))
    csets = [CandidateSet(entries=entries, pos_index=0),
             CandidateSet(entries=entries, pos_index=1)]
    return cat, params, sequences, csets


class TestBatchForward:
    @pytest.mark.parametrize("mode", [INNER_PRODUCT, COSINE])
    def test_matches_similarity_op(self, mode):
        cat, params, sequences, csets = _forward_setup(mode=mode)
        logits, _ = batch_forward(params, cat, sequences, csets)
        for b, seq in enumerate(sequences):
            u, _ = encode_user(params, seq, cat)
            for j, ref in enumerate(csets[b].entries):
                v, _ = encode_item(params, ref.item)
                want = similarity(u, v, mode, params.tau)
                assert logits[b, j] == pytest.approx(want, rel=1e-12)

    def test_each_distinct_item_encoded_once(self):
        cat, params, sequences, csets = _forward_setup()
        _, tape = batch_forward(params, cat, sequences, csets)
        union = {0, 1, 2} | {1, 3, 5}  # prefixes and live candidates
        assert tape.num_item_encodings == len(union)

    def test_cached_items_not_encoded(self):
        cat, params, sequences, _ = _forward_setup()
        cached_vec = np.ones(4)
        entries = (CandidateRef(item=cat.items[1]),
                   CandidateRef(item=cat.items[7], vector=cached_vec))
        csets = [CandidateSet(entries=entries, pos_index=0)] * 2
        _, tape = batch_forward(params, cat, sequences, csets)
        assert 7 not in tape.item_slot
        assert tape.num_item_encodings == len({0, 1, 2})

    def test_cosine_logits_bounded_by_inverse_tau(self):
        cat, params, sequences, csets = _forward_setup(mode=COSINE, seed=4)
        logits, _ = batch_forward(params, cat, sequences, csets)
        assert np.all(np.abs(logits) <= 1.0 / params.tau + 1e-12)

    def test_mismatched_lengths_rejected(self):
        cat, params, sequences, csets = _forward_setup()
        with pytest.raises(ValueError):
            batch_forward(params, cat, sequences, csets[:1])


class TestBatchBackward:
    def test_zero_dlogits_empty_gradients(self):
        cat, params, sequences, csets = _forward_setup(mode=COSINE)
        logits, tape = batch_forward(params, cat, sequences, csets)
        grads = batch_backward(tape, np.zeros_like(logits))
        assert grads.is_empty()

    def test_shape_mismatch_rejected(self):
        cat, params, sequences, csets = _forward_setup()
        logits, tape = batch_forward(params, cat, sequences, csets)
        with pytest.raises(ValueError, match="shape"):
            batch_backward(tape, np.zeros((1, 1)))

    def test_cached_columns_have_zero_gradient_rows(self):
        cat, params, sequences, _ = _forward_setup(mode=COSINE)
        live = CandidateRef(item=cat.items[1])
        frozen = CandidateRef(item=cat.items[7],
                              vector=encode_item(params, cat.items[7])[0])
        entries = (live, frozen)
        csets = [CandidateSet(entries=entries, pos_index=0)] * 2
        logits, tape = batch_forward(params, cat, sequences, csets)
        grads = batch_backward(tape, np.ones_like(logits))
        # item 7 appears only as a cached column: no gradient row anywhere
        assert grads.row(0, 7) is None
        assert grads.row(0, 1) is not None

    @pytest.mark.parametrize("mode", [INNER_PRODUCT, COSINE])
    def test_matches_finite_differences(self, mode):
        from dcgen.oracle import finite_difference_check
        cat, params, sequences, csets = _forward_setup(mode=mode, gamma=0.7,
                                                       seed=2)
        weights = np.array([[0.3, -1.1, 0.4], [0.9, 0.2, -0.5]])

        def value(flat):
            probe = params.copy()
            probe.set_flat(flat)
            logits, _ = batch_forward(probe, cat, sequences, csets)
            return float((weights * logits).sum())

        logits, tape = batch_forward(params, cat, sequences, csets)
        grads = batch_backward(tape, weights)
        flat_grad = np.zeros(params.flat().size)
        offsets = np.cumsum([0] + [t.size for t in params.tables])
        for f_idx, row, g in grads.iter_rows():
            start = offsets[f_idx] + row * params.d
            flat_grad[start:start + params.d] = g
        err = finite_difference_check(value, flat_grad, params.flat(),
                                      coords=range(params.flat().size))
        assert err <= 1e-6


class TestArgmaxInvariance:
    def test_table_scaling_preserves_cosine_ranking(self):
        from dcgen.retrieval_eval import ItemIndex, top_k
        cat = toy_catalog(10)  # id-only items
        params = make_params(cat, d=4, mode=COSINE, seed=6)
        u, _ = encode_user(params, ClickSequence((3, 4)), cat)
        base = top_k(u, ItemIndex.from_parameters(params, cat), 10)
        for c in (0.2, 5.0):
            scaled = params.copy()
            scaled.tables[0] *= c
            u2, _ = encode_user(scaled, ClickSequence((3, 4)), cat)
            got = top_k(u2, ItemIndex.from_parameters(scaled, cat), 10)
            assert got == base


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        cat = toy_catalog(7, num_cats=3)
        params = make_params(cat, d=5, mode=COSINE, tau=0.25, gamma=0.8,
                             seed=13)
        path = tmp_path / "ckpt.bin"
        params.save(path)
        back = Parameters.load(path)
        assert back.d == 5
        assert back.similarity_mode == COSINE
        assert back.tau == 0.25
        assert back.gamma == 0.8
        for a, b in zip(params.tables, back.tables):
            assert a.tobytes() == b.tobytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTAPARM" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            Parameters.load(path)


class TestGradientsContainer:
    def test_merge_and_scale(self):
        g1 = Gradients()
        g1.add_row(0, 2, np.array([1.0, 2.0]))
        g2 = Gradients()
        g2.add_row(0, 2, np.array([0.5, 0.5]))
        g2.add_row(1, 0, np.array([3.0, 0.0]))
        g1.merge(g2)
        assert np.allclose(g1.row(0, 2), [1.5, 2.5])
        g1.scale(2.0)
        assert np.allclose(g1.row(1, 0), [6.0, 0.0])
