import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from visreformer.attention import (
    AttentionConfig,
    DenseAttentionParams,
    LSHAttentionParams,
    ScoreCounter,
    build_chunks,
    candidate_sets,
    dense_attention,
    lsh_attention,
    lsh_hash,
    n_buckets_for,
)
from visreformer.core import RngStream, Tensor, backward
from visreformer.errors import ConfigError, DegenerateRowError, InternalError
from visreformer.gradcheck import check_gradients
from visreformer.tokenizer import TokenSequence


def random_seq(rng, B, n, D, scale=1.0):
    return TokenSequence.unmasked(rng.normal((B, n, D), scale=scale))


def shared_qk_pair(cfg, seed):
    """LSH params and a dense shared-QK oracle carrying the very same tensors."""
    lsh = LSHAttentionParams(cfg, RngStream(seed))
    dense = DenseAttentionParams(AttentionConfig(cfg.heads, cfg.model_dim, shared_qk=True), RngStream(seed))
    for name in ("wqk", "wv", "wo", "bo"):
        setattr(dense, name, getattr(lsh, name))
    return lsh, dense


def brute_force_sets(keys, n_buckets, cfg, rng):
    """Loop-based re-derivation of hashing, sorting, chunking and the round union."""
    n, Dh = keys.shape
    bs = cfg.bucket_size
    n_pad = -(-n // bs) * bs
    sets = [set([i]) for i in range(n)]
    for r in range(cfg.n_rounds):
        R = rng.child(r, 0).generator.standard_normal((Dh, n_buckets // 2))
        ids = []
        for i in range(n_pad):
            if i >= n:
                ids.append(n_buckets)
                continue
            vals = [float(keys[i] @ R[:, j]) for j in range(n_buckets // 2)]
            vals += [-v for v in vals]
            ids.append(max(range(len(vals)), key=lambda j: (vals[j], -j)))
        order = sorted(range(n_pad), key=lambda i: (ids[i], i))
        chunks = [order[c * bs:(c + 1) * bs] for c in range(n_pad // bs)]
        for c, chunk in enumerate(chunks):
            window = [t for cc in range(max(0, c - cfg.lookback), c + 1) for t in chunks[cc] if t < n]
            for q in chunk:
                if q < n:
                    sets[q].update(window)
    return sets


class TestDenseAttention:
    def test_single_token(self):
        cfg = AttentionConfig(heads=2, model_dim=4)
        p = DenseAttentionParams(cfg, RngStream(0))
        x = RngStream(1).normal((1, 1, 4))
        out = dense_attention(TokenSequence.unmasked(x), cfg, p).tokens.data
        np.testing.assert_allclose(out, (x @ p.wv.data) @ p.wo.data + p.bo.data, atol=1e-15)

    def test_identical_tokens_give_projected_mean_value(self):
        cfg = AttentionConfig(heads=1, model_dim=3)
        p = DenseAttentionParams(cfg, RngStream(2))
        row = RngStream(3).normal((3,))
        x = np.tile(row, (1, 5, 1))
        out = dense_attention(TokenSequence.unmasked(x), cfg, p).tokens.data
        expected = (row @ p.wv.data) @ p.wo.data + p.bo.data
        np.testing.assert_allclose(out[0], np.tile(expected, (5, 1)), atol=1e-14)

    def test_hand_case_extended_precision(self):
        cfg = AttentionConfig(heads=1, model_dim=2)
        p = DenseAttentionParams(cfg, RngStream(0))
        for w in (p.wq, p.wk, p.wv, p.wo):
            w.data[...] = np.eye(2)
        X = [[0.5, -1.0], [2.0, 0.25], [-1.5, 1.0]]
        out = dense_attention(TokenSequence.unmasked(np.array([X])), cfg, p).tokens.data[0]

        mpmath.mp.dps = 40
        Xm = mpmath.matrix(X)
        expected = np.zeros((3, 2))
        for i in range(3):
            s = [sum(Xm[i, d] * Xm[j, d] for d in range(2)) / mpmath.sqrt(2) for j in range(3)]
            w = [mpmath.e ** v for v in s]
            tot = sum(w)
            for d in range(2):
                expected[i, d] = float(sum(w[j] * Xm[j, d] for j in range(3)) / tot)
        np.testing.assert_allclose(out, expected, rtol=0, atol=1e-14)

    def test_masked_keys_excluded(self):
        cfg = AttentionConfig(heads=1, model_dim=4)
        p = DenseAttentionParams(cfg, RngStream(4))
        x = RngStream(5).normal((1, 4, 4))
        mask = np.array([[1, 1, 1, 0]])
        full = dense_attention(TokenSequence(x, mask), cfg, p).tokens.data
        x2 = x.copy()
        x2[0, 3] = 100.0
        changed = dense_attention(TokenSequence(x2, mask), cfg, p).tokens.data
        np.testing.assert_allclose(full[0, :3], changed[0, :3], atol=1e-14)

    def test_fully_masked(self):
        cfg = AttentionConfig(heads=1, model_dim=2)
        p = DenseAttentionParams(cfg, RngStream(0))
        with pytest.raises(DegenerateRowError):
            dense_attention(TokenSequence(np.ones((1, 2, 2)), np.zeros((1, 2))), cfg, p)

    def test_counter_is_n_squared_per_head(self):
        cfg = AttentionConfig(heads=3, model_dim=6)
        counter = ScoreCounter("dense")
        dense_attention(random_seq(RngStream(0), 1, 10, 6), cfg, DenseAttentionParams(cfg, RngStream(1)), counter)
        assert counter.scores_evaluated == 3 * 100
        assert counter.per_head == 100

    def test_bad_head_split(self):
        with pytest.raises(ConfigError):
            AttentionConfig(heads=3, model_dim=8)


class TestHashing:
    def test_identical_vectors(self):
        v = RngStream(0).normal((1, 8))
        ids = lsh_hash(np.repeat(v, 5, axis=0), 8, RngStream(1))
        assert len(set(ids.tolist())) == 1

    def test_antipodal_two_buckets(self):
        x = RngStream(2).normal((20, 6))
        a = lsh_hash(x, 2, RngStream(3))
        b = lsh_hash(-x, 2, RngStream(3))
        assert np.all(a != b)

    def test_odd_buckets(self):
        with pytest.raises(ConfigError):
            lsh_hash(np.ones((2, 2)), 3, RngStream(0))

    def test_near_duplicates_collide_more(self):
        near_hits = rand_hits = near_total = rand_total = 0
        for seed in range(32):
            rng = RngStream(seed)
            x = rng.normal((64, 16))
            x /= np.linalg.norm(x, axis=1, keepdims=True)
            y = x + 0.01 * rng.normal((64, 16))
            y /= np.linalg.norm(y, axis=1, keepdims=True)
            assert np.all(np.sum(x * y, axis=1) > 0.99)
            ids = lsh_hash(np.concatenate([x, y]), 8, rng.child(99))
            near_hits += int(np.sum(ids[:64] == ids[64:]))
            near_total += 64
            rand_hits += int(np.sum(ids[:32] == ids[32:64]))
            rand_total += 32
        assert near_hits / near_total > rand_hits / rand_total

    def test_n_buckets_rule(self):
        assert n_buckets_for(256, 16) == 16
        assert n_buckets_for(48, 16) == 4
        assert n_buckets_for(16, 16) == 2


class TestBuildChunks:
    def test_single_bucket_identity(self):
        a = build_chunks([3, 3, 3, 3], 2)
        np.testing.assert_array_equal(a.permutation, [0, 1, 2, 3])
        assert [a.chunk(c).tolist() for c in range(a.n_chunks)] == [[0, 1], [2, 3]]

    def test_hand_sort(self):
        np.testing.assert_array_equal(build_chunks([1, 0, 1, 0], 2).permutation, [1, 3, 0, 2])

    def test_round_trip(self):
        ids = RngStream(0).integers(0, 64, 1024)
        a = build_chunks(ids, 16)
        np.testing.assert_array_equal(ids[a.permutation][a.inverse], ids)
        np.testing.assert_array_equal(a.permutation[a.inverse], np.arange(1024))

    def test_not_multiple(self):
        with pytest.raises(InternalError):
            build_chunks([0, 1, 2], 2)


class TestLSHAttention:
    @pytest.mark.parametrize("seed", range(5))
    def test_single_chunk_equals_dense(self, seed):
        cfg = AttentionConfig(heads=2, model_dim=8, bucket_size=16, shared_qk=True)
        lsh, dense = shared_qk_pair(cfg, seed)
        seq = random_seq(RngStream(100 + seed), 2, 16, 8)
        a = lsh_attention(seq, cfg, lsh, RngStream(seed)).tokens.data
        b = dense_attention(seq, AttentionConfig(2, 8, shared_qk=True), dense).tokens.data
        assert np.max(np.abs(a - b)) < 1e-10

    def test_saturation_equals_dense(self):
        cfg0 = AttentionConfig(heads=1, model_dim=8, bucket_size=4, lookback=1, shared_qk=True)
        lsh, dense = shared_qk_pair(cfg0, 3)
        seq = random_seq(RngStream(4), 1, 32, 8)
        for rounds in range(1, 200):
            cfg = AttentionConfig(1, 8, bucket_size=4, n_rounds=rounds, lookback=1, shared_qk=True)
            sets = candidate_sets(seq, cfg, lsh, RngStream(9))[0][0]
            if all(len(s) == 32 for s in sets):
                break
        else:
            pytest.fail("candidate sets never saturated")
        a = lsh_attention(seq, cfg, lsh, RngStream(9)).tokens.data
        b = dense_attention(seq, cfg0, dense).tokens.data
        assert np.max(np.abs(a - b)) < 1e-10

    def test_counter_bound_n256(self):
        cfg = AttentionConfig(heads=1, model_dim=16, bucket_size=16, n_rounds=2, lookback=1, shared_qk=True)
        counter = ScoreCounter("lsh")
        lsh_attention(random_seq(RngStream(0), 1, 256, 16), cfg, LSHAttentionParams(cfg, RngStream(1)),
                      RngStream(2), counter)
        assert counter.scores_evaluated <= 256 * 16 * 2 * 2 == 16384 < 65536

    def test_counter_equals_candidate_set_sizes(self):
        cfg = AttentionConfig(heads=2, model_dim=8, bucket_size=4, shared_qk=True)
        p = LSHAttentionParams(cfg, RngStream(0))
        seq = random_seq(RngStream(1), 2, 24, 8)
        counter = ScoreCounter("lsh")
        lsh_attention(seq, cfg, p, RngStream(5), counter)
        sets = candidate_sets(seq, cfg, p, RngStream(5))
        assert counter.scores_evaluated == sum(len(s) for b in sets for h in b for s in h)

    def test_single_chunk_sets_are_everything(self):
        cfg = AttentionConfig(heads=1, model_dim=4, bucket_size=8, shared_qk=True)
        sets = candidate_sets(random_seq(RngStream(0), 1, 8, 4), cfg, LSHAttentionParams(cfg, RngStream(1)),
                              RngStream(2))[0][0]
        assert all(s == frozenset(range(8)) for s in sets)

    def test_no_lookback_one_round_sets_are_chunks(self):
        cfg = AttentionConfig(heads=1, model_dim=4, bucket_size=4, n_rounds=1, lookback=0, shared_qk=True)
        p = LSHAttentionParams(cfg, RngStream(1))
        seq = random_seq(RngStream(0), 1, 16, 4)
        sets = candidate_sets(seq, cfg, p, RngStream(2))[0][0]
        distinct = {s for s in sets}
        assert len(distinct) == 4 and all(len(s) == 4 for s in distinct)
        assert set().union(*distinct) == set(range(16))

    @pytest.mark.parametrize("lookback,rounds", [(0, 1), (1, 1), (1, 2), (2, 3)])
    def test_brute_force_sets(self, lookback, rounds):
        cfg = AttentionConfig(heads=1, model_dim=8, bucket_size=8, n_rounds=rounds, lookback=lookback,
                              shared_qk=True)
        p = LSHAttentionParams(cfg, RngStream(7))
        seq = random_seq(RngStream(8), 1, 64, 8)
        got = candidate_sets(seq, cfg, p, RngStream(11))[0][0]
        q = seq.tokens.data[0] @ p.wqk.data
        keys = q / np.linalg.norm(q, axis=1, keepdims=True)
        expected = brute_force_sets(keys, n_buckets_for(64, 8), cfg, RngStream(11))
        assert [set(s) for s in got] == expected

    def test_padding_to_bucket_multiple(self):
        cfg = AttentionConfig(heads=1, model_dim=4, bucket_size=4, shared_qk=True)
        p = LSHAttentionParams(cfg, RngStream(0))
        seq = random_seq(RngStream(1), 1, 10, 4)
        sets = candidate_sets(seq, cfg, p, RngStream(2))[0][0]
        assert all(max(s) < 10 for s in sets)
        assert lsh_attention(seq, cfg, p, RngStream(2)).tokens.shape == (1, 10, 4)

    def test_masked_tokens_never_candidates(self):
        cfg = AttentionConfig(heads=2, model_dim=8, bucket_size=4, n_rounds=3, shared_qk=True)
        p = LSHAttentionParams(cfg, RngStream(0))
        mask = np.ones((1, 20), dtype=int)
        mask[0, [3, 7, 19]] = 0
        seq = TokenSequence(RngStream(1).normal((1, 20, 8)), mask)
        for head in candidate_sets(seq, cfg, p, RngStream(2))[0]:
            for i, s in enumerate(head):
                assert not s & {3, 7, 19}
                if mask[0, i]:
                    assert i in s
                else:
                    assert not s
        # masked token content must not leak into valid outputs
        x2 = seq.tokens.data.copy()
        x2[0, [3, 7, 19]] = 50.0
        a = lsh_attention(seq, cfg, p, RngStream(2)).tokens.data
        b = lsh_attention(TokenSequence(x2, mask), cfg, p, RngStream(2)).tokens.data
        keep = mask[0] > 0
        np.testing.assert_allclose(a[0, keep], b[0, keep], atol=1e-13)

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(4, 40), bs=st.sampled_from([2, 4, 8]))
    def test_more_rounds_and_lookback_only_add_candidates(self, seed, n, bs):
        base = AttentionConfig(1, 4, bucket_size=bs, n_rounds=1, lookback=0, shared_qk=True)
        p = LSHAttentionParams(base, RngStream(seed))
        seq = random_seq(RngStream(seed + 1), 1, n, 4)
        small = candidate_sets(seq, base, p, RngStream(seed + 2))[0][0]
        for bigger in (AttentionConfig(1, 4, bucket_size=bs, n_rounds=3, lookback=0, shared_qk=True),
                       AttentionConfig(1, 4, bucket_size=bs, n_rounds=1, lookback=2, shared_qk=True)):
            big = candidate_sets(seq, bigger, p, RngStream(seed + 2))[0][0]
            assert all(s <= t for s, t in zip(small, big))
            assert all(i in t for i, t in enumerate(big))
            assert sum(len(t) for t in big) <= n * bs * (1 + bigger.lookback) * bigger.n_rounds

    def test_deterministic_given_seed(self):
        cfg = AttentionConfig(heads=2, model_dim=8, bucket_size=4, shared_qk=True)
        p = LSHAttentionParams(cfg, RngStream(0))
        seq = random_seq(RngStream(1), 1, 32, 8)
        a = lsh_attention(seq, cfg, p, RngStream(3)).tokens.data
        b = lsh_attention(seq, cfg, p, RngStream(3)).tokens.data
        np.testing.assert_array_equal(a, b)

    def test_head_order_independence(self):
        # each head hashes from its own (round, head) stream, so one head's
        # candidates do not depend on how many heads exist
        cfg1 = AttentionConfig(heads=1, model_dim=4, bucket_size=4, shared_qk=True)
        cfg2 = AttentionConfig(heads=2, model_dim=8, bucket_size=4, shared_qk=True)
        p2 = LSHAttentionParams(cfg2, RngStream(0))
        p1 = LSHAttentionParams(cfg1, RngStream(0))
        p1.wqk.data[...] = p2.wqk.data[:4, :4]
        x = RngStream(1).normal((1, 16, 8))
        x[:, :, 4:] = 0.0
        s2 = candidate_sets(TokenSequence.unmasked(x), cfg2, p2, RngStream(5))[0][0]
        s1 = candidate_sets(TokenSequence.unmasked(x[:, :, :4]), cfg1, p1, RngStream(5))[0][0]
        assert s1 == s2


class TestAttentionGradients:
    @pytest.mark.parametrize("variant", ["dense", "lsh"])
    def test_finite_differences(self, variant):
        rng = RngStream(21)
        if variant == "dense":
            cfg = AttentionConfig(heads=2, model_dim=4)
            p = DenseAttentionParams(cfg, rng.child(0))
        else:
            cfg = AttentionConfig(heads=2, model_dim=4, bucket_size=4, n_rounds=2, shared_qk=True)
            p = LSHAttentionParams(cfg, rng.child(0))
        for t in p.parameters().values():
            t.data[...] = rng.child(5, len(t.shape), t.size).normal(t.shape, scale=0.5)
        x = Tensor(rng.normal((1, 12, 4)), requires_grad=True)
        target = rng.normal((1, 12, 4))

        def loss():
            seq = TokenSequence.unmasked(x)
            if variant == "dense":
                out = dense_attention(seq, cfg, p)
            else:
                out = lsh_attention(seq, cfg, p, RngStream(3))
            return (out.tokens * target).sum()

        params = dict(p.parameters(), x=x)
        samples = check_gradients(loss, params, rng, per_param=6)
        worst = max(samples, key=lambda s: s.rel_err)
        assert worst.rel_err < 1e-4, worst
