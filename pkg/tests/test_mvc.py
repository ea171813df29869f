import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from mvcaug import rng as rng_mod
from mvcaug.errors import ConfigError, InvalidArgumentError, ShapeError
from mvcaug.mvc import (COARSE, FINE, MixerConfig, coarse_mix, fine_mix, load_conditionings, mix_embeddings,
                        replay_provenance, sample_index_pair, save_conditionings)

from oracles import documented_stream, mvc_straight_line


def pool_of(k, m, d, seed=0):
    g = np.random.default_rng(seed)
    return [g.standard_normal((m, d)).astype(np.float32) for _ in range(k)]


class TestCoarseMix:
    def test_full_range_is_donor(self):
        base, donor = pool_of(2, 5, 3)
        np.testing.assert_array_equal(coarse_mix(base, donor, 1, 5), donor)

    def test_self_donor_is_identity(self):
        (base,) = pool_of(1, 5, 3)
        for r, s in itertools.combinations(range(1, 6), 2):
            np.testing.assert_array_equal(coarse_mix(base, base, r, s), base)

    def test_hand_example(self):
        out = coarse_mix(np.ones((4, 2)), np.full((4, 2), 2.0), 2, 3)
        np.testing.assert_array_equal(out[:, 0], [1, 2, 2, 1])
        np.testing.assert_array_equal(out[:, 1], [1, 2, 2, 1])

    def test_inputs_untouched(self):
        base, donor = pool_of(2, 4, 2)
        b0, d0 = base.copy(), donor.copy()
        coarse_mix(base, donor, 1, 3)
        np.testing.assert_array_equal(base, b0)
        np.testing.assert_array_equal(donor, d0)

    @pytest.mark.parametrize("r,s", [(2, 2), (3, 2), (0, 2), (1, 5)])
    def test_bad_range(self, r, s):
        base, donor = pool_of(2, 4, 2)
        with pytest.raises(InvalidArgumentError):
            coarse_mix(base, donor, r, s)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            coarse_mix(np.ones((4, 2)), np.ones((3, 2)), 1, 2)


class TestFineMix:
    def test_full_row(self):
        base, donor = pool_of(2, 3, 4)
        out = fine_mix(base, donor, 2, 1, 4)
        np.testing.assert_array_equal(out[1], donor[1])
        np.testing.assert_array_equal(out[[0, 2]], base[[0, 2]])

    def test_self_donor_is_identity(self):
        (base,) = pool_of(1, 3, 4)
        np.testing.assert_array_equal(fine_mix(base, base, 3, 2, 4), base)

    def test_hand_example(self):
        out = fine_mix(np.zeros((2, 4)), np.full((2, 4), 3.0), 2, 2, 3)
        expected = np.zeros((2, 4))
        expected[1, 1] = expected[1, 2] = 3
        np.testing.assert_array_equal(out, expected)

    @pytest.mark.parametrize("row,u,v", [(0, 1, 2), (3, 1, 2), (1, 2, 2), (1, 0, 2), (1, 1, 5)])
    def test_bad_indices(self, row, u, v):
        with pytest.raises(InvalidArgumentError):
            fine_mix(np.zeros((2, 4)), np.ones((2, 4)), row, u, v)


class TestSampleIndexPair:
    def test_bound_two(self):
        g = np.random.default_rng(0)
        assert {sample_index_pair(g, 2) for _ in range(50)} == {(1, 2)}

    def test_bound_one_rejected(self):
        with pytest.raises(InvalidArgumentError):
            sample_index_pair(np.random.default_rng(0), 1)

    def test_uniform_over_pairs(self):
        g = np.random.default_rng(2024)
        n = 100_000
        pairs = list(itertools.combinations(range(1, 5), 2))
        counts = dict.fromkeys(pairs, 0)
        for _ in range(n):
            counts[sample_index_pair(g, 4)] += 1
        freqs = np.array([counts[p] / n for p in pairs])
        assert np.all(np.abs(freqs - 1 / 6) < 0.01)
        assert stats.chisquare(list(counts.values())).pvalue > 1e-3


class TestMixEmbeddings:
    def test_no_mixing_single_base(self):
        (e,) = pool_of(1, 4, 3)
        out = mix_embeddings([e], MixerConfig(0, 0, 3, 1), np.zeros((4, 3), np.float32), "c")
        assert len(out) == 3
        for o in out:
            np.testing.assert_array_equal(o.e_cond, e)
            assert o.provenance == []

    def test_single_caption_with_mixing_is_config_error(self):
        with pytest.raises(ConfigError):
            mix_embeddings(pool_of(1, 4, 3), MixerConfig(1, 0, 1), np.zeros((4, 3), np.float32))

    def test_empty_pool(self):
        with pytest.raises(InvalidArgumentError):
            mix_embeddings([], MixerConfig(), np.zeros((4, 3), np.float32))

    def test_config_validation(self):
        with pytest.raises(InvalidArgumentError):
            MixerConfig(-1, 0, 1)
        with pytest.raises(InvalidArgumentError):
            MixerConfig(0, 0, 0)

    def test_matches_straight_line_oracle(self):
        pool = pool_of(2, 4, 3, seed=5)
        cfg = MixerConfig(1, 1, 2, 42)
        got = mix_embeddings(pool, cfg, np.zeros((4, 3), np.float32), "cat")
        want, provs = mvc_straight_line(pool, 1, 1, 2, documented_stream(42, "mvc", "cat"))
        for g, w, p in zip(got, want, provs):
            assert g.e_cond.tobytes() == w.tobytes()
            assert g.provenance == p

    def test_provenance_layout_and_donor_exclusion(self):
        pool = pool_of(3, 6, 4)
        for c in mix_embeddings(pool, MixerConfig(2, 3, 20, 9), np.zeros((6, 4), np.float32), "x"):
            kinds = [k for _, k, _ in c.provenance]
            assert kinds == [COARSE] * 2 + [FINE] * 3
            assert all(d != c.base_index for d, _, _ in c.provenance)
            assert c.e_null.shape == c.e_cond.shape

    def test_deterministic_and_pure(self):
        pool = pool_of(3, 5, 4)
        before = [p.copy() for p in pool]
        cfg = MixerConfig(1, 2, 6, 3)
        a = mix_embeddings(pool, cfg, np.zeros((5, 4), np.float32), "k")
        b = mix_embeddings(pool, cfg, np.zeros((5, 4), np.float32), "k")
        assert [x.e_cond.tobytes() for x in a] == [x.e_cond.tobytes() for x in b]
        for p, q in zip(pool, before):
            np.testing.assert_array_equal(p, q)

    def test_class_streams_independent(self):
        pool = pool_of(3, 6, 4)
        cfg = MixerConfig(1, 2, 6, 3)
        a = mix_embeddings(pool, cfg, np.zeros((6, 4), np.float32), "cat")
        b = mix_embeddings(pool, cfg, np.zeros((6, 4), np.float32), "dog")
        assert [x.provenance for x in a] != [x.provenance for x in b]

    @settings(max_examples=60, deadline=None)
    @given(k=st.integers(2, 4), m=st.integers(2, 6), d=st.integers(2, 5), P=st.integers(0, 3),
           Q=st.integers(0, 3), n=st.integers(1, 5), seed=st.integers(0, 2**32))
    def test_positional_closure(self, k, m, d, P, Q, n, seed):
        pool = pool_of(k, m, d, seed % 1000)
        stack = np.stack(pool)
        for c in mix_embeddings(pool, MixerConfig(P, Q, n, seed), np.zeros((m, d), np.float32), "c"):
            assert np.all((stack == c.e_cond[None]).any(axis=0))
            if P == Q == 0:
                assert any(np.array_equal(c.e_cond, p) for p in pool)

    def test_replay_and_archive_round_trip(self, tmp_path):
        pool = pool_of(3, 4, 3)
        null = np.zeros((4, 3), np.float32)
        conds = mix_embeddings(pool, MixerConfig(1, 2, 4, 7), null, "cat")
        for c in conds:
            again = replay_provenance(pool, null, c.provenance_json())
            assert again.e_cond.tobytes() == c.e_cond.tobytes()
        save_conditionings(tmp_path / "m.emb", conds)
        back = load_conditionings(tmp_path / "m.emb", 4, 3)
        assert len(back) == 4
        for a, b in zip(conds, back):
            assert a.e_cond.tobytes() == b.e_cond.tobytes()
            assert a.provenance == b.provenance and b.class_label == "cat"


def test_stream_matches_documented_recipe():
    a = rng_mod.stream(99, "mvc", "circle").integers(0, 2**31, 8)
    b = documented_stream(99, "mvc", "circle").integers(0, 2**31, 8)
    np.testing.assert_array_equal(a, b)
