"""Decomposition tables and streaming top-k against brute-force references.

The oracle path (tests/oracles.py) reconstructs every phrase in float64
and sorts full score rows; the package path gathers from tables and
streams through heaps.  Agreement on ids must be exact, agreement on
scores is float64-reassociation level.
"""

import math
import tracemalloc
import warnings

import numpy as np
import pytest
from oracles import make_model, oracle_scores, oracle_topk, random_params

from qbias import fsq, retrieval
from qbias._kernel import HAVE_NUMBA
from qbias.attention import ProjectionSet
from qbias.errors import ConfigurationError, InputError
from qbias.retrieval import (
    Columns,
    approx_score,
    build_score_table,
    precompute_columns,
    score_matrix,
    split_key_blocks,
    topk_from_codes,
    union_retrieved,
)

ENGINES = ("numba", "numpy") if HAVE_NUMBA else ("numpy",)

# (dim, groups, levels): covers one group, many groups, the |L| = 5
# two-table kernel, and a sub-dimension narrower than |L|.
MODEL_MENU = [
    (8, 1, (8, 5, 5, 5)),
    (8, 2, (8, 5, 5, 5)),
    (16, 4, (3, 2)),
    (15, 3, (5, 5, 5, 5, 5)),
]


def build_case(seed, dim, groups, levels, b_n, t_n, packed=True):
    rng = np.random.default_rng(seed)
    params, proj = make_model(rng, dim, groups, levels)
    emb = rng.standard_normal((b_n, dim)).astype(np.float32)
    codes = fsq.quantize(emb, params).codes
    data = fsq.pack_codes(codes, levels) if packed else codes
    frames = rng.standard_normal((t_n, dim)).astype(np.float32)
    return params, proj, data, frames


class TestSplitKeyBlocks:
    def test_extracts_diagonal_blocks(self):
        rng = np.random.default_rng(0)
        proj = ProjectionSet.random(12, groups=3, seed=1)
        blocks = split_key_blocks(proj.w_k, 3)
        assert blocks.shape == (3, 4, 4)
        for g in range(3):
            np.testing.assert_array_equal(
                blocks[g], proj.w_k[g * 4 : (g + 1) * 4, g * 4 : (g + 1) * 4]
            )

    def test_rejects_off_block_mass(self):
        w = np.asarray(ProjectionSet.random(8, groups=2, seed=0).w_k)
        w[0, 7] = 1e-6  # any nonzero leakage breaks the decomposition
        with pytest.raises(ConfigurationError):
            split_key_blocks(w, 2)

    def test_rejects_non_square(self):
        with pytest.raises(ConfigurationError):
            split_key_blocks(np.zeros((4, 6)), 2)

    def test_rejects_indivisible_groups(self):
        with pytest.raises(ConfigurationError):
            split_key_blocks(np.eye(6), 4)

    def test_dense_matrix_needs_one_group(self):
        w = np.random.default_rng(3).standard_normal((6, 6))
        blocks = split_key_blocks(w, 1)
        np.testing.assert_array_equal(blocks[0], w)
        with pytest.raises(ConfigurationError):
            split_key_blocks(w, 2)


class TestColumns:
    def test_identity_key_projection_returns_output_affine(self):
        rng = np.random.default_rng(1)
        params = random_params(rng, (8, 5, 5, 5), groups=2, subdim=4, biases=True)
        cols = precompute_columns(params, ProjectionSet.identity(8))
        np.testing.assert_array_equal(cols.a, params.a_out.astype(np.float64))
        np.testing.assert_array_equal(cols.b, params.b_out.astype(np.float64))

    def test_matches_per_group_products(self):
        rng = np.random.default_rng(2)
        params, proj = make_model(rng, 12, 3, (3, 2))
        cols = precompute_columns(params, proj)
        blocks = split_key_blocks(proj.w_k, 3)
        for g in range(3):
            np.testing.assert_allclose(
                cols.a[g], blocks[g].T @ params.a_out[g].astype(np.float64), atol=1e-12
            )
            np.testing.assert_allclose(
                cols.b[g], blocks[g].T @ params.b_out[g].astype(np.float64), atol=1e-12
            )


class TestScoreTable:
    def test_unused_slots_are_nan(self):
        rng = np.random.default_rng(3)
        params, proj = make_model(rng, 8, 2, (3, 2))
        cols = precompute_columns(params, proj)
        q = rng.standard_normal(8).astype(np.float32)
        table = build_score_table(q, cols)
        assert table.values.shape == (2, 2, 3)
        assert np.all(np.isfinite(table.values[:, 0, :]))  # l = 3: full row
        assert np.all(np.isfinite(table.values[:, 1, :2]))
        assert np.all(np.isnan(table.values[:, 1, 2]))  # l = 2: dead slot

    def test_entries_are_query_column_products(self):
        rng = np.random.default_rng(4)
        params, proj = make_model(rng, 8, 2, (8, 5, 5, 5))
        cols = precompute_columns(params, proj)
        q = rng.standard_normal(8).astype(np.float32).astype(np.float64)
        table = build_score_table(q, cols)
        for g in range(2):
            qg = q[g * 4 : (g + 1) * 4]
            for i, l in enumerate(params.levels):
                for c in range(l):
                    u = 2.0 * c / (l - 1.0) - 1.0
                    want = float(qg @ cols.a[g, :, i]) * u
                    assert math.isclose(table.values[g, i, c], want, abs_tol=1e-12)

    def test_bias_matches_oracle(self):
        rng = np.random.default_rng(5)
        params, proj = make_model(rng, 8, 2, (3, 2))
        cols = precompute_columns(params, proj)
        frames = rng.standard_normal((1, 8)).astype(np.float32)
        _, bias = oracle_scores(frames, np.zeros((1, 2, 2), dtype=np.uint8), params, proj)
        q = (frames @ proj.w_q)[0]
        table = build_score_table(q, cols)
        assert math.isclose(table.bias, float(bias[0]), abs_tol=1e-12)

    def test_rejects_batches_and_nonfinite(self):
        rng = np.random.default_rng(6)
        params, proj = make_model(rng, 8, 2, (3, 2))
        cols = precompute_columns(params, proj)
        with pytest.raises(InputError):
            build_score_table(np.zeros((2, 8)), cols)
        bad = np.zeros(8)
        bad[3] = np.nan
        with pytest.raises(InputError):
            build_score_table(bad, cols)


class TestApproxScore:
    def test_matches_exact_dot_products(self):
        rng = np.random.default_rng(7)
        params, proj = make_model(rng, 8, 2, (8, 5, 5, 5))
        cols = precompute_columns(params, proj)
        emb = rng.standard_normal((20, 8)).astype(np.float32)
        words = fsq.pack_codes(fsq.quantize(emb, params).codes, params.levels)
        frames = rng.standard_normal((1, 8)).astype(np.float32)
        exact, bias = oracle_scores(frames, words, params, proj)
        table = build_score_table((frames @ proj.w_q)[0], cols)
        for j in range(20):
            got = approx_score(table, words[j], include_bias=True)
            assert math.isclose(got, exact[0, j], abs_tol=1e-10)
            centred = approx_score(table, words[j])
            assert math.isclose(got - centred, table.bias, abs_tol=1e-12)

    def test_accepts_unpacked_rows(self):
        rng = np.random.default_rng(8)
        params, proj = make_model(rng, 8, 2, (3, 2))
        cols = precompute_columns(params, proj)
        table = build_score_table(rng.standard_normal(8).astype(np.float32), cols)
        codes = np.array([[1, 0], [2, 1]], dtype=np.uint8)
        words = fsq.pack_codes(codes[None], params.levels)[0]
        assert approx_score(table, words) == approx_score(table, codes)

    def test_out_of_range_code_is_loudly_nan(self):
        rng = np.random.default_rng(9)
        params, proj = make_model(rng, 8, 2, (3, 2))
        cols = precompute_columns(params, proj)
        table = build_score_table(rng.standard_normal(8).astype(np.float32), cols)
        bad = np.array([[0, 2], [0, 0]], dtype=np.uint8)  # channel 1 has l = 2
        assert math.isnan(approx_score(table, bad))


class TestScoreMatrix:
    def test_matches_oracle_with_and_without_bias(self):
        rng = np.random.default_rng(10)
        params, proj = make_model(rng, 8, 2, (8, 5, 5, 5))
        cols = precompute_columns(params, proj)
        emb = rng.standard_normal((64, 8)).astype(np.float32)
        words = fsq.pack_codes(fsq.quantize(emb, params).codes, params.levels)
        frames = rng.standard_normal((5, 8)).astype(np.float32)
        exact, bias = oracle_scores(frames, words, params, proj)
        q_rows = frames @ proj.w_q
        got = score_matrix(q_rows, cols, words, include_bias=True)
        np.testing.assert_allclose(got, exact, atol=1e-10)
        centred = score_matrix(q_rows, cols, words)
        np.testing.assert_allclose(got - centred, np.broadcast_to(bias[:, None], got.shape), atol=1e-12)

    def test_words_and_codes_agree(self):
        rng = np.random.default_rng(11)
        params, proj = make_model(rng, 8, 2, (3, 2))
        cols = precompute_columns(params, proj)
        codes = fsq.quantize(rng.standard_normal((30, 8)).astype(np.float32), params).codes
        words = fsq.pack_codes(codes, params.levels)
        q_rows = rng.standard_normal((2, 8)).astype(np.float32) @ proj.w_q
        np.testing.assert_array_equal(
            score_matrix(q_rows, cols, words), score_matrix(q_rows, cols, codes)
        )


class TestTopK:
    @pytest.mark.parametrize("engine", ENGINES)
    def test_matches_full_sort_oracle(self, engine):
        for seed, (dim, groups, levels) in enumerate(MODEL_MENU):
            for rep in range(4):
                rng_seed = 100 * seed + rep
                b_n = [37, 256, 1500, 4099][rep]  # straddles the stream block
                params, proj, words, frames = build_case(
                    rng_seed, dim, groups, levels, b_n, t_n=4
                )
                for k in (1, 7, 64):
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore", UserWarning)
                        got = topk_from_codes(
                            frames, words, params, proj, k, engine=engine
                        )
                    ids, scores, _ = oracle_topk(frames, words, params, proj, k)
                    np.testing.assert_array_equal(got.ids, ids)
                    np.testing.assert_allclose(got.scores, scores, atol=1e-9)
                    assert got.k_requested == k
                    assert got.truncated == (k > b_n)

    @pytest.mark.parametrize("engine", ENGINES)
    def test_rows_sorted_score_desc_id_asc(self, engine):
        params, proj, words, frames = build_case(12, 8, 2, (8, 5, 5, 5), 500, 3)
        res = topk_from_codes(frames, words, params, proj, 20, engine=engine)
        assert np.all(np.diff(res.scores, axis=1) <= 0)
        for t in range(3):
            s, i = res.scores[t], res.ids[t]
            ties = s[:-1] == s[1:]
            assert np.all(i[:-1][ties] < i[1:][ties])

    @pytest.mark.parametrize("engine", ENGINES)
    def test_duplicate_phrases_break_toward_small_ids(self, engine):
        rng = np.random.default_rng(13)
        params, proj = make_model(rng, 8, 2, (3, 2))
        one = rng.standard_normal((1, 8)).astype(np.float32)
        emb = np.repeat(one, 11, axis=0)  # identical codes, identical scores
        words = fsq.pack_codes(fsq.quantize(emb, params).codes, params.levels)
        frames = rng.standard_normal((2, 8)).astype(np.float32)
        res = topk_from_codes(frames, words, params, proj, 4, engine=engine)
        np.testing.assert_array_equal(res.ids, np.tile(np.arange(4), (2, 1)))
        assert np.all(res.scores == res.scores[:, :1])

    def test_engines_agree_exactly_on_ids(self):
        if not HAVE_NUMBA:
            pytest.skip("single-engine build")
        params, proj, words, frames = build_case(14, 15, 3, (5, 5, 5, 5, 5), 2000, 5)
        a = topk_from_codes(frames, words, params, proj, 25, engine="numba")
        b = topk_from_codes(frames, words, params, proj, 25, engine="numpy")
        np.testing.assert_array_equal(a.ids, b.ids)
        np.testing.assert_allclose(a.scores, b.scores, atol=1e-10)

    def test_many_frames_cross_chunk_boundaries(self):
        # 40 frames at G = 16 forces several table chunks per call.
        params, proj, words, frames = build_case(15, 64, 16, (8, 5, 5, 5), 300, 40)
        res = topk_from_codes(frames, words, params, proj, 5)
        ids, scores, _ = oracle_topk(frames, words, params, proj, 5)
        np.testing.assert_array_equal(res.ids, ids)
        np.testing.assert_allclose(res.scores, scores, atol=1e-9)

    @pytest.mark.parametrize("engine", ENGINES)
    def test_requesting_more_than_catalogue_truncates(self, engine):
        params, proj, words, frames = build_case(16, 8, 2, (3, 2), 6, 2)
        with pytest.warns(UserWarning, match="top-10"):
            res = topk_from_codes(frames, words, params, proj, 10, engine=engine)
        assert res.truncated
        assert res.ids.shape == (2, 6)
        assert sorted(res.ids[0]) == list(range(6))  # everything comes back

    def test_empty_catalogue_yields_empty_result(self):
        params, proj, _, frames = build_case(17, 8, 2, (3, 2), 4, 2)
        empty = np.zeros((0, 2), dtype=np.uint16)
        with pytest.warns(UserWarning):
            res = topk_from_codes(frames, empty, params, proj, 3)
        assert res.ids.shape == (2, 0)
        assert res.truncated

    def test_k_below_one_rejected(self):
        params, proj, words, frames = build_case(18, 8, 2, (3, 2), 4, 1)
        with pytest.raises(InputError):
            topk_from_codes(frames, words, params, proj, 0)

    def test_unknown_engine_rejected(self):
        params, proj, words, frames = build_case(19, 8, 2, (3, 2), 4, 1)
        with pytest.raises(InputError):
            topk_from_codes(frames, words, params, proj, 1, engine="fortran")

    @pytest.mark.parametrize("engine", ENGINES)
    def test_corrupt_words_rejected(self, engine):
        params, proj, words, frames = build_case(20, 8, 2, (8, 5, 5, 5), 64, 1)
        high = words.copy()
        high[5, 0] |= np.uint16(1 << 13)  # bit above the 4 coded channels
        with pytest.raises(InputError):
            topk_from_codes(frames, high, params, proj, 3, engine=engine)
        oor = words.copy()
        oor[7, 1] = (oor[7, 1] & ~np.uint16(7 << 3)) | np.uint16(5 << 3)  # l = 5 channel
        with pytest.raises(InputError):
            topk_from_codes(frames, oor, params, proj, 3, engine=engine)

    def test_corrupt_codes_rejected(self):
        params, proj, _, frames = build_case(21, 8, 2, (3, 2), 16, 1)
        codes = np.zeros((16, 2, 2), dtype=np.uint8)
        codes[9, 1, 1] = 2  # channel 1 has l = 2
        with pytest.raises(InputError):
            topk_from_codes(frames, codes, params, proj, 3)

    def test_nonfinite_frames_rejected(self):
        params, proj, words, _ = build_case(22, 8, 2, (3, 2), 8, 1)
        frames = np.zeros((1, 8), dtype=np.float32)
        frames[0, 2] = np.inf
        with pytest.raises(InputError):
            topk_from_codes(frames, words, params, proj, 2)

    def test_unpackable_levels_use_byte_codes(self):
        # l = 9 exceeds the 3-bit fields, so only the code-matrix form works.
        assert not fsq.packing_supported((9, 9))
        params, proj, codes, frames = build_case(23, 8, 2, (9, 9), 400, 3, packed=False)
        res = topk_from_codes(frames, codes, params, proj, 6)
        ids, scores, _ = oracle_topk(frames, codes, params, proj, 6)
        np.testing.assert_array_equal(res.ids, ids)
        np.testing.assert_allclose(res.scores, scores, atol=1e-9)
        if HAVE_NUMBA:
            with pytest.raises(ConfigurationError):
                topk_from_codes(frames, codes, params, proj, 6, engine="numba")

    def test_packed_input_with_unpackable_levels_rejected(self):
        params, proj, _, frames = build_case(24, 8, 2, (9, 9), 4, 1, packed=False)
        fake_words = np.zeros((4, 2), dtype=np.uint16)
        with pytest.raises(ConfigurationError):
            topk_from_codes(frames, fake_words, params, proj, 1)

    @pytest.mark.parametrize("engine", ENGINES)
    def test_repeat_calls_are_bit_identical(self, engine):
        params, proj, words, frames = build_case(25, 8, 2, (8, 5, 5, 5), 800, 3)
        a = topk_from_codes(frames, words, params, proj, 9, engine=engine)
        b = topk_from_codes(frames, words, params, proj, 9, engine=engine)
        np.testing.assert_array_equal(a.ids, b.ids)
        assert np.array_equal(a.scores, b.scores)  # bitwise, not approximate

    def test_gather_op_count(self):
        params, proj, words, frames = build_case(26, 8, 2, (8, 5, 5, 5), 513, 3)
        res = topk_from_codes(
            frames, words, params, proj, 4, engine="numpy", count_ops=True
        )
        assert res.gather_ops == 3 * 513 * 2 * 4  # T * B * G * |L|
        silent = topk_from_codes(frames, words, params, proj, 4, engine="numpy")
        assert silent.gather_ops is None


class TestMemoryFootprint:
    @pytest.mark.parametrize("engine", ENGINES)
    def test_peak_does_not_scale_with_catalogue(self, engine):
        params, proj, _, frames = build_case(27, 8, 2, (8, 5, 5, 5), 4, 2)
        rng = np.random.default_rng(28)

        def run(b_n):
            emb = rng.standard_normal((b_n, 8)).astype(np.float32)
            words = fsq.pack_codes(fsq.quantize(emb, params).codes, params.levels)
            topk_from_codes(frames, words, params, proj, 5, engine=engine)  # warm
            tracemalloc.start()
            topk_from_codes(frames, words, params, proj, 5, engine=engine)
            _, peak = tracemalloc.get_traced_memory()
            tracemalloc.stop()
            return peak

        small, large = run(8192), run(131072)
        # Streaming works in fixed blocks; 16x the phrases must not move
        # the transient peak by more than noise.
        assert large < small + (256 << 10)


class TestUnion:
    def test_excludes_reserved_id_and_sorts(self):
        res = retrieval.RetrievalResult(
            ids=np.array([[0, 7, 3], [3, 0, 12]], dtype=np.int64),
            scores=np.zeros((2, 3)),
            k_requested=3,
        )
        assert union_retrieved(res) == [3, 7, 12]
        assert union_retrieved(res, exclude=()) == [0, 3, 7, 12]
        assert union_retrieved(res, exclude=(3, 7, 12)) == [0]
