"""Metrics vs brute-force oracles, sweep determinism, byte accounting."""

import math

import numpy as np
import pytest

from oracles import (
    brute_force_map_at_k,
    brute_force_ranking,
    brute_force_recall_at_k,
)
from ssrmap import evalkit, ssr
from ssrmap.evalkit import (
    DEFAULT_SWEEP_DIMS,
    METHODS,
    RetrievalResult,
    SweepRow,
    map_at_k,
    rank_by_cosine,
    recall_at_k,
    rows_to_csv,
    run_sweep,
)
from ssrmap.mapstore import SyntheticSpec, fit_caption_codec, generate_synthetic, split_records
from ssrmap.textcodec import encode


def small_dataset(seed=5):
    return generate_synthetic(
        SyntheticSpec(
            num_places=8,
            items_per_place=6,
            dim=32,
            head_dims=4,
            alias_start=16,
            seed=seed,
        )
    )


class TestRankByCosine:
    def test_ties_break_to_lower_index(self):
        refs = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        queries = np.array([[2.0, 0.0]])
        result = rank_by_cosine(queries, refs, np.array([0]), np.array([0, 0, 1]))
        assert result.ranking[0].tolist() == [0, 1, 2]

    def test_zero_norm_query_scores_zero_everywhere(self):
        refs = np.array([[1.0, 0.0], [0.0, 1.0]])
        result = rank_by_cosine(
            np.zeros((1, 2)), refs, np.array([0]), np.array([0, 1])
        )
        assert result.ranking[0].tolist() == [0, 1]

    def test_rankings_are_permutations(self):
        rng = np.random.default_rng(0)
        refs = rng.normal(size=(7, 4))
        queries = rng.normal(size=(3, 4))
        result = rank_by_cosine(
            queries, refs, np.zeros(3, dtype=int), np.zeros(7, dtype=int)
        )
        for row in result.ranking:
            assert sorted(row.tolist()) == list(range(7))

    def test_input_validation(self):
        refs = np.ones((2, 3))
        with pytest.raises(ValueError, match="dim"):
            rank_by_cosine(np.ones((1, 4)), refs, np.array([0]), np.array([0, 0]))
        with pytest.raises(ValueError, match="no references"):
            rank_by_cosine(np.ones((1, 3)), np.ones((0, 3)), np.array([0]), np.array([]))
        with pytest.raises(ValueError, match="query_places"):
            rank_by_cosine(np.ones((1, 3)), refs, np.array([0, 1]), np.array([0, 0]))
        with pytest.raises(ValueError, match="ref_places"):
            rank_by_cosine(np.ones((1, 3)), refs, np.array([0]), np.array([0]))


def ranked_result(relevance_rows, totals):
    rel = np.asarray(relevance_rows, dtype=bool)
    ranking = np.tile(np.arange(rel.shape[1]), (rel.shape[0], 1))
    return RetrievalResult(
        ranking=ranking, relevance=rel, positives=np.asarray(totals)
    )


class TestMetrics:
    def test_positives_at_ranks_one_and_three(self):
        result = ranked_result([[True, False, True, False]], [2])
        assert map_at_k(result, 3) == pytest.approx((1.0 + 2.0 / 3.0) / 2.0)

    def test_rank_one_hit_k_one(self):
        result = ranked_result([[True, False], [True, False]], [1, 1])
        assert map_at_k(result, 1) == 1.0

    def test_first_positive_at_rank_four(self):
        result = ranked_result([[False, False, False, True]], [1])
        assert recall_at_k(result, 3) == 0.0
        assert recall_at_k(result, 4) == 1.0

    def test_k_at_least_reference_count_recalls_everything(self):
        result = ranked_result([[False, True], [True, False]], [1, 1])
        assert recall_at_k(result, 2) == 1.0

    def test_zero_positive_query_error_names_query(self):
        result = ranked_result([[True, False], [False, False]], [1, 0])
        with pytest.raises(ValueError, match="query 1"):
            map_at_k(result, 2)
        with pytest.raises(ValueError, match="query 1"):
            recall_at_k(result, 2)

    def test_k_validation(self):
        result = ranked_result([[True]], [1])
        with pytest.raises(ValueError, match="k"):
            map_at_k(result, 0)

    def test_matches_brute_force_oracles_exhaustively(self):
        for seed in range(30):
            rng = np.random.default_rng([seed, 77])
            n_refs = int(rng.integers(2, 11))
            n_queries = int(rng.integers(1, 6))
            dim = int(rng.integers(2, 5))
            refs = rng.normal(size=(n_refs, dim))
            ref_places = rng.integers(0, 3, size=n_refs)
            query_places = np.array(
                [ref_places[rng.integers(n_refs)] for _ in range(n_queries)]
            )
            queries = rng.normal(size=(n_queries, dim))
            result = rank_by_cosine(queries, refs, query_places, ref_places)
            for k in (1, 3, n_refs):
                rel_rows = []
                for q in range(n_queries):
                    order = brute_force_ranking(refs, queries[q])
                    assert order == result.ranking[q].tolist()
                    rel_rows.append(
                        [ref_places[i] == query_places[q] for i in order]
                    )
                totals = [(ref_places == p).sum() for p in query_places]
                assert map_at_k(result, k) == brute_force_map_at_k(rel_rows, totals, k)
                assert recall_at_k(result, k) == brute_force_recall_at_k(
                    rel_rows, totals, k
                )


class TestSweep:
    def test_unknown_method_lists_valid_names(self):
        with pytest.raises(ValueError, match="ssr-fl.*text-only"):
            run_sweep(small_dataset(), methods=["warp-drive"], dims=[4])

    def test_dims_validation(self):
        with pytest.raises(ValueError, match="dims"):
            run_sweep(small_dataset(), methods=["pca-image"], dims=[])
        with pytest.raises(ValueError, match="outside"):
            run_sweep(small_dataset(), methods=["pca-image"], dims=[64])

    def test_pca_at_full_dim_matches_uncompressed_retrieval(self):
        records = small_dataset()
        rows = run_sweep(records, methods=["pca-image"], dims=[32])
        refs, queries = split_records(records)
        from ssrmap.mapstore import place_ids, stack_embeddings

        result = rank_by_cosine(
            stack_embeddings(queries),
            stack_embeddings(refs),
            place_ids(queries),
            place_ids(refs),
        )
        assert rows[0].map_at_k == pytest.approx(map_at_k(result, 5), abs=1e-12)

    def test_identical_seeds_identical_csv_bytes(self):
        records = small_dataset()
        kwargs = dict(methods=["ssr", "pca-image", "text-only"], dims=[4, 8], seeds=[0, 1])
        a = rows_to_csv(run_sweep(records, **kwargs))
        b = rows_to_csv(run_sweep(records, **kwargs))
        assert a.encode() == b.encode()

    def test_metrics_invariant_under_reference_permutation(self):
        records = small_dataset()
        refs, queries = split_records(records)
        rng = np.random.default_rng(9)
        shuffled = [refs[i] for i in rng.permutation(len(refs))] + queries
        kwargs = dict(methods=["pca-image", "ssr"], dims=[8], seeds=[0])
        rows_a = run_sweep(records, **kwargs)
        rows_b = run_sweep(shuffled, **kwargs)
        for a, b in zip(rows_a, rows_b):
            assert a.map_at_k == pytest.approx(b.map_at_k, abs=1e-12)
            assert a.recall_at_k == pytest.approx(b.recall_at_k, abs=1e-12)

    def test_text_only_one_row_per_seed_with_dims_zero(self):
        rows = run_sweep(
            small_dataset(), methods=["text-only"], dims=[4, 8], seeds=[0, 1]
        )
        assert len(rows) == 2
        assert all(row.dims == 0 for row in rows)
        assert rows[0].seed == 0 and rows[1].seed == 1

    def test_ssr_bytes_are_prefix_plus_mean_payload(self):
        records = small_dataset()
        rows = run_sweep(records, methods=["ssr"], dims=[8])
        refs, _ = split_records(records)
        codec = fit_caption_codec(records, order=3)
        payloads = [
            math.ceil(encode(codec, r.caption.encode("utf-8")).payload_bits / 8)
            for r in refs
        ]
        expected = 4.0 * 8 + float(np.mean(payloads))
        assert rows[0].bytes_per_element == pytest.approx(expected, abs=1e-12)
        pca_rows = run_sweep(records, methods=["pca-image"], dims=[8])
        assert pca_rows[0].bytes_per_element == 32.0

    def test_rows_sorted_by_method_budget_seed(self):
        rows = run_sweep(
            small_dataset(),
            methods=["pca-image", "pca-text"],
            dims=[8, 4],
            seeds=[1, 0],
        )
        key = [(r.method, r.dims, r.seed) for r in rows]
        assert key == sorted(key)

    def test_csv_schema(self):
        rows = [SweepRow("ssr", 16, 70.5, 0.5, 1.0, 0)]
        text = rows_to_csv(rows)
        lines = text.splitlines()
        assert lines[0] == "method,dims,bytes_per_element,map_at_k,recall_at_k,seed"
        assert lines[1] == "ssr,16,70.5,0.5,1.0,0"
        assert text.endswith("\n")

    def test_fraction_mode_trains_on_subset(self):
        records = small_dataset()
        full = run_sweep(records, methods=["pca-image"], dims=[8])
        frac = run_sweep(records, methods=["pca-image"], dims=[8], fraction=0.5)
        assert full[0].bytes_per_element == frac[0].bytes_per_element
        assert full[0].map_at_k != frac[0].map_at_k

    def test_hybrid_alpha_one_ranks_like_pca_coordinates(self):
        from ssrmap.baselines import pca_fit, pca_project
        from ssrmap.mapstore import place_ids, stack_embeddings

        records = small_dataset()
        refs, queries = split_records(records)
        rows = run_sweep(records, methods=["pca-image+zip-text"], dims=[8], alpha=1.0)
        model = pca_fit(stack_embeddings(refs), 8)
        coords = rank_by_cosine(
            pca_project(model, stack_embeddings(queries)),
            pca_project(model, stack_embeddings(refs)),
            place_ids(queries),
            place_ids(refs),
        )
        assert rows[0].map_at_k == pytest.approx(map_at_k(coords, 5), abs=1e-12)
        assert rows[0].recall_at_k == pytest.approx(recall_at_k(coords, 5), abs=1e-12)

    def test_every_method_runs(self):
        rows = run_sweep(small_dataset(), methods=METHODS, dims=[4])
        by_method = {r.method for r in rows}
        assert by_method == set(METHODS)
        for row in rows:
            assert 0.0 <= row.map_at_k <= 1.0
            assert 0.0 <= row.recall_at_k <= 1.0
            assert row.bytes_per_element > 0

    def test_sweep_row_validation(self):
        with pytest.raises(ValueError, match="bytes"):
            SweepRow("ssr", 4, 0.0, 0.5, 0.5, 0)
        with pytest.raises(ValueError, match="metric"):
            SweepRow("ssr", 4, 16.0, 1.5, 0.5, 0)

    def test_default_dims_cover_nested_training_set(self):
        assert DEFAULT_SWEEP_DIMS == tuple(ssr.default_nested_dims(256))
