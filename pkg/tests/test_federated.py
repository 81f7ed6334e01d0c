"""Tests for federated training: partitioning, averaging, reduction to
centralized training."""

from __future__ import annotations

import numpy as np
import pytest

from ssrmap import federated as fed
from ssrmap import ssr


def make_data(n: int, d: int, t: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, d)), rng.normal(size=(n, t))


def clustered_data(seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Grouped embeddings with group-correlated texts, so the replication
    loss has structure worth learning."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(6, 12)) * 2.0
    text_centers = rng.normal(size=(6, 8))
    images, texts = [], []
    for g in range(6):
        for _ in range(8):
            images.append(centers[g] + rng.normal(size=12) * 0.2)
            texts.append(text_centers[g] + rng.normal(size=8) * 0.2)
    return np.asarray(images), np.asarray(texts)


class TestPartition:
    def test_even_split(self):
        parts = fed.partition_indices(8, fed.FedConfig(nodes=4))
        assert [p.size for p in parts] == [2, 2, 2, 2]

    def test_single_node_is_full_range(self):
        parts = fed.partition_indices(10, fed.FedConfig(nodes=1))
        assert len(parts) == 1
        np.testing.assert_array_equal(parts[0], np.arange(10))

    def test_disjoint_cover_and_balance(self):
        for n, nodes, mode in [(10, 4, "iid"), (17, 5, "contiguous"), (7, 7, "iid")]:
            parts = fed.partition_indices(n, fed.FedConfig(nodes=nodes, partition=mode))
            merged = np.concatenate(parts)
            assert sorted(merged.tolist()) == list(range(n))
            sizes = [p.size for p in parts]
            assert max(sizes) - min(sizes) <= 1
            for p in parts:
                assert np.all(np.diff(p) > 0)

    def test_deterministic(self):
        cfg = fed.FedConfig(nodes=3, seed=9)
        a = fed.partition_indices(20, cfg)
        b = fed.partition_indices(20, cfg)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_too_few_elements(self):
        with pytest.raises(ValueError, match="split"):
            fed.partition_indices(3, fed.FedConfig(nodes=4))

    def test_bad_mode_rejected(self):
        with pytest.raises(ValueError, match="partition mode"):
            fed.FedConfig(partition="striped")


class TestAverage:
    def test_identical_inputs(self):
        v = np.array([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(fed.fed_average([v, v, v]), v)

    def test_arithmetic(self):
        out = fed.fed_average([np.array([0.0, 2.0]), np.array([2.0, 0.0])])
        np.testing.assert_array_equal(out, [1.0, 1.0])

    def test_single_is_identity(self):
        v = np.array([4.0, -1.0])
        np.testing.assert_array_equal(fed.fed_average([v]), v)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(3)
        vs = [rng.normal(size=6) for _ in range(4)]
        np.testing.assert_allclose(
            fed.fed_average(vs), fed.fed_average(vs[::-1]), rtol=0, atol=1e-15
        )

    def test_weighted(self):
        out = fed.fed_average([np.array([0.0]), np.array([4.0])], weights=[3, 1])
        np.testing.assert_array_equal(out, [1.0])

    def test_validation(self):
        with pytest.raises(ValueError, match="average"):
            fed.fed_average([])
        with pytest.raises(ValueError, match="lengths"):
            fed.fed_average([np.zeros(3), np.zeros(4)])
        with pytest.raises(ValueError, match="weight"):
            fed.fed_average([np.zeros(3), np.zeros(3)], weights=[1])


class TestLocalRound:
    def test_zero_epochs_returns_shared_params(self):
        images, texts = make_data(12, 5, 4)
        cfg = ssr.SsrConfig(nested_dims=(2, 5), batch_size=4, seed=1)
        shared = ssr.create_model(5, cfg).net.get_params() + 0.5
        params, report = fed.local_round(
            shared, images, texts, np.arange(12), cfg,
            node_id=0, round_index=0, local_epochs=0,
        )
        np.testing.assert_array_equal(params, shared)
        assert report.epoch_losses == []

    def test_loss_decreases_on_structured_data(self):
        images, texts = clustered_data()
        cfg = ssr.SsrConfig(
            nested_dims=(4, 12), batch_size=16, seed=2, learning_rate=1e-2
        )
        shared = ssr.create_model(12, cfg).net.get_params()
        _, report = fed.local_round(
            shared, images, texts, np.arange(images.shape[0]), cfg,
            node_id=0, round_index=0, local_epochs=4,
        )
        assert report.epoch_losses[-1] < report.epoch_losses[0]

    def test_empty_node_rejected(self):
        images, texts = make_data(6, 4, 3)
        cfg = ssr.SsrConfig(nested_dims=(2,))
        with pytest.raises(ValueError, match="no data"):
            fed.local_round(
                np.zeros(20), images, texts, np.array([], dtype=int), cfg,
                node_id=3, round_index=0, local_epochs=1,
            )


class TestFedTrain:
    def test_single_node_single_round_matches_centralized(self):
        images, texts = make_data(30, 6, 4, seed=8)
        scfg = ssr.SsrConfig(nested_dims=(2, 6), batch_size=8, seed=5)
        fcfg = fed.FedConfig(nodes=1, rounds=1, local_epochs=3, seed=77)
        fed_model, report = fed.fed_train(images, texts, fcfg, scfg)
        central = ssr.create_model(6, scfg)
        ssr.train(central, images, texts, epochs=3)
        np.testing.assert_array_equal(
            fed_model.net.get_params(), central.net.get_params()
        )
        assert len(report.round_losses) == 1

    def test_single_node_multi_round_matches_segmented_centralized(self):
        # Adam restarts at round boundaries; the centralized twin is the
        # same schedule run as two back-to-back train calls.
        images, texts = make_data(24, 5, 3, seed=9)
        scfg = ssr.SsrConfig(nested_dims=(2, 5), batch_size=6, seed=3)
        fcfg = fed.FedConfig(nodes=1, rounds=2, local_epochs=2)
        fed_model, _ = fed.fed_train(images, texts, fcfg, scfg)
        central = ssr.create_model(5, scfg)
        ssr.train(central, images, texts, epochs=2, epoch_offset=0)
        ssr.train(central, images, texts, epochs=2, epoch_offset=2)
        np.testing.assert_array_equal(
            fed_model.net.get_params(), central.net.get_params()
        )

    def test_zero_rounds_returns_initialized_model(self):
        images, texts = make_data(12, 4, 3)
        scfg = ssr.SsrConfig(nested_dims=(2, 4), seed=6)
        fcfg = fed.FedConfig(nodes=2, rounds=0)
        model, report = fed.fed_train(images, texts, fcfg, scfg)
        fresh = ssr.create_model(4, scfg)
        np.testing.assert_array_equal(model.net.get_params(), fresh.net.get_params())
        assert report.round_losses == []

    def test_four_nodes_deterministic(self):
        images, texts = clustered_data(seed=4)
        scfg = ssr.SsrConfig(nested_dims=(4, 12), batch_size=8, seed=1)
        fcfg = fed.FedConfig(nodes=4, rounds=2, local_epochs=1, seed=2)
        model_a, report_a = fed.fed_train(images, texts, fcfg, scfg)
        model_b, report_b = fed.fed_train(images, texts, fcfg, scfg)
        np.testing.assert_array_equal(
            model_a.net.get_params(), model_b.net.get_params()
        )
        assert report_a.round_losses == report_b.round_losses
        assert sum(report_a.node_sizes) == images.shape[0]

    def test_weighted_mode_changes_result_on_uneven_split(self):
        images, texts = make_data(10, 4, 3, seed=5)
        scfg = ssr.SsrConfig(nested_dims=(2, 4), batch_size=4, seed=1, learning_rate=1e-2)
        base = fed.FedConfig(nodes=4, rounds=1, local_epochs=1, seed=3)
        model_u, _ = fed.fed_train(images, texts, base, scfg)
        weighted_cfg = fed.FedConfig(nodes=4, rounds=1, local_epochs=1, seed=3, weighted=True)
        model_w, _ = fed.fed_train(images, texts, weighted_cfg, scfg)
        assert not np.array_equal(model_u.net.get_params(), model_w.net.get_params())
