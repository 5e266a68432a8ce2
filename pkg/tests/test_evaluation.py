"""Verification, retrieval, and matching metrics plus report emission."""

import numpy as np
import pytest

from apdesc.data import PatchDataset, SyntheticConfig, generate_synthetic
from apdesc.errors import UndefinedMetricError
from apdesc.evaluation import (
    EvalReport,
    RetrievalProtocol,
    build_retrieval_protocol,
    fpr95,
    make_verification_set,
    matching_pr_map,
    mutual_nn_match,
    retrieval_map,
    verification_ap,
    write_report,
)
from apdesc.models import binarize
from apdesc.ranking import exact_ap


class TestFpr95:
    def test_perfect_separation_gives_zero(self):
        d = np.array([0.1, 0.2, 0.3, 5.0, 6.0, 7.0])
        y = np.array([1, 1, 1, 0, 0, 0], dtype=bool)
        assert fpr95(d, y) == 0.0

    def test_identical_distributions_give_one(self):
        d = np.array([1.0, 2.0, 3.0, 1.0, 2.0, 3.0])
        y = np.array([1, 1, 1, 0, 0, 0], dtype=bool)
        assert fpr95(d, y) == 1.0

    def test_constructed_twenty_percent(self):
        pos = np.arange(1.0, 21.0)
        neg = np.concatenate([np.full(4, 10.0), np.full(16, 30.0)])
        d = np.concatenate([pos, neg])
        y = np.concatenate([np.ones(20, bool), np.zeros(20, bool)])
        assert fpr95(d, y) == pytest.approx(0.2)

    def test_threshold_is_nearest_rank_with_ceiling(self):
        pos = np.arange(1.0, 11.0)
        neg = np.array([10.0, 10.5])
        d = np.concatenate([pos, neg])
        y = np.concatenate([np.ones(10, bool), np.zeros(2, bool)])
        # ceil(0.95 * 10) = 10, so the threshold is the largest match
        assert fpr95(d, y) == pytest.approx(0.5)

    def test_monotone_transforms_change_nothing(self):
        rng = np.random.default_rng(0)
        d = rng.uniform(0.1, 4.0, size=200)
        y = rng.uniform(size=200) < 0.4
        base = fpr95(d, y)
        assert fpr95(np.exp(d), y) == base
        assert fpr95(10.0 * d + 3.0, y) == base

    def test_single_class_is_undefined(self):
        with pytest.raises(UndefinedMetricError):
            fpr95(np.array([1.0, 2.0]), np.array([True, True]))


class TestVerificationAP:
    def test_perfect_ranking(self):
        d = np.array([0.1, 0.2, 3.0, 4.0])
        y = np.array([1, 1, 0, 0], dtype=bool)
        assert verification_ap(d, y) == 1.0

    def test_matches_exact_ap_on_the_induced_ranking(self):
        rng = np.random.default_rng(5)
        d = rng.uniform(size=50)
        y = rng.uniform(size=50) < 0.3
        order = np.lexsort((np.arange(50), d))
        assert verification_ap(d, y) == exact_ap(y[order].astype(int))

    def test_random_scores_approach_the_positive_fraction(self):
        rng = np.random.default_rng(11)
        d = rng.uniform(size=5000)
        y = rng.uniform(size=5000) < 0.25
        assert abs(verification_ap(d, y) - y.mean()) < 0.04

    def test_ties_break_toward_the_lower_index(self):
        d = np.zeros(3)
        y = np.array([0, 1, 1], dtype=bool)
        assert verification_ap(d, y) == exact_ap([0, 1, 1])

    def test_monotone_transforms_change_nothing(self):
        rng = np.random.default_rng(2)
        d = rng.uniform(0.1, 2.0, size=80)
        y = rng.uniform(size=80) < 0.5
        assert verification_ap(d**3, y) == verification_ap(d, y)


class TestVerificationSet:
    def test_pairs_are_balanced_and_respect_groups(self):
        ds = generate_synthetic(SyntheticConfig(sequences=2, groups_per_sequence=4, group_size=3))
        left, right, labels = make_verification_set(ds, 50, seed=1)
        assert labels.sum() == 50 and (~labels).sum() == 50
        for l, r, y in zip(left, right, labels):
            assert (ds.group_ids[l] == ds.group_ids[r]) == y
            assert l != r or not y

    def test_sampling_is_seeded(self):
        ds = generate_synthetic(SyntheticConfig(sequences=1, groups_per_sequence=4, group_size=3))
        a = make_verification_set(ds, 20, seed=9)
        b = make_verification_set(ds, 20, seed=9)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_all_singletons_is_an_error(self):
        ds = PatchDataset(np.zeros((3, 4, 4)), [0, 1, 2], [0, 0, 0], ("s",))
        with pytest.raises(ValueError, match="two members"):
            make_verification_set(ds, 5)


def grouped_embeddings(n_groups, views, dim, noise, seed=0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_groups, dim))
    emb = np.repeat(centers, views, axis=0) + noise * rng.normal(size=(n_groups * views, dim))
    return emb


def simple_dataset(n_groups=4, views=3, sequences=2):
    per_seq = n_groups // sequences
    groups = np.repeat(np.arange(n_groups), views)
    seqs = np.repeat(np.arange(n_groups) // per_seq, views)
    pixels = np.zeros((n_groups * views, 4, 4))
    return PatchDataset(pixels, groups, seqs, tuple(f"s{i}" for i in range(sequences)))


class TestRetrieval:
    def test_collapsed_groups_rank_perfectly(self):
        ds = simple_dataset()
        emb = grouped_embeddings(4, 3, 8, noise=0.0)
        report = retrieval_map(build_retrieval_protocol(ds, "all"), emb)
        assert report.metrics["map"] == pytest.approx(1.0)
        assert report.per_query_ap.shape == (12,)

    def test_rigid_motions_of_the_embedding_change_nothing(self):
        ds = simple_dataset()
        emb = grouped_embeddings(4, 3, 8, noise=0.5, seed=3)
        protocol = build_retrieval_protocol(ds, "all")
        base = retrieval_map(protocol, emb).per_query_ap
        q, _ = np.linalg.qr(np.random.default_rng(1).normal(size=(8, 8)))
        rotated = emb @ q + 7.0
        assert np.array_equal(retrieval_map(protocol, rotated).per_query_ap, base)

    def test_policies_select_different_candidate_pools(self):
        ds = simple_dataset(n_groups=4, views=2, sequences=2)
        emb = np.zeros((8, 2))
        emb[:, 0] = [0.0, 0.1, 5.0, 5.1, 0.2, 0.3, 9.0, 9.1]
        all_ap = retrieval_map(build_retrieval_protocol(ds, "all"), emb).per_query_ap
        easy = retrieval_map(build_retrieval_protocol(ds, "out_of_sequence"), emb).per_query_ap
        hard = retrieval_map(build_retrieval_protocol(ds, "in_sequence"), emb).per_query_ap
        # query 0's nuisance neighbors (groups 0 and 2) live in its own
        # sequence, so dropping in-sequence distractors can only help
        assert easy[0] >= all_ap[0]
        assert hard[0] <= easy[0]

    def test_shared_texture_makes_in_sequence_retrieval_harder(self):
        ds = generate_synthetic(
            SyntheticConfig(sequences=3, groups_per_sequence=8, group_size=3,
                            sequence_similarity=0.7, seed=6)
        )
        emb = ds.pixels.reshape(len(ds), -1)
        hard = retrieval_map(build_retrieval_protocol(ds, "in_sequence"), emb)
        easy = retrieval_map(build_retrieval_protocol(ds, "out_of_sequence"), emb)
        assert hard.metrics["map"] < easy.metrics["map"]

    def test_matchless_query_is_rejected_at_construction(self):
        ds = PatchDataset(np.zeros((3, 4, 4)), [0, 0, 1], [0, 0, 0], ("s",))
        with pytest.raises(ValueError, match="match"):
            RetrievalProtocol(ds, np.array([2]))
        protocol = build_retrieval_protocol(ds)
        assert protocol.query_indices.tolist() == [0, 1]

    def test_unknown_policy_is_rejected(self):
        ds = simple_dataset()
        with pytest.raises(ValueError, match="policy"):
            build_retrieval_protocol(ds, "nearest")

    def test_embedding_count_must_match(self):
        ds = simple_dataset()
        with pytest.raises(ValueError, match="one embedding"):
            retrieval_map(build_retrieval_protocol(ds), np.zeros((5, 3)))

    def test_binary_codes_rank_like_their_hamming_distances(self):
        ds = simple_dataset(n_groups=4, views=3)
        raw = grouped_embeddings(4, 3, 16, noise=0.8, seed=4)
        codes = binarize(np.tanh(raw))
        report = retrieval_map(build_retrieval_protocol(ds, "all"), codes)
        length = codes.shape[1]
        aps = []
        for q in range(len(ds)):
            others = [i for i in range(len(ds)) if i != q]
            ham = np.array([(length - codes[i] @ codes[q]) / 2.0 for i in others])
            order = np.lexsort((others, ham))
            rel = (ds.group_ids[np.asarray(others)[order]] == ds.group_ids[q]).astype(int)
            aps.append(exact_ap(rel))
        assert report.per_query_ap == pytest.approx(np.asarray(aps))


class TestMutualNN:
    def test_permutation_is_recovered(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(9, 5))
        perm = rng.permutation(9)
        matches = mutual_nn_match(a, a[perm])
        assert len(matches) == 9
        for i, j, dist in matches:
            assert perm[j] == i
            assert dist == pytest.approx(0.0, abs=1e-12)

    def test_one_sided_nearest_is_not_a_match(self):
        a = np.array([[0.0], [2.0]])
        b = np.array([[0.4]])
        matches = mutual_nn_match(a, b)
        assert matches == [(0, 0, pytest.approx(0.4))]

    def test_ties_resolve_to_the_lowest_index(self):
        a = np.array([[1.0, 0.0], [1.0, 0.0]])
        b = np.array([[1.0, 0.0]])
        matches = mutual_nn_match(a, b)
        assert [(i, j) for i, j, _ in matches] == [(0, 0)]

    def test_width_mismatch_is_rejected(self):
        with pytest.raises(ValueError, match="width"):
            mutual_nn_match(np.zeros((2, 3)), np.zeros((2, 4)))


class TestMatchingPR:
    def test_all_correct_matches_score_one(self):
        matches = [(0, 0, 0.1), (1, 1, 0.2), (2, 2, 0.3)]
        gt = {(0, 0), (1, 1), (2, 2)}
        report = matching_pr_map(matches, gt)
        assert report.metrics["pr_auc"] == pytest.approx(1.0)

    def test_all_wrong_matches_score_zero(self):
        matches = [(0, 1, 0.1), (1, 0, 0.2)]
        report = matching_pr_map(matches, {(0, 0), (1, 1)})
        assert report.metrics["pr_auc"] == pytest.approx(0.0)

    def test_interleaved_ranking_matches_the_trapezoid_by_hand(self):
        matches = [(0, 0, 0.1), (5, 9, 0.2), (1, 1, 0.3)]
        gt = {(0, 0), (1, 1)}
        report = matching_pr_map(matches, gt)
        # anchored curve (0,1) -> (.5,1) -> (.5,.5) -> (1,2/3)
        expected = 0.5 * 1.0 + 0.5 * (0.5 + 2.0 / 3.0) / 2.0
        assert report.metrics["pr_auc"] == pytest.approx(expected)
        assert report.pr_curve == pytest.approx(
            np.array([[0.5, 1.0], [0.5, 0.5], [1.0, 2.0 / 3.0]])
        )

    def test_missing_correspondences_cap_recall(self):
        matches = [(0, 0, 0.1), (1, 1, 0.3)]
        gt = {(0, 0), (1, 1)}
        full = matching_pr_map(matches, gt).metrics["pr_auc"]
        capped = matching_pr_map(matches, gt, n_gt=4).metrics["pr_auc"]
        assert capped == pytest.approx(full / 2.0)

    def test_input_order_does_not_matter(self):
        matches = [(1, 1, 0.3), (0, 0, 0.1), (5, 9, 0.2)]
        gt = {(0, 0), (1, 1)}
        shuffled = matching_pr_map(matches, gt).metrics["pr_auc"]
        assert shuffled == pytest.approx(0.5 + 0.5 * (0.5 + 2.0 / 3.0) / 2.0)

    def test_no_matches_is_zero_and_no_ground_truth_is_undefined(self):
        assert matching_pr_map([], {(0, 0)}).metrics["pr_auc"] == 0.0
        with pytest.raises(UndefinedMetricError):
            matching_pr_map([(0, 0, 0.1)], set())


class TestWriteReport:
    def test_report_text_lists_metrics_and_config(self, tmp_path):
        report = EvalReport(
            task="retrieval",
            metrics={"map": 0.875},
            per_query_ap=np.array([1.0, 0.75]),
            config={"distractors": "all"},
        )
        files = write_report(report, tmp_path / "out")
        text = (tmp_path / "out" / "report.txt").read_text()
        assert "task = retrieval" in text
        assert "metric.map = 0.875000" in text
        assert "config.distractors = all" in text
        assert "queries = 2" in text
        assert len(files) == 1

    def test_curve_goes_to_csv(self, tmp_path):
        report = EvalReport(
            task="matching",
            metrics={"pr_auc": 0.5},
            pr_curve=np.array([[0.5, 1.0], [1.0, 0.5]]),
        )
        files = write_report(report, tmp_path)
        lines = (tmp_path / "pr.csv").read_text().strip().splitlines()
        assert lines[0] == "recall,precision"
        assert lines[1].startswith("0.5")
        assert len(files) == 2
