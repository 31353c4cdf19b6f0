"""Tests for keyword splits, episode sampling, and fixed test suites."""

import functools

import numpy as np
import pytest

from metakws.episodes import (
    Episode,
    SamplerConfig,
    SamplingError,
    SILENCE_CLASS,
    TEST_PHASE,
    TRAIN_PHASE,
    UNKNOWN_CLASS,
    build_splits,
    fixed_test_suite,
    load_split,
    load_suite,
    resample_support,
    sample_episode,
    save_split,
    save_suite,
)
from metakws.features import SILENCE_LABEL, SynthConfig, generate_synthetic


@functools.lru_cache(maxsize=None)
def _dataset():
    return generate_synthetic(SynthConfig(
        num_keywords=35, utterances_per_keyword=20, noise_classes=4, seed=42))


@functools.lru_cache(maxsize=None)
def _split():
    return build_splits(_dataset(), seed=5)


class TestBuildSplits:
    def test_partition_sizes(self):
        split = _split()
        assert len(split.unknown_keywords) == 5
        assert len(split.meta_train_keywords) == 20
        assert len(split.meta_test_keywords) == 10

    def test_keyword_sets_disjoint(self):
        """Exhaustive pairwise intersection of the three keyword sets is empty."""
        split = _split()
        groups = [set(split.meta_train_keywords), set(split.meta_test_keywords),
                  set(split.unknown_keywords)]
        for i in range(3):
            for j in range(i + 1, 3):
                assert groups[i] & groups[j] == set()

    def test_same_seed_identical(self):
        assert build_splits(_dataset(), seed=5) == build_splits(_dataset(), seed=5)

    def test_different_seed_differs(self):
        assert build_splits(_dataset(), seed=5) != build_splits(_dataset(), seed=6)

    def test_phase_utterance_pools_disjoint(self):
        split = _split()
        for kw in (*split.meta_train_keywords, *split.meta_test_keywords,
                   *split.unknown_keywords):
            train = set(split.train_utterances[kw])
            test = set(split.test_utterances[kw])
            assert train & test == set()
            assert len(train) + len(test) == 20

    def test_noise_pools_disjoint_and_cover(self):
        split = _split()
        train, test = set(split.train_noise_pool), set(split.test_noise_pool)
        assert train & test == set()
        assert len(train) + len(test) == len(_dataset().ids_for_label(SILENCE_LABEL))

    def test_too_few_keywords_rejected(self):
        small = generate_synthetic(SynthConfig(
            num_keywords=10, utterances_per_keyword=4, noise_classes=1, seed=0))
        with pytest.raises(ValueError, match="35"):
            build_splits(small, seed=0)

    def test_round_trip_through_file(self, tmp_path):
        path = tmp_path / "split.json"
        save_split(_split(), path)
        assert load_split(path) == _split()


class TestSampleEpisode:
    def test_counts_five_shot(self):
        cfg = SamplerConfig(n_way=12, k_shot=5, q_per_class=5)
        ep = sample_episode(_split(), TRAIN_PHASE, cfg, np.random.default_rng(0))
        assert len(ep.support) == 60
        assert len(ep.query) == 60
        assert ep.n_way == 12

    def test_counts_one_shot(self):
        cfg = SamplerConfig(n_way=12, k_shot=1, q_per_class=5)
        ep = sample_episode(_split(), TEST_PHASE, cfg, np.random.default_rng(1))
        assert len(ep.support) == 12

    def test_class_structure_and_disjointness(self):
        """Per-class counts are exact and support never overlaps query."""
        cfg = SamplerConfig(n_way=12, k_shot=5, q_per_class=5)
        rng = np.random.default_rng(7)
        for _ in range(25):
            ep = sample_episode(_split(), TRAIN_PHASE, cfg, rng)
            for cls in range(12):
                assert sum(c == cls for _, c in ep.support) == 5
                assert sum(c == cls for _, c in ep.query) == 5
            assert set(ep.support_ids()) & set(ep.query_ids()) == set()
            assert len(ep.class_map) == 12
            assert UNKNOWN_CLASS in ep.class_map and SILENCE_CLASS in ep.class_map

    def test_class_sources_respected(self):
        """Unknown draws only from unknown keywords, silence only from noise."""
        split = _split()
        ds = _dataset()
        cfg = SamplerConfig(n_way=12, k_shot=5, q_per_class=5)
        rng = np.random.default_rng(3)
        unknown_set = set(split.unknown_keywords)
        for _ in range(10):
            ep = sample_episode(split, TRAIN_PHASE, cfg, rng)
            for utt, cls in (*ep.support, *ep.query):
                semantic = ep.class_map[cls]
                true_label = ds.by_id[utt].label
                if semantic == UNKNOWN_CLASS:
                    assert true_label in unknown_set
                elif semantic == SILENCE_CLASS:
                    assert true_label == SILENCE_LABEL
                else:
                    assert true_label == semantic

    def test_phase_isolation(self):
        """Train episodes never borrow meta-test utterance ids, and vice versa."""
        split = _split()
        train_ids = set(split.train_noise_pool)
        test_ids = set(split.test_noise_pool)
        for kw, ids in split.train_utterances.items():
            train_ids.update(ids)
        for kw, ids in split.test_utterances.items():
            test_ids.update(ids)
        cfg = SamplerConfig(n_way=12, k_shot=3, q_per_class=3)
        rng = np.random.default_rng(9)
        for phase, allowed in ((TRAIN_PHASE, train_ids), (TEST_PHASE, test_ids)):
            for _ in range(10):
                ep = sample_episode(split, phase, cfg, rng)
                used = set(ep.support_ids()) | set(ep.query_ids())
                assert used <= allowed

    def test_test_phase_uses_all_ten_keywords(self):
        split = _split()
        cfg = SamplerConfig(n_way=12, k_shot=2, q_per_class=2)
        ep = sample_episode(split, TEST_PHASE, cfg, np.random.default_rng(4))
        keywords = {lab for lab in ep.class_map
                    if lab not in (UNKNOWN_CLASS, SILENCE_CLASS)}
        assert keywords == set(split.meta_test_keywords)

    def test_class_indices_shuffled_across_episodes(self):
        split = _split()
        cfg = SamplerConfig(n_way=12, k_shot=1, q_per_class=1)
        rng = np.random.default_rng(12)
        positions = {sample_episode(split, TRAIN_PHASE, cfg, rng)
                     .class_map.index(SILENCE_CLASS) for _ in range(40)}
        assert len(positions) > 3

    def test_exact_pool_saturation(self):
        """A class pool of exactly K+Q utterances is used completely, once."""
        ds = generate_synthetic(SynthConfig(
            num_keywords=35, utterances_per_keyword=8, noise_classes=4, seed=2))
        split = build_splits(ds, seed=1)
        cfg = SamplerConfig(n_way=12, k_shot=2, q_per_class=2)
        rng = np.random.default_rng(0)
        for _ in range(5):
            ep = sample_episode(split, TRAIN_PHASE, cfg, rng)
            for cls, label in enumerate(ep.class_map):
                if label in (UNKNOWN_CLASS, SILENCE_CLASS):
                    continue
                pool = set(split.train_utterances[label])
                used = [u for u, c in (*ep.support, *ep.query) if c == cls]
                assert len(used) == len(set(used)) == 4
                assert set(used) == pool

    def test_insufficient_pool_names_class(self):
        ds = generate_synthetic(SynthConfig(
            num_keywords=35, utterances_per_keyword=4, noise_classes=4, seed=2))
        split = build_splits(ds, seed=1)
        cfg = SamplerConfig(n_way=12, k_shot=5, q_per_class=5)
        with pytest.raises(SamplingError, match="kw"):
            sample_episode(split, TRAIN_PHASE, cfg, np.random.default_rng(0))

    def test_episode_validation_rejects_overlap(self):
        with pytest.raises(ValueError, match="share"):
            Episode(support=(("a", 0), ("b", 1)),
                    query=(("a", 0), ("c", 1)),
                    class_map=("x", "y"), k_shot=1, q_per_class=1)


class TestFixedSuite:
    def test_task_count(self):
        cfg = SamplerConfig(n_way=12, k_shot=5, q_per_class=5)
        suite = fixed_test_suite(_split(), 20, cfg, seed=11)
        assert len(suite) == 20

    def test_same_seed_identical(self):
        cfg = SamplerConfig(n_way=12, k_shot=2, q_per_class=2)
        a = fixed_test_suite(_split(), 8, cfg, seed=11)
        b = fixed_test_suite(_split(), 8, cfg, seed=11)
        assert a == b

    def test_different_seeds_differ(self):
        cfg = SamplerConfig(n_way=12, k_shot=2, q_per_class=2)
        a = fixed_test_suite(_split(), 8, cfg, seed=1)
        b = fixed_test_suite(_split(), 8, cfg, seed=2)
        assert a != b

    def test_suite_file_round_trip(self, tmp_path):
        cfg = SamplerConfig(n_way=12, k_shot=2, q_per_class=3)
        suite = fixed_test_suite(_split(), 6, cfg, seed=8)
        path = tmp_path / "suite.txt"
        save_suite(suite, path)
        assert load_suite(path) == suite

    def test_suite_file_bytes_deterministic(self, tmp_path):
        cfg = SamplerConfig(n_way=12, k_shot=2, q_per_class=2)
        a, b = tmp_path / "a.txt", tmp_path / "b.txt"
        save_suite(fixed_test_suite(_split(), 5, cfg, seed=3), a)
        save_suite(fixed_test_suite(_split(), 5, cfg, seed=3), b)
        assert a.read_bytes() == b.read_bytes()

    def test_header_task_count_enforced(self, tmp_path):
        cfg = SamplerConfig(n_way=12, k_shot=1, q_per_class=1)
        suite = fixed_test_suite(_split(), 3, cfg, seed=3)
        path = tmp_path / "suite.txt"
        save_suite(suite, path)
        text = path.read_text().splitlines()
        path.write_text("\n".join([text[0]] + text[1:-1]) + "\n")
        from metakws.features import DatasetFormatError
        with pytest.raises(DatasetFormatError, match="tasks"):
            load_suite(path)

    def test_resample_support_keeps_queries(self):
        cfg = SamplerConfig(n_way=12, k_shot=2, q_per_class=2)
        split = _split()
        ep = fixed_test_suite(split, 1, cfg, seed=5)[0]
        redrawn = resample_support(ep, split, TEST_PHASE, np.random.default_rng(1))
        assert redrawn.query == ep.query
        assert redrawn.class_map == ep.class_map
        assert set(redrawn.support_ids()) & set(redrawn.query_ids()) == set()
