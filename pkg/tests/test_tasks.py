"""Tests for ingestion, preprocessing, labeling, and synthetic episodes.

Small corpora are written into tmp_path in the `::` format so every pipeline
stage can be exercised against hand-countable expectations.
"""

import os

import numpy as np
import pytest

from metarec.datagen import generate_corpus
from metarec.errors import ConfigError, DataError
from metarec.tasks import (
    DatasetSplits,
    PreprocessConfig,
    UserProfile,
    classify_major_minor,
    load_movielens,
    preprocess,
    synth_two_group,
    synthetic_splits,
)


def write(path, lines):
    with open(path, "w", encoding="latin-1") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def corpus_paths(tmp_path, users, movies, ratings):
    up, mp, rp = tmp_path / "users.dat", tmp_path / "movies.dat", tmp_path / "ratings.dat"
    write(up, users)
    write(mp, movies)
    write(rp, ratings)
    return str(rp), str(up), str(mp)


def simple_corpus(tmp_path, n_users=12, items_per_user=6, n_movies=8):
    users = [f"{u}::{'M' if u % 2 else 'F'}::{25 + u}::{u % 5}::{10000 + u}"
             for u in range(1, n_users + 1)]
    movies = [f"{m}::Feature {m} (1990)::Drama|Comedy" for m in range(1, n_movies + 1)]
    ratings = []
    stamp = 978300000
    for u in range(1, n_users + 1):
        for j in range(items_per_user):
            m = (u + j) % n_movies + 1
            ratings.append(f"{u}::{m}::{(u + j) % 5 + 1}::{stamp + u * 100 + j}")
    return corpus_paths(tmp_path, users, movies, ratings)


class TestLoader:
    def test_user_line_fields(self, tmp_path):
        paths = corpus_paths(
            tmp_path,
            users=["1::F::1::10::48067"],
            movies=["1::Feature 1 (1995)::Animation|Comedy"],
            ratings=["1::1::5::978300760", "1::1::4::978300761"],
        )
        raw = load_movielens(*paths)
        assert raw.users[1] == {"gender": "F", "age": 1, "occupation": 10, "zipcode": "48067"}
        assert raw.movies[1] == ("Animation|Comedy",)
        assert raw.ratings[0] == (1, 1, 5.0, 978300760)

    def test_empty_ratings_file_rejected(self, tmp_path):
        paths = corpus_paths(
            tmp_path,
            users=["1::F::25::10::48067"],
            movies=["1::Feature 1 (1995)::Drama"],
            ratings=[],
        )
        with pytest.raises(DataError):
            load_movielens(*paths)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(DataError):
            load_movielens(str(tmp_path / "nope.dat"), str(tmp_path / "nope2.dat"),
                           str(tmp_path / "nope3.dat"))

    def test_malformed_lines_skipped_within_budget(self, tmp_path):
        ratings = [f"1::1::5::{978300000 + i}" for i in range(200)]
        ratings.append("garbage line")
        paths = corpus_paths(
            tmp_path,
            users=["1::F::25::10::48067"],
            movies=["1::Feature 1 (1995)::Drama"],
            ratings=ratings,
        )
        with pytest.warns(UserWarning, match="skipped"):
            raw = load_movielens(*paths)
        assert raw.skipped_lines == 1
        assert len(raw.ratings) == 200

    def test_too_many_malformed_lines_rejected(self, tmp_path):
        ratings = [f"1::1::5::{978300000 + i}" for i in range(50)]
        ratings.extend(["junk"] * 5)
        paths = corpus_paths(
            tmp_path,
            users=["1::F::25::10::48067"],
            movies=["1::Feature 1 (1995)::Drama"],
            ratings=ratings,
        )
        with pytest.raises(DataError, match="1%"):
            load_movielens(*paths)

    def test_dangling_references_count_as_skipped(self, tmp_path):
        ratings = [f"1::1::5::{978300000 + i}" for i in range(300)]
        ratings.append("9::1::5::978300999")   # unknown user
        ratings.append("1::9::5::978300998")   # unknown movie
        paths = corpus_paths(
            tmp_path,
            users=["1::F::25::10::48067"],
            movies=["1::Feature 1 (1995)::Drama"],
            ratings=ratings,
        )
        with pytest.warns(UserWarning):
            raw = load_movielens(*paths)
        assert raw.skipped_lines == 2

    def test_out_of_range_rating_skipped(self, tmp_path):
        ratings = [f"1::1::3::{978300000 + i}" for i in range(300)] + ["1::1::9::978301000"]
        paths = corpus_paths(
            tmp_path,
            users=["1::F::25::10::48067"],
            movies=["1::Feature 1 (1995)::Drama"],
            ratings=ratings,
        )
        with pytest.warns(UserWarning):
            raw = load_movielens(*paths)
        assert len(raw.ratings) == 300


class TestPreprocess:
    def test_cold_start_keeps_least_active_users(self, tmp_path):
        # log counts 3..12: the cold-start stage keeps the eight users with
        # the fewest logs and drops the two most active ones
        users = [f"{u}::M::30::1::55{u:03d}" for u in range(1, 11)]
        movies = [f"{m}::Feature {m} (1990)::Drama" for m in range(1, 13)]
        ratings = []
        for u in range(1, 11):
            for j in range(u + 2):
                ratings.append(f"{u}::{j + 1}::4::{978300000 + u * 50 + j}")
        raw = load_movielens(*corpus_paths(tmp_path, users, movies, ratings))
        splits = preprocess(raw, PreprocessConfig(seed=0))
        kept = {ep.user.user_id for ep in splits.all_episodes()}
        assert kept == set(range(1, 9))

    def test_young_users_removed(self, tmp_path):
        users = ["1::M::5::1::55001", "2::M::30::1::55002", "3::M::25::1::55003",
                 "4::F::28::2::55004", "5::F::40::2::55005"]
        movies = ["1::Feature 1 (1990)::Drama", "2::Feature 2 (1991)::Comedy"]
        ratings = [f"{u}::{m}::4::{978300000 + u * 10 + m}"
                   for u in range(1, 6) for m in (1, 2)]
        raw = load_movielens(*corpus_paths(tmp_path, users, movies, ratings))
        splits = preprocess(raw, PreprocessConfig(seed=0, cold_start_fraction=1.0))
        kept = {ep.user.user_id for ep in splits.all_episodes()}
        assert 1 not in kept
        assert kept == {2, 3, 4, 5}

    def test_garbled_profiles_removed(self, tmp_path):
        users = ["1::M::30::1::5500a", "2::X::30::1::55002", "3::M::30::1::55003",
                 "4::M::101::1::55004", "5::F::35::2::55005"]
        movies = ["1::Feature 1 (1990)::Drama", "2::Feature 2 (1991)::Comedy"]
        ratings = [f"{u}::{m}::4::{978300000 + u * 10 + m}"
                   for u in range(1, 6) for m in (1, 2)]
        raw = load_movielens(*corpus_paths(tmp_path, users, movies, ratings))
        splits = preprocess(raw, PreprocessConfig(seed=0, cold_start_fraction=1.0))
        kept = {ep.user.user_id for ep in splits.all_episodes()}
        assert kept == {3, 5}

    def test_users_with_too_few_items_removed(self, tmp_path):
        users = [f"{u}::M::30::1::55{u:03d}" for u in (1, 2, 3)]
        movies = ["1::Feature 1 (1990)::Drama", "2::Feature 2 (1991)::Comedy"]
        ratings = ["1::1::4::978300001",
                   "2::1::4::978300002", "2::2::3::978300003",
                   "3::1::5::978300004", "3::2::2::978300005"]
        raw = load_movielens(*corpus_paths(tmp_path, users, movies, ratings))
        splits = preprocess(raw, PreprocessConfig(seed=0, cold_start_fraction=1.0))
        kept = {ep.user.user_id for ep in splits.all_episodes()}
        assert kept == {2, 3}

    def test_ten_users_split_seven_one_two(self, tmp_path):
        raw = load_movielens(*simple_corpus(tmp_path, n_users=10))
        splits = preprocess(raw, PreprocessConfig(seed=3, cold_start_fraction=1.0))
        assert (len(splits.train), len(splits.validation), len(splits.test)) == (7, 1, 2)

    def test_splits_are_user_disjoint(self, tmp_path):
        raw = load_movielens(*simple_corpus(tmp_path, n_users=12))
        splits = preprocess(raw, PreprocessConfig(seed=1, cold_start_fraction=1.0))
        train = {ep.user.user_id for ep in splits.train}
        val = {ep.user.user_id for ep in splits.validation}
        test = {ep.user.user_id for ep in splits.test}
        assert not (train & val) and not (train & test) and not (val & test)

    def test_support_query_split_sizes(self, tmp_path):
        raw = load_movielens(*simple_corpus(tmp_path, n_users=10, items_per_user=5))
        splits = preprocess(raw, PreprocessConfig(seed=0, cold_start_fraction=1.0))
        for ep in splits.all_episodes():
            assert len(ep.support) == 4
            assert len(ep.query) == 1

    def test_two_item_users_keep_one_query_item(self, tmp_path):
        raw = load_movielens(*simple_corpus(tmp_path, n_users=8, items_per_user=2))
        splits = preprocess(raw, PreprocessConfig(seed=0, cold_start_fraction=1.0))
        for ep in splits.all_episodes():
            assert len(ep.support) == 1
            assert len(ep.query) == 1

    def test_support_and_query_disjoint(self, tmp_path):
        raw = load_movielens(*simple_corpus(tmp_path))
        splits = preprocess(raw, PreprocessConfig(seed=2, cold_start_fraction=1.0))
        for ep in splits.all_episodes():
            support_keys = {(i.item_id, i.timestamp) for i in ep.support}
            query_keys = {(i.item_id, i.timestamp) for i in ep.query}
            assert not (support_keys & query_keys)
            assert ep.support and ep.query

    def test_same_seed_reproduces_splits_exactly(self, tmp_path):
        paths = simple_corpus(tmp_path)
        a = preprocess(load_movielens(*paths), PreprocessConfig(seed=9))
        b = preprocess(load_movielens(*paths), PreprocessConfig(seed=9))
        assert a == b

    def test_different_seeds_shuffle_users(self, tmp_path):
        paths = simple_corpus(tmp_path, n_users=20)
        a = preprocess(load_movielens(*paths), PreprocessConfig(seed=0, cold_start_fraction=1.0))
        b = preprocess(load_movielens(*paths), PreprocessConfig(seed=1, cold_start_fraction=1.0))
        assert [ep.user.user_id for ep in a.train] != [ep.user.user_id for ep in b.train]

    def test_everything_filtered_is_an_error(self, tmp_path):
        users = ["1::M::5::1::55001"]
        movies = ["1::Feature 1 (1990)::Drama"]
        ratings = ["1::1::4::978300001", "1::1::3::978300002"]
        raw = load_movielens(*corpus_paths(tmp_path, users, movies, ratings))
        with pytest.raises(DataError):
            preprocess(raw, PreprocessConfig(seed=0, cold_start_fraction=1.0))

    def test_encode_round_trip(self, tmp_path):
        raw = load_movielens(*simple_corpus(tmp_path))
        splits = preprocess(raw, PreprocessConfig(seed=0, cold_start_fraction=1.0))
        ep = splits.train[0]
        user_ids, items, targets = splits.encode(ep.user, ep.support)
        assert user_ids.shape == (4,)
        assert items.shape == (len(ep.support), 1)
        assert np.all(targets == [i.feedback for i in ep.support])
        for pos, vocab in enumerate(splits.user_vocabs):
            assert user_ids[pos] == vocab[ep.user.features[pos]]

    def test_min_items_below_two_rejected(self):
        with pytest.raises(ConfigError):
            PreprocessConfig(min_items=1)


class TestMajorMinor:
    def make_profiles(self):
        # feature layout: (gender, age, occupation, zip_prefix)
        profiles = [
            UserProfile("head1", ("M", 25, 0, "5")),
            UserProfile("head2", ("M", 25, 0, "5")),
            UserProfile("head3", ("M", 25, 0, "5")),
            UserProfile("three_of_four", ("M", 25, 0, "9")),
            UserProfile("two_of_four", ("M", 25, 7, "9")),
            UserProfile("zero_of_four", ("F", 50, 7, "9")),
        ]
        vocabs = (
            {"M": 0, "F": 1},
            {25: 0, 50: 1},
            {0: 0, 7: 1},
            {"5": 0, "9": 1},
        )
        return profiles, vocabs

    def test_three_of_four_is_major(self):
        profiles, vocabs = self.make_profiles()
        labels = classify_major_minor(profiles, {p.user_id for p in profiles}, vocabs)
        assert labels["three_of_four"] is True

    def test_exactly_two_is_minor(self):
        profiles, vocabs = self.make_profiles()
        labels = classify_major_minor(profiles, {p.user_id for p in profiles}, vocabs)
        assert labels["two_of_four"] is False

    def test_zero_hits_is_minor(self):
        profiles, vocabs = self.make_profiles()
        labels = classify_major_minor(profiles, {p.user_id for p in profiles}, vocabs)
        assert labels["zero_of_four"] is False

    def test_counts_come_from_training_population_only(self):
        profiles, vocabs = self.make_profiles()
        # with only zero_of_four in training, its values become the head
        labels = classify_major_minor(profiles, {"zero_of_four"}, vocabs)
        assert labels["zero_of_four"] is True
        assert labels["head1"] is False

    def test_partition_covers_every_user(self, tmp_path):
        raw = load_movielens(*simple_corpus(tmp_path))
        splits = preprocess(raw, PreprocessConfig(seed=0, cold_start_fraction=1.0))
        users = {ep.user.user_id for ep in splits.all_episodes()}
        assert set(splits.is_major) == users


class TestSynthTwoGroup:
    def test_degenerate_population_is_all_group_one(self):
        episodes = synth_two_group(1.0, 0.0, 0.0, 1.0, n_tasks=50, noise_sd=0.1, seed=0)
        assert all(ep.user.features == (1,) for ep in episodes)

    def test_group_fraction_concentrates(self):
        episodes = synth_two_group(0.7, 0.3, 0.0, 1.0, n_tasks=10_000, noise_sd=0.1, seed=4)
        fraction = np.mean([ep.user.features[0] == 1 for ep in episodes])
        assert abs(fraction - 0.7) < 0.02

    def test_zero_noise_hits_group_centers(self):
        episodes = synth_two_group(0.6, 0.4, -1.5, 2.5, n_tasks=100, noise_sd=0.0, seed=1)
        for ep in episodes:
            center = -1.5 if ep.user.features[0] == 1 else 2.5
            for inter in ep.support + ep.query:
                assert inter.feedback == center

    def test_support_query_sizes(self):
        episodes = synth_two_group(0.8, 0.2, 0.0, 1.0, n_tasks=10, noise_sd=0.1, seed=2,
                                   support_size=7, query_size=3)
        for ep in episodes:
            assert len(ep.support) == 7
            assert len(ep.query) == 3

    def test_invalid_probabilities_rejected(self):
        with pytest.raises(ConfigError):
            synth_two_group(0.6, 0.6, 0.0, 1.0, n_tasks=5, noise_sd=0.1, seed=0)
        with pytest.raises(ConfigError):
            synth_two_group(0.3, 0.7, 0.0, 1.0, n_tasks=5, noise_sd=0.1, seed=0)

    def test_splits_package(self):
        splits = synthetic_splits(0.8, 0.2, 0.0, 1.0, n_tasks=100, noise_sd=0.1, seed=3)
        assert isinstance(splits, DatasetSplits)
        assert (len(splits.train), len(splits.validation), len(splits.test)) == (70, 10, 20)
        for ep in splits.train:
            assert splits.is_major[ep.user.user_id] == (ep.user.features[0] == 1)
        user_ids, items, targets = splits.encode(splits.train[0].user, splits.train[0].query)
        assert items.shape[1] == 1

    def test_deterministic_given_seed(self):
        a = synth_two_group(0.8, 0.2, 0.0, 1.0, n_tasks=20, noise_sd=0.2, seed=11)
        b = synth_two_group(0.8, 0.2, 0.0, 1.0, n_tasks=20, noise_sd=0.2, seed=11)
        assert a == b


class TestGeneratedCorpus:
    def test_pipeline_end_to_end(self, tmp_path):
        paths = generate_corpus(tmp_path / "corpus", n_users=60, n_movies=40, seed=5)
        raw = load_movielens(paths["ratings"], paths["users"], paths["movies"])
        assert len(raw.users) == 60
        splits = preprocess(raw, PreprocessConfig(seed=0))
        assert splits.train and splits.validation and splits.test
        labels = list(splits.is_major.values())
        assert any(labels) and not all(labels)

    def test_generation_deterministic(self, tmp_path):
        a = generate_corpus(tmp_path / "a", n_users=30, n_movies=25, seed=9)
        b = generate_corpus(tmp_path / "b", n_users=30, n_movies=25, seed=9)
        for key in a:
            with open(a[key], "rb") as fa, open(b[key], "rb") as fb:
                assert fa.read() == fb.read()

    def test_head_users_dominate_major_labels(self, tmp_path):
        paths = generate_corpus(tmp_path / "corpus", n_users=200, n_movies=80, seed=7)
        raw = load_movielens(paths["ratings"], paths["users"], paths["movies"])
        splits = preprocess(raw, PreprocessConfig(seed=0, cold_start_fraction=1.0))
        # generated head users have ids 1..160; most should classify major
        head = [flag for uid, flag in splits.is_major.items() if uid <= 160]
        tail = [flag for uid, flag in splits.is_major.items() if uid > 160]
        assert np.mean(head) > 0.6
        assert np.mean(tail) < 0.4


ML_DIR = os.environ.get("MOVIELENS_1M_DIR")


@pytest.mark.skipif(ML_DIR is None, reason="set MOVIELENS_1M_DIR to test against the real corpus")
class TestRealCorpus:
    def test_raw_user_count(self):
        raw = load_movielens(os.path.join(ML_DIR, "ratings.dat"),
                             os.path.join(ML_DIR, "users.dat"),
                             os.path.join(ML_DIR, "movies.dat"))
        assert len(raw.users) == 6040

    def test_major_fraction_near_two_thirds(self):
        raw = load_movielens(os.path.join(ML_DIR, "ratings.dat"),
                             os.path.join(ML_DIR, "users.dat"),
                             os.path.join(ML_DIR, "movies.dat"))
        splits = preprocess(raw, PreprocessConfig(seed=0))
        fraction = np.mean(list(splits.is_major.values()))
        assert abs(fraction - 0.65) < 0.03
