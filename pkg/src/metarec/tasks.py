"""Task data model: ingestion, filtering, splits, and synthetic generators.

Users become few-shot episodes: a profile plus support/query interaction
sets.  The pipeline ranks users by activity, keeps the cold-start tail,
filters out malformed profiles, splits users 7:1:2, and splits each user's
interactions 80:20.  Feature vocabularies are built over the surviving
population; major/minor labels follow the top-populous-value rule with
counts taken from the training split only.
"""

import re
import warnings
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from .errors import ConfigError, DataError

USER_FEATURE_NAMES = ("gender", "age", "occupation", "zip_prefix")
ITEM_FEATURE_NAMES = ("genre",)
ZIP_RE = re.compile(r"^\d{5}")
ZIP_PREFIX_LEN = 1
RATING_RANGE = (1.0, 5.0)
MAX_SKIPPED_FRACTION = 0.01
MAJOR_FEATURE_THRESHOLD = 2  # strictly more than this many head values => major


@dataclass(frozen=True)
class UserProfile:
    user_id: object
    features: Tuple


@dataclass(frozen=True)
class Interaction:
    item_id: object
    features: Tuple
    feedback: float
    timestamp: Optional[int] = None


@dataclass(frozen=True)
class TaskEpisode:
    user: UserProfile
    support: Tuple[Interaction, ...]
    query: Tuple[Interaction, ...]


@dataclass(frozen=True)
class RawDataset:
    users: Dict
    movies: Dict          # item_id -> feature tuple
    ratings: Tuple        # (user_id, item_id, feedback, timestamp)
    skipped_lines: int
    total_lines: int


@dataclass(frozen=True)
class DatasetSplits:
    train: Tuple[TaskEpisode, ...]
    validation: Tuple[TaskEpisode, ...]
    test: Tuple[TaskEpisode, ...]
    user_vocabs: Tuple[Dict, ...]
    item_vocabs: Tuple[Dict, ...]
    is_major: Dict

    def all_episodes(self) -> Tuple[TaskEpisode, ...]:
        return self.train + self.validation + self.test

    def user_vocab_sizes(self) -> Tuple[int, ...]:
        return tuple(len(v) for v in self.user_vocabs)

    def item_vocab_sizes(self) -> Tuple[int, ...]:
        return tuple(len(v) for v in self.item_vocabs)

    def encode(self, user: UserProfile, interactions: Sequence[Interaction]):
        """Map raw feature values to id arrays for the model."""
        try:
            user_ids = np.array([vocab[value] for vocab, value
                                 in zip(self.user_vocabs, user.features)], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"user {user.user_id!r} carries unknown feature value {exc}")
        items = np.empty((len(interactions), len(self.item_vocabs)), dtype=np.int64)
        targets = np.empty(len(interactions), dtype=np.float64)
        for row, inter in enumerate(interactions):
            for col, (vocab, value) in enumerate(zip(self.item_vocabs, inter.features)):
                if value not in vocab:
                    raise DataError(f"item {inter.item_id!r} carries unknown feature value {value!r}")
                items[row, col] = vocab[value]
            targets[row] = inter.feedback
        return user_ids, items, targets


@dataclass(frozen=True)
class PreprocessConfig:
    seed: int = 0
    cold_start_fraction: float = 0.8
    min_items: int = 2
    split: Tuple[int, int, int] = (7, 1, 2)
    support_ratio: float = 0.8

    def __post_init__(self):
        if not (0.0 < self.cold_start_fraction <= 1.0):
            raise ConfigError("cold_start_fraction must be in (0, 1]")
        if self.min_items < 2:
            raise ConfigError("min_items must be >= 2 so query sets are non-empty")
        if len(self.split) != 3 or any(s < 0 for s in self.split) or sum(self.split) <= 0:
            raise ConfigError("split must be three non-negative integers")
        if not (0.0 < self.support_ratio < 1.0):
            raise ConfigError("support_ratio must be in (0, 1)")


def _parse_users(path) -> Tuple[Dict, int, int]:
    users: Dict = {}
    skipped = total = 0
    try:
        handle = open(path, encoding="latin-1")
    except OSError as exc:
        raise DataError(f"cannot open users file: {exc}")
    with handle:
        for line in handle:
            line = line.rstrip("\n")
            if not line:
                continue
            total += 1
            parts = line.split("::")
            if len(parts) != 5:
                skipped += 1
                continue
            uid_s, gender, age_s, occupation_s, zipcode = parts
            try:
                uid = int(uid_s)
                age = int(age_s)
                occupation = int(occupation_s)
            except ValueError:
                skipped += 1
                continue
            users[uid] = {"gender": gender, "age": age,
                          "occupation": occupation, "zipcode": zipcode}
    return users, skipped, total


def _parse_movies(path) -> Tuple[Dict, int, int]:
    movies: Dict = {}
    skipped = total = 0
    try:
        handle = open(path, encoding="latin-1")
    except OSError as exc:
        raise DataError(f"cannot open movies file: {exc}")
    with handle:
        for line in handle:
            line = line.rstrip("\n")
            if not line:
                continue
            total += 1
            parts = line.split("::")
            if len(parts) != 3:
                skipped += 1
                continue
            mid_s, _title, genres = parts
            try:
                mid = int(mid_s)
            except ValueError:
                skipped += 1
                continue
            movies[mid] = (genres,)
    return movies, skipped, total


def _parse_ratings(path, users, movies) -> Tuple[List, int, int]:
    ratings: List = []
    skipped = total = 0
    try:
        handle = open(path, encoding="latin-1")
    except OSError as exc:
        raise DataError(f"cannot open ratings file: {exc}")
    with handle:
        for line in handle:
            line = line.rstrip("\n")
            if not line:
                continue
            total += 1
            parts = line.split("::")
            if len(parts) != 4:
                skipped += 1
                continue
            try:
                uid = int(parts[0])
                mid = int(parts[1])
                feedback = float(parts[2])
                timestamp = int(parts[3])
            except ValueError:
                skipped += 1
                continue
            if uid not in users or mid not in movies:
                skipped += 1
                continue
            if not (RATING_RANGE[0] <= feedback <= RATING_RANGE[1]):
                skipped += 1
                continue
            ratings.append((uid, mid, feedback, timestamp))
    return ratings, skipped, total


def load_movielens(ratings_path, users_path, movies_path) -> RawDataset:
    """Parse `::`-separated Latin-1 rating/user/movie files.

    Unparseable or dangling lines are skipped and counted; more than 1% of
    skipped lines in any file aborts the load.
    """
    users, skipped_u, total_u = _parse_users(users_path)
    movies, skipped_m, total_m = _parse_movies(movies_path)
    ratings, skipped_r, total_r = _parse_ratings(ratings_path, users, movies)
    if total_r == 0 or not ratings:
        raise DataError("ratings file holds no usable records")
    for name, skipped, total in (("users", skipped_u, total_u),
                                 ("movies", skipped_m, total_m),
                                 ("ratings", skipped_r, total_r)):
        if total and skipped / total > MAX_SKIPPED_FRACTION:
            raise DataError(
                f"{name} file: {skipped} of {total} lines skipped exceeds the 1% budget")
    if skipped_u or skipped_m or skipped_r:
        warnings.warn(
            f"skipped lines while loading: users={skipped_u} movies={skipped_m} ratings={skipped_r}")
    return RawDataset(users=users, movies=movies, ratings=tuple(ratings),
                      skipped_lines=skipped_u + skipped_m + skipped_r,
                      total_lines=total_u + total_m + total_r)


def _profile_from_raw(uid, rec) -> Optional[UserProfile]:
    gender = rec["gender"]
    if gender not in ("M", "F"):
        return None
    age = rec["age"]
    if age < 10 or age > 100:
        return None
    if rec["occupation"] < 0:
        return None
    zipcode = rec["zipcode"]
    if not ZIP_RE.match(zipcode):
        return None
    return UserProfile(user_id=uid,
                       features=(gender, age, rec["occupation"], zipcode[:ZIP_PREFIX_LEN]))


def _split_counts(n: int, parts: Tuple[int, int, int]) -> Tuple[int, int]:
    total = sum(parts)
    first = (parts[0] * n) // total
    second = ((parts[0] + parts[1]) * n) // total
    return first, second


def _split_interactions(interactions: List[Interaction], ratio: float,
                        rng: np.random.Generator) -> Tuple[Tuple, Tuple]:
    order = rng.permutation(len(interactions))
    shuffled = [interactions[i] for i in order]
    support_size = int(np.ceil(ratio * len(shuffled)))
    support_size = min(support_size, len(shuffled) - 1)
    return tuple(shuffled[:support_size]), tuple(shuffled[support_size:])


def classify_major_minor(profiles: Sequence[UserProfile],
                         train_user_ids: Set,
                         vocabs: Sequence[Mapping]) -> Dict:
    """Label users major/minor by membership in per-feature head-value sets.

    For each feature the head set covers the ceil(30%) most user-populous
    values (ceil(50%) when the vocabulary is binary), counted over training
    users only, ties broken by value order in the vocabulary.  A user is
    major when strictly more than two features fall in the head sets.
    """
    head_sets = []
    for feature_pos, vocab in enumerate(vocabs):
        counts: Dict = {value: 0 for value in vocab}
        for profile in profiles:
            if profile.user_id in train_user_ids:
                counts[profile.features[feature_pos]] += 1
        fraction = 0.5 if len(vocab) == 2 else 0.3
        top_k = int(np.ceil(fraction * len(vocab)))
        ranked = sorted(vocab, key=lambda v: (-counts[v], vocab[v]))
        head_sets.append(set(ranked[:top_k]))
    labels: Dict = {}
    for profile in profiles:
        hits = sum(1 for pos, value in enumerate(profile.features)
                   if value in head_sets[pos])
        labels[profile.user_id] = hits > MAJOR_FEATURE_THRESHOLD
    return labels


def _build_vocab(values) -> Dict:
    return {value: idx for idx, value in enumerate(sorted(set(values), key=repr))}


def preprocess(raw: RawDataset, config: PreprocessConfig) -> DatasetSplits:
    """Cold-start ranking, validity filters, user splits, episode splits."""
    counts: Dict = {uid: 0 for uid in raw.users}
    by_user: Dict = {uid: [] for uid in raw.users}
    for uid, mid, feedback, timestamp in raw.ratings:
        counts[uid] += 1
        by_user[uid].append(Interaction(item_id=mid, features=raw.movies[mid],
                                        feedback=feedback, timestamp=timestamp))

    # stage 1: keep the cold-start tail, the users with the least log data
    ranked = sorted(raw.users, key=lambda uid: (counts[uid], uid))
    keep = ranked[:int(np.floor(config.cold_start_fraction * len(ranked)))]

    # stage 2: profile validity and minimum interaction count
    profiles: List[UserProfile] = []
    for uid in keep:
        profile = _profile_from_raw(uid, raw.users[uid])
        if profile is None:
            continue
        if counts[uid] < config.min_items:
            continue
        profiles.append(profile)
    if not profiles:
        raise DataError("every user was filtered out during preprocessing")

    # stage 3: seeded user shuffle into train/validation/test
    rng = np.random.default_rng(config.seed)
    profiles.sort(key=lambda p: repr(p.user_id))
    order = rng.permutation(len(profiles))
    shuffled = [profiles[i] for i in order]
    first, second = _split_counts(len(shuffled), config.split)
    groups = (shuffled[:first], shuffled[first:second], shuffled[second:])

    # vocabularies span every surviving user and their items
    user_vocabs = tuple(_build_vocab(p.features[pos] for p in profiles)
                        for pos in range(len(USER_FEATURE_NAMES)))
    item_values: List = []
    for profile in profiles:
        item_values.extend(inter.features for inter in by_user[profile.user_id])
    item_vocabs = tuple(_build_vocab(values[pos] for values in item_values)
                        for pos in range(len(ITEM_FEATURE_NAMES)))

    # stage 4: per-user support/query split, in deterministic user order
    episode_groups: List[Tuple[TaskEpisode, ...]] = []
    for group in groups:
        episodes = []
        for profile in group:
            interactions = sorted(by_user[profile.user_id],
                                  key=lambda r: (r.timestamp or 0, repr(r.item_id)))
            support, query = _split_interactions(interactions, config.support_ratio, rng)
            episodes.append(TaskEpisode(user=profile, support=support, query=query))
        episode_groups.append(tuple(episodes))

    train_ids = {ep.user.user_id for ep in episode_groups[0]}
    labels = classify_major_minor(profiles, train_ids, user_vocabs)
    return DatasetSplits(train=episode_groups[0], validation=episode_groups[1],
                         test=episode_groups[2], user_vocabs=user_vocabs,
                         item_vocabs=item_vocabs, is_major=labels)


SYNTH_GROUP_FEATURE = ("group",)
SYNTH_ITEM_FEATURE_VALUE = "scalar"


def synth_two_group(p1: float, p2: float, x1: float, x2: float, n_tasks: int,
                    noise_sd: float, seed: int, support_size: int = 5,
                    query_size: int = 5) -> List[TaskEpisode]:
    """Scalar-regression episodes drawn from two latent groups.

    Each task belongs to group 1 with probability p1; its targets scatter
    around the group preference x_g with Gaussian noise.  The single user
    feature is the group id, so embeddings can separate the groups.
    """
    if not (p1 > 0.0 and p2 >= 0.0 and abs(p1 + p2 - 1.0) < 1e-12):
        raise ConfigError("group probabilities must be non-negative and sum to 1")
    if p1 < p2:
        raise ConfigError("group 1 must be the major group (p1 >= p2)")
    if n_tasks < 1 or support_size < 1 or query_size < 1:
        raise ConfigError("n_tasks, support_size, query_size must be >= 1")
    rng = np.random.default_rng(seed)
    episodes = []
    for task in range(n_tasks):
        group = 1 if rng.uniform() < p1 else 2
        center = x1 if group == 1 else x2
        targets = center + noise_sd * rng.standard_normal(support_size + query_size)
        user = UserProfile(user_id=task, features=(group,))
        interactions = tuple(
            Interaction(item_id=j, features=(SYNTH_ITEM_FEATURE_VALUE,), feedback=float(t))
            for j, t in enumerate(targets))
        episodes.append(TaskEpisode(user=user,
                                    support=interactions[:support_size],
                                    query=interactions[support_size:]))
    return episodes


def synthetic_splits(p1: float, p2: float, x1: float, x2: float, n_tasks: int,
                     noise_sd: float, seed: int, support_size: int = 5,
                     query_size: int = 5,
                     split: Tuple[int, int, int] = (7, 1, 2)) -> DatasetSplits:
    """Package two-group episodes as train/validation/test splits."""
    episodes = synth_two_group(p1, p2, x1, x2, n_tasks, noise_sd, seed,
                               support_size, query_size)
    rng = np.random.default_rng((seed, 1))
    order = rng.permutation(len(episodes))
    shuffled = [episodes[i] for i in order]
    first, second = _split_counts(len(shuffled), split)
    labels = {ep.user.user_id: ep.user.features[0] == 1 for ep in episodes}
    return DatasetSplits(
        train=tuple(shuffled[:first]),
        validation=tuple(shuffled[first:second]),
        test=tuple(shuffled[second:]),
        user_vocabs=({1: 0, 2: 1},),
        item_vocabs=({SYNTH_ITEM_FEATURE_VALUE: 0},),
        is_major=labels,
    )
