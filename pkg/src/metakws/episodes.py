"""Keyword splits and episodic N-way-K-shot task sampling.

A split carves the label inventory into meta-train, meta-test, and unknown
keywords and partitions every keyword's utterances (and the silence pool)
between the two phases, so no utterance id ever crosses phases.  An episode
is N classes (N−2 keywords plus an "unknown" class pooled from the held-out
unknown keywords and a "silence" class from the phase noise pool), each with
K support and Q query utterances, class indices shuffled per episode.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .features import SILENCE_LABEL, DatasetFormatError

UNKNOWN_CLASS = "unknown"
SILENCE_CLASS = "silence"

TRAIN_PHASE = "train"
TEST_PHASE = "test"


class SamplingError(Exception):
    """An episode cannot be drawn from the available pools."""


@dataclass(frozen=True)
class SamplerConfig:
    """Episode shape: N classes, K shots, Q queries per class."""

    n_way: int = 12
    k_shot: int = 5
    q_per_class: int = 5
    tasks_per_epoch: int = 1000

    def validate(self):
        if self.n_way < 3:
            raise SamplingError("n_way must be >= 3 (keywords + unknown + silence)")
        if self.k_shot < 1 or self.q_per_class < 1:
            raise SamplingError("k_shot and q_per_class must be >= 1")
        if self.tasks_per_epoch < 1:
            raise SamplingError("tasks_per_epoch must be >= 1")


@dataclass(frozen=True)
class SplitSpec:
    """Keyword and utterance partition between meta-train and meta-test."""

    meta_train_keywords: tuple
    meta_test_keywords: tuple
    unknown_keywords: tuple
    train_utterances: dict
    test_utterances: dict
    train_noise_pool: tuple
    test_noise_pool: tuple

    def validate(self):
        groups = [set(self.meta_train_keywords), set(self.meta_test_keywords),
                  set(self.unknown_keywords)]
        for i in range(3):
            for j in range(i + 1, 3):
                overlap = groups[i] & groups[j]
                if overlap:
                    raise ValueError(f"keyword sets overlap: {sorted(overlap)}")
        if set(self.train_noise_pool) & set(self.test_noise_pool):
            raise ValueError("noise pools overlap")
        for kw in (*self.meta_train_keywords, *self.meta_test_keywords,
                   *self.unknown_keywords):
            train = set(self.train_utterances.get(kw, ()))
            test = set(self.test_utterances.get(kw, ()))
            if train & test:
                raise ValueError(f"keyword {kw!r}: phase utterance pools overlap")

    def phase_keywords(self, phase):
        return (self.meta_train_keywords if phase == TRAIN_PHASE
                else self.meta_test_keywords)

    def phase_pool(self, phase, keyword):
        pools = self.train_utterances if phase == TRAIN_PHASE else self.test_utterances
        return pools[keyword]

    def phase_noise(self, phase):
        return self.train_noise_pool if phase == TRAIN_PHASE else self.test_noise_pool

    def unknown_pool(self, phase):
        ids = []
        for kw in self.unknown_keywords:
            ids.extend(self.phase_pool(phase, kw))
        return tuple(ids)


@dataclass(frozen=True)
class Episode:
    """One few-shot task: class-major support and query id lists."""

    support: tuple
    query: tuple
    class_map: tuple
    k_shot: int
    q_per_class: int

    def __post_init__(self):
        n = len(self.class_map)
        if len(self.support) != n * self.k_shot:
            raise ValueError("support size != N * K")
        if len(self.query) != n * self.q_per_class:
            raise ValueError("query size != N * Q")
        for i, (_, cls) in enumerate(self.support):
            if cls != i // self.k_shot:
                raise ValueError("support must be ordered class-major")
        for i, (_, cls) in enumerate(self.query):
            if cls != i // self.q_per_class:
                raise ValueError("query must be ordered class-major")
        support_ids = {utt for utt, _ in self.support}
        if len(support_ids) != len(self.support):
            raise ValueError("duplicate support utterance")
        query_ids = {utt for utt, _ in self.query}
        if len(query_ids) != len(self.query):
            raise ValueError("duplicate query utterance")
        if support_ids & query_ids:
            raise ValueError("support and query share utterances")

    @property
    def n_way(self):
        return len(self.class_map)

    def support_ids(self):
        return [utt for utt, _ in self.support]

    def query_ids(self):
        return [utt for utt, _ in self.query]

    def query_labels(self):
        return np.array([cls for _, cls in self.query], dtype=np.float64)

    def support_labels(self):
        return np.array([cls for _, cls in self.support], dtype=np.float64)


def build_splits(dataset, seed, n_unknown=5, n_train=20, n_test=10,
                 train_fraction=0.5):
    """Deterministically partition keywords and utterances for one seed."""
    keywords = dataset.keyword_labels
    needed = n_unknown + n_train + n_test
    if len(keywords) < needed:
        raise ValueError(
            f"need >= {needed} keyword labels, dataset has {len(keywords)}")
    silence_ids = sorted(dataset.ids_for_label(SILENCE_LABEL))
    if not silence_ids:
        raise ValueError("dataset has no silence pool "
                         f"(label {SILENCE_LABEL!r})")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    order = [keywords[i] for i in rng.permutation(len(keywords))]
    unknown = tuple(sorted(order[:n_unknown]))
    train = tuple(sorted(order[n_unknown:n_unknown + n_train]))
    test = tuple(sorted(order[n_unknown + n_train:needed]))

    train_utts, test_utts = {}, {}
    for kw in sorted((*unknown, *train, *test)):
        ids = sorted(dataset.ids_for_label(kw))
        perm = rng.permutation(len(ids))
        cut = len(ids) // 2 if train_fraction == 0.5 else int(len(ids) * train_fraction)
        train_utts[kw] = tuple(ids[i] for i in perm[:cut])
        test_utts[kw] = tuple(ids[i] for i in perm[cut:])

    noise_perm = rng.permutation(len(silence_ids))
    noise_cut = len(silence_ids) // 2
    split = SplitSpec(
        meta_train_keywords=train,
        meta_test_keywords=test,
        unknown_keywords=unknown,
        train_utterances=train_utts,
        test_utterances=test_utts,
        train_noise_pool=tuple(silence_ids[i] for i in noise_perm[:noise_cut]),
        test_noise_pool=tuple(silence_ids[i] for i in noise_perm[noise_cut:]),
    )
    split.validate()
    return split


def save_split(split, path):
    payload = {
        "format": "kwssplit v1",
        "meta_train_keywords": list(split.meta_train_keywords),
        "meta_test_keywords": list(split.meta_test_keywords),
        "unknown_keywords": list(split.unknown_keywords),
        "train_utterances": {k: list(v) for k, v in sorted(split.train_utterances.items())},
        "test_utterances": {k: list(v) for k, v in sorted(split.test_utterances.items())},
        "train_noise_pool": list(split.train_noise_pool),
        "test_noise_pool": list(split.test_noise_pool),
    }
    with open(path, "w", encoding="ascii") as fh:
        json.dump(payload, fh, sort_keys=True, indent=0)
        fh.write("\n")


def load_split(path):
    with open(path, "r", encoding="ascii") as fh:
        payload = json.load(fh)
    if payload.get("format") != "kwssplit v1":
        raise DatasetFormatError(f"{path}: not a kwssplit v1 file")
    split = SplitSpec(
        meta_train_keywords=tuple(payload["meta_train_keywords"]),
        meta_test_keywords=tuple(payload["meta_test_keywords"]),
        unknown_keywords=tuple(payload["unknown_keywords"]),
        train_utterances={k: tuple(v) for k, v in payload["train_utterances"].items()},
        test_utterances={k: tuple(v) for k, v in payload["test_utterances"].items()},
        train_noise_pool=tuple(payload["train_noise_pool"]),
        test_noise_pool=tuple(payload["test_noise_pool"]),
    )
    split.validate()
    return split


def _class_pools(split, phase, cfg, rng):
    """Pick this episode's semantic classes and their phase id pools."""
    keywords = split.phase_keywords(phase)
    n_keywords = cfg.n_way - 2
    if len(keywords) < n_keywords:
        raise SamplingError(
            f"phase {phase!r} has {len(keywords)} keywords, need {n_keywords}")
    if len(keywords) == n_keywords:
        chosen = list(keywords)
    else:
        idx = rng.choice(len(keywords), size=n_keywords, replace=False)
        chosen = [keywords[i] for i in sorted(idx)]
    slots = [(kw, tuple(split.phase_pool(phase, kw))) for kw in chosen]
    slots.append((UNKNOWN_CLASS, split.unknown_pool(phase)))
    slots.append((SILENCE_CLASS, tuple(split.phase_noise(phase))))
    return slots


def sample_episode(split, phase, cfg, rng):
    """Draw one episode; class indices are shuffled per episode."""
    cfg.validate()
    if phase not in (TRAIN_PHASE, TEST_PHASE):
        raise SamplingError(f"unknown phase {phase!r}")
    slots = _class_pools(split, phase, cfg, rng)
    order = rng.permutation(len(slots))
    support, query, class_map = [], [], []
    per_class = cfg.k_shot + cfg.q_per_class
    for class_idx, slot_idx in enumerate(order):
        label, pool = slots[slot_idx]
        if len(pool) < per_class:
            raise SamplingError(
                f"class {label!r} has {len(pool)} utterances in phase "
                f"{phase!r}, needs {per_class}")
        picks = rng.choice(len(pool), size=per_class, replace=False)
        support.extend((pool[i], class_idx) for i in picks[:cfg.k_shot])
        query.extend((pool[i], class_idx) for i in picks[cfg.k_shot:])
        class_map.append(label)
    return Episode(
        support=tuple(support), query=tuple(query), class_map=tuple(class_map),
        k_shot=cfg.k_shot, q_per_class=cfg.q_per_class)


def fixed_test_suite(split, n_tasks, cfg, seed):
    """A deterministic list of test-phase episodes from one seed.

    Episode i is drawn from the i-th spawned child of the seed sequence, so
    the suite is reproducible and episodes are independent streams.
    """
    if n_tasks < 1:
        raise SamplingError("n_tasks must be >= 1")
    children = np.random.SeedSequence(seed).spawn(n_tasks)
    return [sample_episode(split, TEST_PHASE, cfg, np.random.default_rng(child))
            for child in children]


def resample_support(episode, split, phase, rng):
    """Redraw the support set of an episode, keeping classes and queries.

    Used for the broader accuracy-spread reading where support sets vary;
    new supports avoid the episode's query utterances.
    """
    query_ids = set(episode.query_ids())
    support = []
    for class_idx, label in enumerate(episode.class_map):
        if label == UNKNOWN_CLASS:
            pool = split.unknown_pool(phase)
        elif label == SILENCE_CLASS:
            pool = split.phase_noise(phase)
        else:
            pool = split.phase_pool(phase, label)
        avail = [i for i in pool if i not in query_ids]
        if len(avail) < episode.k_shot:
            raise SamplingError(f"class {label!r}: not enough utterances to resample")
        picks = rng.choice(len(avail), size=episode.k_shot, replace=False)
        support.extend((avail[i], class_idx) for i in picks)
    return Episode(
        support=tuple(support), query=episode.query, class_map=episode.class_map,
        k_shot=episode.k_shot, q_per_class=episode.q_per_class)


# ---------------------------------------------------------------------------
# Suite files.


def save_suite(episodes, path):
    """Write episodes as one line each under a `kwssuite v1` header."""
    if not episodes:
        raise ValueError("cannot save an empty suite")
    first = episodes[0]
    n, k, q = first.n_way, first.k_shot, first.q_per_class
    lines = [f"kwssuite v1 N={n} K={k} Q={q} tasks={len(episodes)}"]
    for ep in episodes:
        if (ep.n_way, ep.k_shot, ep.q_per_class) != (n, k, q):
            raise ValueError("episodes in one suite must share N, K, Q")
        entries = [f"{ep.class_map[cls]}:{utt}" for utt, cls in ep.support]
        entries.append("|")
        entries.extend(f"{ep.class_map[cls]}:{utt}" for utt, cls in ep.query)
        lines.append("\t".join(entries))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_suite_header(line):
    parts = line.split()
    if len(parts) == 6 and parts[0] == "kwssuite" and parts[1] == "v1":
        try:
            kv = dict(p.split("=", 1) for p in parts[2:])
            return int(kv["N"]), int(kv["K"]), int(kv["Q"]), int(kv["tasks"])
        except (KeyError, ValueError):
            pass
    raise DatasetFormatError(f"line 1: unrecognized suite header {line!r}")


def _parse_block(entries, n, per_class, lineno):
    """Rebuild (id, class) pairs and the class label order from one block."""
    if len(entries) != n * per_class:
        raise DatasetFormatError(
            f"line {lineno}: expected {n * per_class} entries, got {len(entries)}")
    items, labels = [], []
    for pos, entry in enumerate(entries):
        label, sep, utt = entry.partition(":")
        if not sep or not utt or not label:
            raise DatasetFormatError(f"line {lineno}: bad entry {entry!r}")
        cls = pos // per_class
        if pos % per_class == 0:
            labels.append(label)
        elif labels[cls] != label:
            raise DatasetFormatError(
                f"line {lineno}: class {cls} mixes labels "
                f"{labels[cls]!r} and {label!r}")
        items.append((utt, cls))
    return items, labels


def load_suite(path):
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetFormatError("line 1: empty suite file")
    n, k, q, n_tasks = _parse_suite_header(lines[0])
    episodes = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        entries = line.split("\t")
        try:
            bar = entries.index("|")
        except ValueError:
            raise DatasetFormatError(f"line {lineno}: missing support/query separator")
        support, s_labels = _parse_block(entries[:bar], n, k, lineno)
        query, q_labels = _parse_block(entries[bar + 1:], n, q, lineno)
        if s_labels != q_labels:
            raise DatasetFormatError(
                f"line {lineno}: support and query class orders differ")
        try:
            episodes.append(Episode(
                support=tuple(support), query=tuple(query),
                class_map=tuple(s_labels), k_shot=k, q_per_class=q))
        except ValueError as exc:
            raise DatasetFormatError(f"line {lineno}: {exc}")
    if len(episodes) != n_tasks:
        raise DatasetFormatError(
            f"header declares {n_tasks} tasks, file has {len(episodes)}")
    return episodes
