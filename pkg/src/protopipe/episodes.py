"""Episodic task sampling: fixed K-way-N-shot and various-way-various-shot.

Way and shot are drawn independently and uniformly over their configured
ranges (hierarchy-aware sampling rules of the large benchmarks are out of
scope). Infeasible draws are clamped rather than failing: classes with
fewer than shot+Q items keep all non-query items as support, and classes
with fewer than 1+Q items are excluded before selection, so support and
query indices can never overlap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset


class SamplerError(ValueError):
    pass


def _as_range(value, name, minimum):
    if isinstance(value, (tuple, list)):
        lo, hi = int(value[0]), int(value[1])
    else:
        lo = hi = int(value)
    if lo > hi:
        raise SamplerError(f"{name} range [{lo}, {hi}] is reversed")
    if lo < minimum:
        raise SamplerError(f"{name} must be >= {minimum}, got {lo}")
    return lo, hi


@dataclass(frozen=True)
class SamplerConfig:
    way: object = 5            # int or (min, max)
    shot: object = 5           # int or (min, max)
    queries_per_class: int = 15
    seed: int = 0

    def __post_init__(self):
        _as_range(self.way, "way", 2)
        _as_range(self.shot, "shot", 1)
        if self.queries_per_class < 1:
            raise SamplerError("queries_per_class must be >= 1")

    @property
    def way_range(self):
        return _as_range(self.way, "way", 2)

    @property
    def shot_range(self):
        return _as_range(self.shot, "shot", 1)


@dataclass
class Episode:
    """One few-shot task; labels are remapped to 0..way-1."""

    support_items: np.ndarray
    support_labels: np.ndarray
    query_items: np.ndarray
    query_labels: np.ndarray
    way: int
    shots: np.ndarray            # per-class support counts
    domain_name: str
    support_indices: np.ndarray  # source-dataset rows, kept for validation
    query_indices: np.ndarray
    class_ids: np.ndarray        # original dataset class per episode label


def sample_episode(dataset: Dataset, config: SamplerConfig, rng) -> Episode:
    way_lo, way_hi = config.way_range
    shot_lo, shot_hi = config.shot_range
    q = config.queries_per_class
    way = int(rng.integers(way_lo, way_hi + 1))
    shot = int(rng.integers(shot_lo, shot_hi + 1))
    eligible = [c for c in dataset.classes() if len(dataset.class_index[c]) >= 1 + q]
    if len(eligible) < way_lo:
        raise SamplerError(
            f"{dataset.domain_name}/{dataset.split}: only {len(eligible)} classes have "
            f"{1 + q}+ items, need at least {way_lo}"
        )
    way = min(way, len(eligible))
    chosen = rng.choice(np.asarray(eligible, dtype=np.int64), size=way, replace=False)
    support_idx, query_idx, shots = [], [], []
    support_labels, query_labels = [], []
    for label, cls in enumerate(chosen):
        pool = dataset.class_index[int(cls)]
        n_k = min(shot, len(pool) - q)
        picked = rng.choice(pool, size=n_k + q, replace=False)
        support_idx.append(picked[:n_k])
        query_idx.append(picked[n_k:])
        shots.append(n_k)
        support_labels.append(np.full(n_k, label, dtype=np.int64))
        query_labels.append(np.full(q, label, dtype=np.int64))
    support_idx = np.concatenate(support_idx)
    query_idx = np.concatenate(query_idx)
    return Episode(
        support_items=dataset.items[support_idx].copy(),
        support_labels=np.concatenate(support_labels),
        query_items=dataset.items[query_idx].copy(),
        query_labels=np.concatenate(query_labels),
        way=way,
        shots=np.asarray(shots, dtype=np.int64),
        domain_name=dataset.domain_name,
        support_indices=support_idx,
        query_indices=query_idx,
        class_ids=np.asarray(chosen, dtype=np.int64),
    )


def validate_episode(episode: Episode) -> list:
    """Return the list of invariant violations (empty means well-formed)."""
    violations = []
    support = set(episode.support_indices.tolist())
    query = set(episode.query_indices.tolist())
    if support & query:
        violations.append(f"overlap: {len(support & query)} items in both support and query")
    if len(support) != len(episode.support_indices):
        violations.append("duplicate support indices")
    if len(query) != len(episode.query_indices):
        violations.append("duplicate query indices")
    expected = set(range(episode.way))
    for name, labels in (("support", episode.support_labels),
                         ("query", episode.query_labels)):
        present = set(labels.tolist())
        missing = expected - present
        if missing:
            violations.append(f"class coverage: {name} missing labels {sorted(missing)}")
        stray = present - expected
        if stray:
            violations.append(f"labels not contiguous in 0..{episode.way - 1}: {sorted(stray)}")
    if episode.way < 2:
        violations.append(f"way must be >= 2, got {episode.way}")
    if len(episode.shots) != episode.way or (episode.shots < 1).any():
        violations.append("per-class shot counts inconsistent with way")
    return violations


def episode_rng(master_seed: int, *key) -> np.random.Generator:
    """Counter-based stream so parallel evaluation is order-independent."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=tuple(key)))
