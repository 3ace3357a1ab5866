"""Open-set episode construction for the few-shot and large-scale regimes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import DataError, LabeledDataset


@dataclass(frozen=True)
class EpisodeConfig:
    way: int = 5
    shot: int = 1
    query_per_class: int = 15
    open_way: int = 5
    open_query_per_class: int = 15

    def validate(self) -> None:
        if self.way < 2:
            raise ValueError(f"way must be >= 2, got {self.way}")
        if self.shot < 1:
            raise ValueError(f"shot must be >= 1, got {self.shot}")
        if self.query_per_class < 1:
            raise ValueError(f"query_per_class must be >= 1, got {self.query_per_class}")
        if self.open_way < 0:
            raise ValueError(f"open_way must be >= 0, got {self.open_way}")
        if self.open_way > 0 and self.open_query_per_class < 1:
            raise ValueError("open_query_per_class must be >= 1 when open_way > 0")


@dataclass(frozen=True, eq=False)
class Episode:
    """One open-set task.

    Labels of ``support_y`` and ``query_y`` are episode-local positions in
    ``seen_classes``. The ``*_idx`` arrays are dataset row indices.
    """

    seen_classes: tuple[int, ...]
    unseen_classes: tuple[int, ...]
    support_idx: np.ndarray
    support_y: np.ndarray
    query_idx: np.ndarray
    query_y: np.ndarray
    open_idx: np.ndarray
    support_x: np.ndarray
    query_x: np.ndarray
    open_x: np.ndarray

    @property
    def way(self) -> int:
        return len(self.seen_classes)


def _build(dataset, seen, unseen, support_idx, support_y, query_idx, query_y, open_idx) -> Episode:
    support_idx = np.asarray(support_idx, dtype=np.int64)
    query_idx = np.asarray(query_idx, dtype=np.int64)
    open_idx = np.asarray(open_idx, dtype=np.int64)
    x = dataset.features
    return Episode(
        seen_classes=tuple(int(c) for c in seen),
        unseen_classes=tuple(int(c) for c in unseen),
        support_idx=support_idx,
        support_y=np.asarray(support_y, dtype=np.int64),
        query_idx=query_idx,
        query_y=np.asarray(query_y, dtype=np.int64),
        open_idx=open_idx,
        support_x=x[support_idx].reshape(len(support_idx), dataset.dim),
        query_x=x[query_idx].reshape(len(query_idx), dataset.dim),
        open_x=x[open_idx].reshape(len(open_idx), dataset.dim),
    )


def sample_fewshot_episode(
    dataset: LabeledDataset,
    pool,
    cfg: EpisodeConfig,
    rng: np.random.Generator,
    class_samples: dict[int, np.ndarray] | None = None,
) -> Episode:
    """Draw N seen + M unseen classes from ``pool`` in a single draw.

    ``class_samples`` optionally overrides which dataset rows are eligible
    for each class (used to keep held-out rows apart).
    """
    cfg.validate()
    pool = np.asarray(list(pool), dtype=np.int64)
    need = cfg.way + cfg.open_way
    if len(pool) < need:
        raise DataError(f"pool has {len(pool)} classes but the episode needs {need} (way + open_way)")
    rows = class_samples or {}

    def members(c):
        return rows[c] if c in rows else dataset.class_index[c]

    per_seen = cfg.shot + cfg.query_per_class
    for c in pool:
        if len(members(int(c))) < per_seen:
            raise DataError(f"class {int(c)} has {len(members(int(c)))} samples but needs {per_seen}")
        if cfg.open_way and len(members(int(c))) < cfg.open_query_per_class:
            raise DataError(
                f"class {int(c)} has {len(members(int(c)))} samples but open queries need {cfg.open_query_per_class}"
            )
    chosen = rng.choice(pool, size=need, replace=False)
    seen, unseen = chosen[: cfg.way], chosen[cfg.way :]
    s_idx, s_y, q_idx, q_y, o_idx = [], [], [], [], []
    for k, c in enumerate(seen):
        picks = rng.choice(members(int(c)), size=per_seen, replace=False)
        s_idx.extend(picks[: cfg.shot])
        s_y.extend([k] * cfg.shot)
        q_idx.extend(picks[cfg.shot :])
        q_y.extend([k] * cfg.query_per_class)
    for c in unseen:
        o_idx.extend(rng.choice(members(int(c)), size=cfg.open_query_per_class, replace=False))
    return _build(dataset, seen, unseen, s_idx, s_y, q_idx, q_y, o_idx)


def sample_largescale_batch(
    dataset: LabeledDataset,
    classes,
    open_way: int,
    batch_per_class: int,
    rng: np.random.Generator,
    class_samples: dict[int, np.ndarray] | None = None,
) -> Episode:
    """Split the full training class set into M unseen and the rest seen.

    The support set is empty: prototypes are learned parameters. Closed query
    labels index into ``seen_classes``.
    """
    classes = np.asarray(list(classes), dtype=np.int64)
    n_total = len(classes)
    if not n_total > open_way >= 1:
        raise DataError(f"need n_classes_total > open_way >= 1, got {n_total} and {open_way}")
    if batch_per_class < 1:
        raise DataError(f"batch_per_class must be >= 1, got {batch_per_class}")
    rows = class_samples or {}

    def members(c):
        return rows[c] if c in rows else dataset.class_index[c]

    for c in classes:
        if len(members(int(c))) < batch_per_class:
            raise DataError(f"class {int(c)} has {len(members(int(c)))} samples but needs {batch_per_class}")
    unseen_pos = np.sort(rng.choice(n_total, size=open_way, replace=False))
    mask = np.ones(n_total, dtype=bool)
    mask[unseen_pos] = False
    seen, unseen = classes[mask], classes[unseen_pos]
    q_idx, q_y, o_idx = [], [], []
    for k, c in enumerate(seen):
        q_idx.extend(rng.choice(members(int(c)), size=batch_per_class, replace=False))
        q_y.extend([k] * batch_per_class)
    for c in unseen:
        o_idx.extend(rng.choice(members(int(c)), size=batch_per_class, replace=False))
    return _build(dataset, seen, unseen, [], [], q_idx, q_y, o_idx)
