"""Accuracy, rejection scores, AUROC and repeated-episode evaluation."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .datasets import DataError
from .episodes import EpisodeConfig, sample_fewshot_episode
from .optim import holdout_rows
from .seeding import derive_rng

Z95 = 1.96
SCORE_CONVENTION = "positives are seen-class queries; score = max seen-class posterior probability"
INTERVAL_CONVENTION = "half-width = 1.96 * sample std / sqrt(n_episodes) (95% normal approximation)"


def rejection_score(probs) -> float:
    return float(np.max(probs))


def accuracy(log_probs, labels) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    lp = np.asarray(getattr(log_probs, "data", log_probs))
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("accuracy of an empty query set")
    return float(np.mean(np.argmax(lp, axis=1) == labels))


def auroc(seen_scores, unseen_scores) -> float:
    """Mann-Whitney area with midranks: P(seen > unseen) + 0.5 P(tie)."""
    s = np.asarray(seen_scores, dtype=np.float64).ravel()
    u = np.asarray(unseen_scores, dtype=np.float64).ravel()
    if s.size == 0 or u.size == 0:
        raise ValueError("auroc needs nonempty seen and unseen populations")
    ranks = rankdata(np.concatenate([s, u]), method="average")
    n_s, n_u = s.size, u.size
    # rank sums of midranks are multiples of 0.5, so this is exact for moderate n
    u_stat = ranks[:n_s].sum() - n_s * (n_s + 1) / 2.0
    return float(u_stat / (n_s * n_u))


@dataclass
class EvalEpisodeResult:
    index: int
    accuracy: float
    seen_scores: np.ndarray
    unseen_scores: np.ndarray
    auroc: float | None

    def as_record(self) -> dict:
        return {
            "episode": self.index,
            "accuracy": self.accuracy,
            "auroc": self.auroc,
            "n_seen": int(self.seen_scores.size),
            "n_unseen": int(self.unseen_scores.size),
        }


def _mean_halfwidth(values) -> tuple[float, float | None]:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 1:
        return float(v[0]), None
    return float(v.mean()), float(Z95 * v.std(ddof=1) / math.sqrt(v.size))


@dataclass
class AggregateReport:
    n_episodes: int
    accuracy_mean: float
    accuracy_halfwidth: float | None
    auroc_mean: float | None
    auroc_halfwidth: float | None
    episodes: list = field(default_factory=list)

    @classmethod
    def from_results(cls, results: list[EvalEpisodeResult]) -> "AggregateReport":
        if not results:
            raise ValueError("no evaluation episodes")
        results = sorted(results, key=lambda r: r.index)
        acc_m, acc_h = _mean_halfwidth([r.accuracy for r in results])
        aurocs = [r.auroc for r in results if r.auroc is not None]
        au_m, au_h = _mean_halfwidth(aurocs) if aurocs else (None, None)
        return cls(len(results), acc_m, acc_h, au_m, au_h, results)

    def summary(self) -> dict:
        return {
            "n_episodes": self.n_episodes,
            "accuracy": {"mean": self.accuracy_mean, "halfwidth": self.accuracy_halfwidth},
            "auroc": None if self.auroc_mean is None else {"mean": self.auroc_mean, "halfwidth": self.auroc_halfwidth},
            "score_convention": SCORE_CONVENTION,
            "interval": INTERVAL_CONVENTION,
        }

    def format(self) -> str:
        def pm(m, h):
            return f"{100 * m:.2f}" + ("" if h is None else f" +- {100 * h:.2f}")

        acc = pm(self.accuracy_mean, self.accuracy_halfwidth)
        au = "absent" if self.auroc_mean is None else pm(self.auroc_mean, self.auroc_halfwidth)
        return f"episodes={self.n_episodes} accuracy(%)={acc} auroc(%)={au}"


def _episode_result(index, acc, closed_post, open_post) -> EvalEpisodeResult:
    seen = closed_post.scores
    unseen = open_post.scores if open_post is not None else np.zeros(0)
    # ranked by log-probability: exp() maps near-certain posteriors to exactly 1.0
    au = auroc(closed_post.log_scores, open_post.log_scores) if unseen.size else None
    return EvalEpisodeResult(index, acc, seen, unseen, au)


def evaluate_fewshot_episode(model, dataset, classes, cfg: EpisodeConfig, base_seed: int, index: int):
    ep = sample_fewshot_episode(dataset, classes, cfg, derive_rng(base_seed, "eval-episode", index))
    queries = (ep.query_x, ep.open_x) if cfg.open_way > 0 else (ep.query_x,)
    posts = model.fewshot_posteriors(ep.support_x, ep.support_y, ep.way, *queries)
    acc = accuracy(posts[0].log_probs, ep.query_y)
    return _episode_result(index, acc, posts[0], posts[1] if len(posts) > 1 else None)


def evaluate_largescale_episode(model, dataset, open_classes, held, cfg: EpisodeConfig, base_seed: int, index: int):
    """Closed queries: held-out rows of every learned class; open queries: unseen test classes."""
    rng = derive_rng(base_seed, "eval-episode", index)
    seen = model.head.class_ids
    q_idx, q_y = [], []
    for k, c in enumerate(seen):
        rows = held[c]
        if len(rows) < cfg.query_per_class:
            raise DataError(f"class {c} has {len(rows)} held-out samples but needs {cfg.query_per_class}")
        q_idx.extend(rng.choice(rows, size=cfg.query_per_class, replace=False))
        q_y.extend([k] * cfg.query_per_class)
    o_idx = []
    if cfg.open_way > 0:
        if len(open_classes) < cfg.open_way:
            raise DataError(f"{len(open_classes)} test classes available but open_way is {cfg.open_way}")
        for c in rng.choice(np.asarray(open_classes), size=cfg.open_way, replace=False):
            o_idx.extend(rng.choice(dataset.class_index[int(c)], size=cfg.open_query_per_class, replace=False))
    x = dataset.features
    queries = [x[np.asarray(q_idx, dtype=np.int64)]]
    if o_idx:
        queries.append(x[np.asarray(o_idx, dtype=np.int64)])
    posts = model.learned_posteriors(model.head, *queries)
    acc = accuracy(posts[0].log_probs, np.asarray(q_y))
    return _episode_result(index, acc, posts[0], posts[1] if len(posts) > 1 else None)


def evaluate(
    model,
    dataset,
    split,
    cfg: EpisodeConfig,
    n_episodes: int = 600,
    base_seed: int = 0,
    mode: str = "fewshot",
    holdout_fraction: float = 0.2,
    holdout_seed: int = 0,
    workers: int = 1,
) -> AggregateReport:
    """Score ``n_episodes`` evaluation episodes drawn from the test classes.

    Episode i always uses the generator derived from (base_seed, i), so the
    report does not depend on ``workers``.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    test = list(split.test_classes)
    if mode == "fewshot":
        if len(test) < cfg.way + cfg.open_way:
            raise DataError(f"{len(test)} test classes but evaluation needs {cfg.way + cfg.open_way}")

        def run(i):
            return evaluate_fewshot_episode(model, dataset, test, cfg, base_seed, i)

    elif mode == "largescale":
        _, held = holdout_rows(dataset, split.train_classes, holdout_fraction, holdout_seed)

        def run(i):
            return evaluate_largescale_episode(model, dataset, test, held, cfg, base_seed, i)

    else:
        raise ValueError(f"unknown mode {mode!r}")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(n_episodes)))
    else:
        results = [run(i) for i in range(n_episodes)]
    return AggregateReport.from_results(results)
