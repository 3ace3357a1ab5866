"""Adam, milestone learning-rate decay and the episodic training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .episodes import EpisodeConfig, sample_fewshot_episode, sample_largescale_batch
from .losses import combined_loss
from .model import PeelerModel, restrict_to_seen
from .seeding import derive_rng

logger = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    base_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rejected_steps: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update.

    ``params`` and ``grads`` map names to arrays. Returns the updated
    parameter dict; ``state`` is advanced in place. A non-finite gradient
    leaves both untouched and counts a rejected step.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and np.shape(g) != np.shape(p):
            raise ValueError(f"gradient for {name} has shape {np.shape(g)}, parameter has {np.shape(p)}")
    if not all(np.all(np.isfinite(g)) for g in grads.values() if g is not None):
        state.rejected_steps += 1
        logger.warning("non-finite gradient at Adam step %d; update skipped", state.t + 1)
        return params
    b1, b2 = state.beta1, state.beta2
    t = state.t + 1
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        state.m[name] = m
        state.v[name] = v
    state.t = t
    return out


@dataclass(frozen=True)
class LrSchedule:
    milestones: tuple[int, ...] = ()
    factor: float = 0.1

    def __post_init__(self):
        ms = tuple(int(m) for m in self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {ms}")
        if not 0 < self.factor < 1:
            raise ValueError(f"decay factor must lie in (0, 1), got {self.factor}")
        object.__setattr__(self, "milestones", ms)


def lr_at(schedule: LrSchedule, base_lr: float, episode: int) -> float:
    passed = sum(1 for m in schedule.milestones if m <= episode)
    return base_lr * schedule.factor**passed


@dataclass(eq=False)
class TrainLoopState:
    episode: int
    model: PeelerModel
    adam: AdamState
    base_seed: int
    running: dict = field(default_factory=lambda: {"n": 0, "closed_ce": 0.0, "open_entropy": 0.0, "total": 0.0})

    def parameters(self) -> dict:
        return self.model.parameters()


def holdout_rows(dataset, classes, fraction: float, seed: int):
    """Split each class's rows into (train, held-out) sets for large-scale runs."""
    train, held = {}, {}
    for c in classes:
        rows = dataset.class_index[int(c)]
        perm = derive_rng(seed, "holdout", int(c)).permutation(rows)
        n_hold = int(round(fraction * len(rows)))
        held[int(c)] = np.sort(perm[:n_hold])
        train[int(c)] = np.sort(perm[n_hold:])
    return train, held


def model_sizes(config, d_in: int) -> list[int]:
    return [d_in, *config.hidden, config.embed_dim]


def init_state(config, dataset, split) -> TrainLoopState:
    rng = derive_rng(config.base_seed, "init")
    model = PeelerModel.build(
        model_sizes(config, dataset.dim), config.head, config.mode, rng, class_ids=split.train_classes
    )
    return TrainLoopState(0, model, AdamState(base_lr=config.base_lr), config.base_seed)


def episode_config(config) -> EpisodeConfig:
    return EpisodeConfig(
        way=config.way,
        shot=config.shot,
        query_per_class=config.query_per_class,
        open_way=config.open_way,
        open_query_per_class=config.open_query_per_class,
    )


def episode_loss(state: TrainLoopState, config, dataset, split, episode_index: int, train_rows=None):
    """Sample episode ``episode_index`` and return its loss breakdown (recorded on the active tape)."""
    rng = derive_rng(config.base_seed, "train-episode", episode_index)
    model = state.model
    want_open = config.open_way > 0
    if config.mode == "fewshot":
        ep = sample_fewshot_episode(dataset, split.train_classes, episode_config(config), rng)
        queries = (ep.query_x, ep.open_x) if want_open else (ep.query_x,)
        posts = model.fewshot_posteriors(ep.support_x, ep.support_y, ep.way, *queries)
    else:
        ep = sample_largescale_batch(
            dataset, split.train_classes, config.open_way, config.batch_per_class, rng, class_samples=train_rows
        )
        head = restrict_to_seen(model.head, ep.seen_classes)
        posts = model.learned_posteriors(head, ep.query_x, ep.open_x)
    open_lp = posts[1].log_probs if len(posts) > 1 else None
    return combined_loss(posts[0].log_probs, ep.query_y, open_lp, config.lam, config.reduction)


def _clip(grads: dict, max_norm: float) -> dict:
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm > 0:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}
    return grads


def train_episode(state: TrainLoopState, config, dataset, split, train_rows=None) -> dict:
    """Run one optimization step; returns the loss record."""
    e = state.episode
    params = state.parameters()
    for p in params.values():
        p.zero_grad()
    with T.Tape() as tape:
        br = episode_loss(state, config, dataset, split, e, train_rows)
    if not np.isfinite(br.total.data):
        raise NumericalError(
            f"non-finite loss at episode {e} (episode seed: base_seed={config.base_seed}, index={e})"
        )
    T.backward(br.total, tape)
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    if config.grad_clip > 0:
        grads = _clip(grads, config.grad_clip)
    lr = lr_at(LrSchedule(tuple(config.milestones), config.lr_factor), config.base_lr, e)
    new = adam_step({k: p.data for k, p in params.items()}, grads, state.adam, lr)
    for k, p in params.items():
        p.data = new[k]
        p.zero_grad()
    rec = br.as_record()
    run = state.running
    run["n"] += 1
    for key in ("closed_ce", "total"):
        run[key] += rec[key]
    run["open_entropy"] += rec["open_entropy"] or 0.0
    state.episode = e + 1
    rec["lr"] = lr
    return rec


def train(
    dataset,
    split,
    config,
    state: TrainLoopState | None = None,
    until: int | None = None,
    on_log: Callable[[dict], None] | None = None,
    on_checkpoint: Callable[[TrainLoopState], None] | None = None,
) -> TrainLoopState:
    """Train from ``state`` (fresh if None) up to ``until`` episodes (default: config.total_episodes)."""
    if state is None:
        state = init_state(config, dataset, split)
    stop = config.total_episodes if until is None else until
    train_rows = None
    if config.mode == "largescale":
        train_rows, _ = holdout_rows(dataset, split.train_classes, config.holdout_fraction, config.base_seed)
    t0 = time.perf_counter()
    while state.episode < stop:
        rec = train_episode(state, config, dataset, split, train_rows)
        if on_log is not None and config.log_every > 0 and state.episode % config.log_every == 0:
            run = state.running
            n = max(run["n"], 1)
            on_log(
                {
                    "episode": state.episode,
                    "lr": rec["lr"],
                    "closed_ce": run["closed_ce"] / n,
                    "open_entropy": run["open_entropy"] / n if config.open_way > 0 else None,
                    "lambda": config.lam,
                    "total": run["total"] / n,
                    "wall_time": round(time.perf_counter() - t0, 3),
                }
            )
            state.running = {"n": 0, "closed_ce": 0.0, "open_entropy": 0.0, "total": 0.0}
        if on_checkpoint is not None and config.checkpoint_every > 0 and state.episode % config.checkpoint_every == 0:
            on_checkpoint(state)
    return state
