"""Acceptance criteria 1-9.

Each test records one PASS/FAIL line, printed in the terminal summary.
Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import math
import time

import numpy as np
import pytest

from peeler import checkpoint as ckpt
from peeler import tensor as T
from peeler.config import build_dataset, build_split, from_preset
from peeler.episodes import EpisodeConfig
from peeler.evaluation import auroc, evaluate
from peeler.losses import combined_loss, cross_entropy, open_set_entropy_loss
from peeler.model import PeelerModel, distance_euclidean, distance_mahalanobis, posteriors, restrict_to_seen
from peeler.optim import LrSchedule, episode_config, lr_at, train
from peeler.tensor import Tensor

from conftest import ACCEPTANCE_LINES
from gradcheck import REL_TOL, check

SEEDS = (0, 1, 2)
EVAL_EPISODES = 200


def record(number, ok, detail):
    ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def fit_and_eval(cfg, eval_cfgs):
    ds = build_dataset(cfg)
    sp = build_split(cfg, ds)
    st = train(ds, sp, cfg)
    return [evaluate(st.model, ds, sp, e, EVAL_EPISODES, base_seed=cfg.base_seed) for e in eval_cfgs]


# --- 1: gradients -----------------------------------------------------------


def random_gradient_case(rng):
    kind = ("euclidean", "mahalanobis")[rng.integers(2)]
    mode = ("fewshot", "largescale")[rng.integers(2)]
    with_open = bool(rng.integers(2))
    reduction = ("mean", "sum")[rng.integers(2)]
    lam = float(rng.uniform(0.1, 1.0)) if with_open else 0.0
    d_in, way = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    sizes = [d_in, int(rng.integers(3, 6)), int(rng.integers(2, 4))]
    n_learned = way + 2
    model = PeelerModel.build(sizes, kind, mode, rng, class_ids=range(n_learned))
    if mode == "largescale":
        # move learned precisions away from their all-zero start
        for p in model.head.parameters().values():
            p.data = p.data + rng.normal(size=p.shape)
    shot = int(rng.integers(1, 3))
    sx = rng.normal(size=(way * shot, d_in))
    sy = np.tile(np.arange(way), shot)
    qx, qy = rng.normal(size=(2 * way, d_in)), np.tile(np.arange(way), 2)
    ox = rng.normal(size=(3, d_in))
    seen = rng.choice(n_learned, size=way, replace=False)

    def loss():
        queries = (qx, ox) if with_open else (qx,)
        if mode == "fewshot":
            posts = model.fewshot_posteriors(sx, sy, way, *queries)
        else:
            posts = model.learned_posteriors(restrict_to_seen(model.head, seen), *queries)
        open_lp = posts[1].log_probs if with_open else None
        return combined_loss(posts[0].log_probs, qy, open_lp, lam, reduction).total

    return (kind, with_open), loss, model.parameters()


def test_criterion_1_gradients():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, covered = 0.0, set()
    for _ in range(50):
        tag, loss, params = random_gradient_case(rng)
        covered.add(tag)
        worst = max(worst, check(loss, params))
    elapsed = time.perf_counter() - t0
    ok = worst < REL_TOL and elapsed < 60 and len(covered) == 4
    record(1, ok, f"50 configs, worst rel err {worst:.2e} (< 1e-4), {elapsed:.1f}s (< 60s), head/loss combos {len(covered)}/4")


# --- 2: head reduction ------------------------------------------------------


def test_criterion_2_head_reduction():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        n, k, d = rng.integers(1, 8), rng.integers(2, 8), rng.integers(1, 10)
        scale = 10.0 ** rng.uniform(-2, 1)
        f = Tensor(rng.normal(size=(n, d)) * scale)
        mu = Tensor(rng.normal(size=(k, d)) * scale)
        e = posteriors(distance_euclidean(f, mu)).probs
        m = posteriors(distance_mahalanobis(f, mu, Tensor(np.ones((k, d))))).probs
        worst = max(worst, float(np.max(np.abs(e - m))))
    elapsed = time.perf_counter() - t0
    record(2, worst <= 1e-12 and elapsed < 5, f"1000 inputs, max |diff| {worst:.1e} (<= 1e-12), {elapsed:.2f}s (< 5s)")


# --- 3: AUROC oracle --------------------------------------------------------


def pairwise(s, u):
    diff = s[:, None] - u[None, :]
    return (np.sum(diff > 0) + 0.5 * np.sum(diff == 0)) / diff.size


def test_criterion_3_auroc_oracle():
    rng = np.random.default_rng(11)
    t0 = time.perf_counter()
    worst, min_tie, symmetric = 0.0, 1.0, True
    for _ in range(1000):
        ns, nu = rng.integers(1, 60), rng.integers(1, 60)
        levels = rng.integers(2, 12)
        scores = rng.integers(0, levels, size=ns + nu) / levels + rng.uniform(0, 1e-3, size=ns + nu)
        # plant a block of duplicates covering at least 10% of the scores
        dup = rng.choice(ns + nu, size=max(2, math.ceil(0.1 * (ns + nu))), replace=False)
        scores[dup] = scores[dup[0]]
        s, u = scores[:ns], scores[ns:]
        _, counts = np.unique(scores, return_counts=True)
        min_tie = min(min_tie, counts[counts > 1].sum() / scores.size)
        a = auroc(s, u)
        worst = max(worst, abs(a - pairwise(s, u)))
        symmetric &= a + auroc(u, s) == 1.0
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and symmetric and min_tie >= 0.10 and elapsed < 10
    record(
        3, ok,
        f"1000 sets, max |rank - pairwise| {worst:.1e}, min tied fraction {min_tie:.2f}, symmetry exact {symmetric}, {elapsed:.2f}s",
    )


# --- 4: loss bounds ---------------------------------------------------------


def test_criterion_4_loss_bounds():
    rng = np.random.default_rng(5)
    in_bounds = True
    for _ in range(2000):
        n = int(rng.integers(2, 12))
        lp = T.log_softmax(rng.normal(size=(int(rng.integers(1, 6)), n)) * 10.0 ** rng.uniform(-1, 3))
        v = float(open_set_entropy_loss(lp).data)
        in_bounds &= -math.log(n) - 1e-12 <= v <= 0.0
    uniform_err = max(
        abs(float(open_set_entropy_loss(T.log_softmax(np.zeros((3, n)))).data) + math.log(n)) for n in range(2, 21)
    )
    one_hot = float(open_set_entropy_loss(T.log_softmax([[0.0, -1e5, -1e5, -1e5, -1e5]])).data)
    ce_err = abs(float(cross_entropy(T.log_softmax(np.zeros((4, 5))), [0, 1, 2, 3]).data) - math.log(5))
    ok = in_bounds and uniform_err <= 1e-12 and one_hot == 0.0 and ce_err <= 1e-12
    record(
        4, ok,
        f"entropy term in [-ln N, 0]: {in_bounds}; uniform err {uniform_err:.1e}; one-hot {one_hot}; CE(uniform 5) err {ce_err:.1e}",
    )


# --- 5: open-set loss gain --------------------------------------------------

OPLOSS_TASK = dict(
    n_classes=20,
    dim=8,
    within_std=0.2,
    split=(0.5, 0.0, 0.5),
    allow_empty_split=True,
    head="euclidean",
    hidden=(128, 128),
    embed_dim=32,
    total_episodes=2000,
)


@pytest.mark.slow
def test_criterion_5_openset_loss_gain():
    rows, base_aurocs, arm_time = [], [], {0.0: 0.0, 0.5: 0.0}
    for seed in SEEDS:
        res = {}
        for lam in (0.0, 0.5):
            cfg = from_preset("desk", **OPLOSS_TASK, lam=lam, base_seed=seed)
            t0 = time.perf_counter()
            (rep,) = fit_and_eval(cfg, [episode_config(cfg)])
            arm_time[lam] += time.perf_counter() - t0
            res[lam] = rep
        base_aurocs.append(res[0.0].auroc_mean)
        gain = res[0.5].auroc_mean > res[0.0].auroc_mean
        drop = res[0.0].accuracy_mean - res[0.5].accuracy_mean
        rows.append((gain, drop < 0.02))
        ACCEPTANCE_LINES.append(
            f"    seed {seed}: acc {res[0.0].accuracy_mean:.4f} -> {res[0.5].accuracy_mean:.4f}, "
            f"auroc {res[0.0].auroc_mean:.4f} -> {res[0.5].auroc_mean:.4f}"
        )
    band = all(0.70 <= a <= 0.90 for a in base_aurocs)
    wins = sum(g for g, _ in rows)
    small_drop = all(d for _, d in rows)
    slowest = max(arm_time.values())
    ok = wins == 3 and small_drop and band and slowest < 600
    record(
        5, ok,
        f"AUROC gain in {wins}/3 seeds, accuracy drop < 2 points in all: {small_drop}, "
        f"baseline AUROC in [0.70, 0.90]: {band}, slowest arm (3 seeds) {slowest:.0f}s (< 600s)",
    )


# --- 6: way effect ----------------------------------------------------------

WAY_TASK = dict(n_classes=40, dim=8, within_std=0.001, split=(0.5, 0.0, 0.5), allow_empty_split=True)


@pytest.mark.slow
def test_criterion_6_way_effect():
    wins = 0
    for seed in SEEDS:
        cfg = from_preset("desk", **WAY_TASK, base_seed=seed)
        five, ten = fit_and_eval(cfg, [EpisodeConfig(5, 1, 15, 5, 15), EpisodeConfig(10, 1, 15, 5, 15)])
        wins += ten.auroc_mean >= five.auroc_mean
        ACCEPTANCE_LINES.append(
            f"    seed {seed}: 5-way acc {five.accuracy_mean:.4f} auroc {five.auroc_mean:.4f} | "
            f"10-way acc {ten.accuracy_mean:.4f} auroc {ten.auroc_mean:.4f}"
        )
    record(6, wins >= 2, f"10-way AUROC >= 5-way AUROC in {wins}/3 seeds (majority needed)")


# --- 7: ceiling -------------------------------------------------------------

CEILING_TASK = dict(n_classes=20, dim=16, within_std=0.001, split=(0.5, 0.0, 0.5), allow_empty_split=True)


@pytest.mark.slow
def test_criterion_7_ceiling():
    results = []
    for seed in SEEDS:
        cfg = from_preset("desk", **CEILING_TASK, base_seed=seed)
        (rep,) = fit_and_eval(cfg, [episode_config(cfg)])
        results.append((rep.accuracy_mean, rep.auroc_mean))
    ok = all(a >= 0.95 and u >= 0.95 for a, u in results)
    detail = ", ".join(f"seed {s}: acc {a:.4f} auroc {u:.4f}" for s, (a, u) in zip(SEEDS, results))
    record(7, ok, f"{detail} (both >= 0.95)")


# --- 8: determinism and resume ----------------------------------------------


def test_criterion_8_determinism_and_resume(tmp_path):
    cfg = from_preset("desk", total_episodes=300, milestones=(150, 250), base_seed=17)
    ds = build_dataset(cfg)
    sp = build_split(cfg, ds)

    def saved(state, name):
        ckpt.save_checkpoint(tmp_path / name, state, cfg)
        return (tmp_path / name).read_bytes()

    a = saved(train(ds, sp, cfg), "a.json")
    b = saved(train(ds, sp, cfg), "b.json")
    half = train(ds, sp, cfg, until=120)
    saved(half, "half.json")
    restored = ckpt.load_state(ckpt.read_checkpoint(tmp_path / "half.json"), cfg, ds, sp)
    c = saved(train(ds, sp, cfg, state=restored), "c.json")

    model = ckpt.load_state(ckpt.read_checkpoint(tmp_path / "a.json"), cfg, ds, sp).model
    ecfg = episode_config(cfg)
    r1 = evaluate(model, ds, sp, ecfg, 50, base_seed=3)
    r2 = evaluate(model, ds, sp, ecfg, 50, base_seed=3)
    same_report = r1.summary() == r2.summary() and [x.as_record() for x in r1.episodes] == [
        x.as_record() for x in r2.episodes
    ]
    ok = a == b and a == c and same_report
    record(8, ok, f"repeat run bitwise equal: {a == b}; resume at 120/300 bitwise equal: {a == c}; reports equal: {same_report}")


# --- 9: schedule ------------------------------------------------------------


def test_criterion_9_schedule():
    cfg = from_preset("paper-fewshot")
    sched = LrSchedule(cfg.milestones, cfg.lr_factor)
    got = [lr_at(sched, cfg.base_lr, e) for e in (9999, 10000, 20000)]
    ok = all(math.isclose(g, w, rel_tol=1e-12) for g, w in zip(got, (1e-3, 1e-4, 1e-5)))
    record(9, ok, "lr at 9999/10000/20000 = " + " / ".join(f"{g:.0e}" for g in got))
