"""End-to-end acceptance checks at desk scale.

Each test prints one ``PASS``/``FAIL`` line (also collected into the terminal
summary) and then asserts the criterion at its stated tolerance.
"""
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from conftest import ACCEPTANCE_LINES
from taskdisc import diffcore as dc
from taskdisc.agreement import (
    StochasticityConfig, TrainConfig, agreement_score, predict, prop1_bounds_check, proxy_agreement,
    train_classifier,
)
from taskdisc.data import SplitSpec, SyntheticSpec, generate_synthetic, split_dataset
from taskdisc.diffcore import MlpSpec
from taskdisc.discovery import DiscoveryConfig, discover, init_state, lambda_sweep, meta_objective
from taskdisc.splits import (
    ClassPartition, adversarial_split, adversarial_split_multiclass, as_difference_experiment,
    evaluate_split, matched_random_split,
)
from taskdisc.tasks import (
    Task, acceptance_cost, least_predictable_coord, naive_random_discovery, permute_columns,
    pixel_threshold_task, planted_task, random_network_task, random_task, similarity,
    similarity_matrix,
)

pytestmark = pytest.mark.slow

SWEEP_LAMBDAS = [0.0, 0.1, 0.3, 1.0, 3.0]


def record(n, name, ok, detail, elapsed=None):
    t = f" [{elapsed:.1f}s]" if elapsed is not None else ""
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {name}: {detail}{t}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


@pytest.fixture(scope="module")
def sep_data():
    ds = generate_synthetic(SyntheticSpec(2048, 32, 4, 0.1), 0)
    return ds, split_dataset(ds, 0.1, 0)


@pytest.fixture(scope="module")
def rich_data():
    """16 planted factors in 32 dimensions: room for 8 nearly independent discovered tasks."""
    ds = generate_synthetic(SyntheticSpec(2048, 32, 16, 0.1), 0)
    return ds, split_dataset(ds, 0.1, 0)


@pytest.fixture(scope="module")
def pixel_data():
    ds = generate_synthetic(SyntheticSpec(2048, 16, 16, 0.0), 0)
    return ds, split_dataset(ds, 0.1, 0)


@pytest.fixture(scope="module")
def sweep(rich_data):
    ds, split = rich_data
    base = DiscoveryConfig(d=8, outer_steps=300)
    t0 = time.time()
    rows = lambda_sweep(ds, split, base, SWEEP_LAMBDAS, measure_as=False)
    ok = [r for r in rows if r["lambda"] > 0 and r["max_similarity"] <= 0.6]
    lam = min(r["lambda"] for r in ok) if ok else max(SWEEP_LAMBDAS)
    res = discover(ds, split, DiscoveryConfig.from_dict({**base.to_dict(), "lam": lam}))
    return {"rows": rows, "lam": lam, "result": res, "seconds": time.time() - t0}


def test_c1_determinism(sep_data):
    ds, split = sep_data
    t0 = time.time()
    res = agreement_score(ds, planted_task(ds, 0), split, TrainConfig(), StochasticityConfig.fixed(), 4)
    el = time.time() - t0
    ok = res.mean == 1.0 and all(a == 1.0 for a in res.per_pair) and el < 60
    record(1, "fixed stochasticity gives AS = 1", ok, f"AS={res.mean!r} per_pair={res.per_pair}", el)
    assert ok


def test_c2_separation(sep_data):
    ds, split = sep_data
    t0 = time.time()
    cfg, stoch = TrainConfig(), StochasticityConfig()
    planted = [agreement_score(ds, planted_task(ds, f), split, cfg, stoch, 4).mean for f in range(4)]
    rand = [agreement_score(ds, random_task(ds.ids, s), split, cfg, stoch, 4).mean for s in range(4)]
    el = time.time() - t0
    gap = np.mean(planted) - np.mean(rand)
    ok = gap >= 0.15 and el < 600
    record(2, "planted vs random AS gap >= 0.15", ok,
           f"planted={np.mean(planted):.4f} random={np.mean(rand):.4f} gap={gap:.4f}", el)
    assert ok


def test_c3_meta_gradient():
    t0 = time.time()
    ds = generate_synthetic(SyntheticSpec(16, 4, 2, 0.1), 1)
    split = SplitSpec(ds.ids, [])
    cfg = DiscoveryConfig(d=3, encoder_hidden=(5,), inner_hidden=(6,), inner_batch=4, inner_steps=3,
                          early_stop=False)
    state = init_state(ds, cfg)
    coords = np.random.default_rng(0).choice(state.encoder.data.size, 8, replace=False)
    proxy_err = dc.finite_diff_check(lambda w: meta_objective(w, state, ds, split, cfg, 0)[1].loss,
                                     state.encoder, coords=coords)
    total_err = dc.finite_diff_check(lambda w: meta_objective(w, state, ds, split, cfg, 0)[0],
                                     state.encoder, coords=coords)
    el = time.time() - t0
    ok = max(proxy_err, total_err) <= 1e-3 and el < 60
    record(3, "3-step unroll gradient vs finite differences", ok,
           f"proxy rel err={proxy_err:.2e} meta-objective rel err={total_err:.2e}", el)
    assert ok


def test_c4_discovery(rich_data, sweep):
    ds, split = rich_data
    t0 = time.time()
    tasks = sweep["result"].tasks
    S = similarity_matrix(tasks)
    np.fill_diagonal(S, 0)
    cfg, stoch = TrainConfig(), StochasticityConfig().reseeded(11)
    disc_as = [agreement_score(ds, t, split, cfg, stoch, 2).mean for t in tasks]
    base_as = [agreement_score(ds, random_task(ds.ids, 100 + s), split, cfg, stoch, 2).mean
               for s in range(4)]
    el = time.time() - t0 + sweep["seconds"]
    ok = len(tasks) == 8 and np.mean(disc_as) >= np.mean(base_as) + 0.15 and S.max() <= 0.6 and el < 7200
    record(4, "discovered tasks: high AS, low similarity", ok,
           f"lambda={sweep['lam']} mean AS={np.mean(disc_as):.4f} random baseline={np.mean(base_as):.4f} "
           f"max pairwise similarity={S.max():.4f}", el)
    assert ok


def test_lambda_zero_collapses_tasks(sweep):
    by = {r["lambda"]: r["mean_max_similarity"] for r in sweep["rows"]}
    assert by[0.0] == max(by.values())
    assert by[0.0] > by[sweep["lam"]] + 0.1
    assert all(0.5 <= v <= 1.0 for v in by.values())


def battery(ds):
    tasks = [planted_task(ds, f) for f in range(4)]
    tasks += [random_task(ds.ids, s) for s in range(4)]
    tasks += [pixel_threshold_task(ds, c) for c in range(4)]
    tasks += [random_network_task(ds, MlpSpec.make(ds.D, (64,) * h, 1), h) for h in range(1, 5)]
    return tasks


def test_c5_proxy_fidelity(rich_data, sweep):
    ds, split = rich_data
    t0 = time.time()
    tasks = battery(ds) + sweep["result"].tasks[:4]
    inner = TrainConfig(optimizer="sgd", lr=0.5, batch_size=64, steps=25)
    full = [agreement_score(ds, t, split, TrainConfig(), StochasticityConfig(), 2).mean for t in tasks]
    prox = [proxy_agreement(ds, t, split, inner, StochasticityConfig().reseeded(5), 3) for t in tasks]
    rho = spearmanr(full, prox)[0]
    el = time.time() - t0
    ok = len(tasks) == 20 and rho >= 0.7 and el < 3600
    record(5, "proxy vs full AS rank correlation >= 0.7", ok, f"spearman={rho:.4f} over {len(tasks)} tasks", el)
    assert ok


def test_c6_pixel_task(pixel_data):
    ds, split = pixel_data
    t0 = time.time()
    coord = least_predictable_coord(ds)
    t = pixel_threshold_task(ds, coord)
    cfg, stoch = TrainConfig(), StochasticityConfig()
    as_val = agreement_score(ds, t, split, cfg, stoch, 4).mean
    X = ds.X(split.test_ids)
    y = t.labels_for(split.test_ids)
    others = [c for c in range(ds.D) if c != coord]
    rng = np.random.default_rng(0)
    X_coord, X_others = permute_columns(X, [coord], rng), permute_columns(X, others, rng)
    accs = {"intact": [], "coord": [], "others": []}
    for r in range(4):
        params, info = train_classifier(ds, t, split, cfg, stoch, r, return_info=True)
        for key, Xs in (("intact", X), ("coord", X_coord), ("others", X_others)):
            accs[key].append(np.mean(predict(params, info["spec"], Xs) == y))
    a = {k: float(np.mean(v)) for k, v in accs.items()}
    el = time.time() - t0
    ok = as_val >= 0.9 and a["intact"] >= 0.9 and abs(a["coord"] - 0.5) <= 0.05 and a["others"] >= 0.85
    record(6, "pixel-threshold task relies on its coordinate", ok,
           f"coord={coord} AS={as_val:.4f} acc={a['intact']:.4f} coord shuffled={a['coord']:.4f} "
           f"others shuffled={a['others']:.4f}", el)
    assert ok


def test_c7_adversarial_split(pixel_data):
    ds, _ = pixel_data
    t0 = time.time()
    target = planted_task(ds, 0)
    sims = [similarity(target, pixel_threshold_task(ds, c)) for c in range(ds.D)]
    distractor = pixel_threshold_task(ds, int(np.argmin(np.abs(np.array(sims) - 0.5))))
    cfg, stoch = TrainConfig(), StochasticityConfig()
    adv = adversarial_split(target, distractor, min_side=2 * cfg.batch_size)
    matched = matched_random_split(target, adv, seed=0)
    ra = evaluate_split(ds, adv, target, cfg, stoch, n_runs=4)
    rm = evaluate_split(ds, matched, target, cfg, stoch, n_runs=4)
    el = time.time() - t0
    drop = rm.acc_mean - ra.acc_mean
    ok = drop >= 0.2
    record(7, "adversarial split lowers accuracy by >= 0.2", ok,
           f"adversarial={ra.acc_mean:.4f} matched random={rm.acc_mean:.4f} drop={drop:.4f}", el)
    assert ok


def test_c8_agreement_bounds(sep_data):
    ds, split = sep_data
    t0 = time.time()
    tasks = {"planted": planted_task(ds, 0), "random": random_task(ds.ids, 0),
             "pixel": pixel_threshold_task(ds, 0),
             "random-net": random_network_task(ds, MlpSpec.make(ds.D, (64,), 1), 0)}
    reports = {k: prop1_bounds_check(ds, t, split, TrainConfig(), StochasticityConfig(), 8, 100, seed=1)
               for k, t in tasks.items()}
    el = time.time() - t0
    worst_upper = min(r.upper_slack for r in reports.values())
    worst_lower = min(r.min_lower_slack for r in reports.values())
    n_checked = sum(1 + len(r.lower_slacks) for r in reports.values())
    ok = all(r.violations == 0 and len(r.lower_slacks) == 101 for r in reports.values()) \
        and worst_upper >= -1e-6 and worst_lower >= -1e-6
    record(8, "agreement bounds on shared pools", ok,
           f"{n_checked} inequalities, min upper slack={worst_upper:.3e} min lower slack={worst_lower:.3e}", el)
    assert ok


def test_c9_as_difference_correlation(rich_data):
    ds, split = rich_data
    t0 = time.time()
    tasks = [planted_task(ds, 0), planted_task(ds, 1), pixel_threshold_task(ds, 0),
             pixel_threshold_task(ds, 1), random_network_task(ds, MlpSpec.make(ds.D, (64,), 1), 1),
             random_network_task(ds, MlpSpec.make(ds.D, (64,) * 3, 1), 3), random_task(ds.ids, 0)]
    pairs = [(tasks[i], tasks[j]) for i in range(7) for j in range(7) if i != j]
    rows = as_difference_experiment(pairs, ds, TrainConfig(), StochasticityConfig(), split,
                                    n_pairs=2, n_runs=1, with_as_on_split=False)
    rho = spearmanr([r["as_diff"] for r in rows], [r["acc"] for r in rows])[0]
    el = time.time() - t0
    ok = len(rows) >= 20 and rho > 0
    record(9, "AS difference predicts adversarial-split accuracy", ok,
           f"spearman={rho:.4f} over {len(rows)} pairs", el)
    assert ok


def test_c10_multiclass_reduction():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    mismatches = 0
    for case in range(50):
        n = int(rng.integers(20, 400))
        ids = np.sort(rng.choice(10 * n, n, replace=False))
        t = Task(ids, rng.integers(0, 2, n))
        d = Task(ids, rng.integers(0, 2, n))
        try:
            ref = adversarial_split(t, d)
        except Exception:
            continue
        a = adversarial_split_multiclass(t, d, ClassPartition({1}, {0}))
        b = adversarial_split_multiclass(t, d, ClassPartition({0}, {1}))
        flipped = adversarial_split(t.flipped(), d)
        mismatches += not (np.array_equal(a.train_ids, ref.train_ids)
                           and np.array_equal(a.test_ids, ref.test_ids)
                           and np.array_equal(b.train_ids, flipped.train_ids)
                           and np.array_equal(b.test_ids, flipped.test_ids))
    ok = mismatches == 0
    record(10, "K=2 multi-class split equals the binary split", ok,
           f"{mismatches} mismatches over 50 randomized cases", time.time() - t0)
    assert ok


def test_c11_random_network_tasks(rich_data):
    ds, _ = rich_data
    t0 = time.time()
    balanced = True
    for n in (2048, 777):
        sub = generate_synthetic(SyntheticSpec(n, 8, 2), 1)
        for h in (1, 2, 3):
            t = random_network_task(sub, MlpSpec.make(8, (64,) * h, 1), h)
            balanced &= int(t.labels.sum()) == n // 2
    monotone, curves = 0, []
    for seed in range(5):
        res = naive_random_discovery(ds, 0.55, 10, 5000, seed=seed)
        cost = acceptance_cost(ds, res.tasks, 0.55, n_hits=16, max_draws=20_000, seed=seed)
        curves.append([round(float(c), 2) for c in cost])
        monotone += len(res.tasks) == 10 and all(b >= a for a, b in zip(cost, cost[1:]))
    ok = balanced and monotone >= 4
    record(11, "random-network tasks balanced, naive discovery cost grows", ok,
           f"balanced={balanced} monotone in {monotone}/5 seeds; costs={curves}", time.time() - t0)
    assert ok
