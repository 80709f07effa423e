import numpy as np
import pytest

from taskdisc.agreement import StochasticityConfig, TrainConfig
from taskdisc.data import SyntheticSpec, generate_synthetic, split_dataset
from taskdisc.errors import ContractError, DegenerateSplitError, UnsupportedArityError
from taskdisc.splits import (
    ClassPartition, SplitReport, adversarial_split, adversarial_split_multiclass,
    as_difference_experiment, evaluate_split, matched_random_split,
)
from taskdisc.tasks import Task, planted_multiclass, planted_task, random_task

CFG = TrainConfig(hidden=(32,), lr=1e-2, epochs=20)


def test_identical_and_complement_distractors_degenerate(small_ds):
    t = planted_task(small_ds, 0)
    with pytest.raises(DegenerateSplitError):
        adversarial_split(t, t)
    with pytest.raises(DegenerateSplitError):
        adversarial_split(t, t.flipped())


def test_independent_tasks_split_near_half():
    """|train| = 2X with X the hypergeometric overlap of the two sets of 500 ones."""
    from scipy.stats import hypergeom
    ids = np.arange(1000)
    sizes = []
    for s in range(200):
        split = adversarial_split(random_task(ids, 2 * s), random_task(ids, 2 * s + 1))
        assert split.n_train % 2 == 0 and split.n_train + split.n_test == 1000
        sizes.append(split.n_train)
    within = np.mean(np.abs(np.array(sizes) - 500) <= 30)
    X = hypergeom(1000, 500, 500)
    p = X.cdf(265) - X.cdf(234)
    assert p > 0.9 and abs(within - p) <= 4 * np.sqrt(p * (1 - p) / 200)
    assert abs(np.mean(sizes) - 500) <= 4 * 2 * X.std() / np.sqrt(200)


def test_adversarial_split_definition(small_ds):
    t, d = planted_task(small_ds, 0), planted_task(small_ds, 1)
    split = adversarial_split(t, d)
    assert np.all(t.labels_for(split.train_ids) == d.labels_for(split.train_ids))
    assert np.all(t.labels_for(split.test_ids) != d.labels_for(split.test_ids))
    assert split.balance["train"] == np.bincount(t.labels_for(split.train_ids), minlength=2).tolist()
    with pytest.raises(UnsupportedArityError):
        adversarial_split(planted_multiclass(small_ds, [0, 1]), d)


def test_multiclass_binary_reduction():
    ids = np.arange(300)
    for s in range(10):
        t, d = random_task(ids, s), random_task(ids, 100 + s)
        ref = adversarial_split(t, d)
        same = adversarial_split_multiclass(t, d, ClassPartition({1}, {0}))
        assert np.array_equal(same.train_ids, ref.train_ids) and np.array_equal(same.test_ids, ref.test_ids)
        # C1={0} relabels the target, which swaps the two sides
        swapped = adversarial_split_multiclass(t, d, ClassPartition({0}, {1}))
        assert np.array_equal(swapped.train_ids, ref.test_ids)


def test_multiclass_sides_balanced():
    r = np.random.default_rng(0)
    ids = np.arange(4000)
    t = Task(ids, np.repeat(np.arange(4), 1000)[r.permutation(4000)], "random", 4)
    split = adversarial_split_multiclass(t, random_task(ids, 5), ClassPartition.random_equal(4, 3))
    assert abs(split.n_train - 2000) <= 100


def test_multiclass_validation(small_ds):
    t = planted_multiclass(small_ds, [0, 1])
    with pytest.raises(ContractError):
        adversarial_split_multiclass(t, planted_task(small_ds, 2), ClassPartition({0}, {1}))
    with pytest.raises(UnsupportedArityError):
        adversarial_split_multiclass(t, t, ClassPartition({0, 1}, {2, 3}))
    for bad in (({0}, {0, 1}), (set(), {0}), ({0}, {2})):
        with pytest.raises(ContractError):
            ClassPartition(*bad)
    p = ClassPartition.random_equal(5, 0)
    assert len(p.C1) == 3 and len(p.C2) == 2 and p.K == 5


def test_matched_random_split_statistics(small_ds):
    t, d = planted_task(small_ds, 0), planted_task(small_ds, 1)
    ref = adversarial_split(t, d)
    a = matched_random_split(t, ref, seed=0)
    b = matched_random_split(t, ref, seed=1)
    for s in (a, b):
        assert (s.n_train, s.n_test) == (ref.n_train, ref.n_test)
        assert s.balance == ref.balance and s.provenance == "random"
    assert not np.array_equal(a.train_ids, b.train_ids)


def test_matched_random_split_infeasible(small_ds):
    t = planted_task(small_ds, 0)
    ref = split_dataset(small_ds, 0.25, 0)
    with pytest.raises(DegenerateSplitError):
        matched_random_split(t, ref, 0, ids=ref.train_ids[:10])


@pytest.fixture(scope="module")
def noiseless():
    return generate_synthetic(SyntheticSpec(1024, 8, 2, 0.0), 0)


def test_evaluate_random_split_separable(noiseless):
    t = planted_task(noiseless, 0)
    rep = evaluate_split(noiseless, split_dataset(noiseless, 0.25, 0), t, CFG, n_runs=2, with_as=True)
    assert rep.acc_mean >= 0.95 and len(rep.accs) == 2 and 0 <= rep.as_on_split <= 1


def test_evaluate_rejects_small_sides(small_ds):
    t = planted_task(small_ds, 0)
    with pytest.raises(DegenerateSplitError):
        evaluate_split(small_ds, split_dataset(small_ds, 0.25, 0), t, CFG, n_runs=1)


def test_split_report_round_trip(tmp_path):
    rep = SplitReport("adversarial", 10, 5, {"train": [5, 5], "test": [2, 3]}, 0.4, 0.1, [0.3, 0.5])
    rep.save(tmp_path / "r.json")
    import json
    assert SplitReport.from_dict(json.loads((tmp_path / "r.json").read_text())) == rep


def test_swapped_pair_complements_accuracy(noiseless):
    t1, t2 = planted_task(noiseless, 0), planted_task(noiseless, 1)
    rows = as_difference_experiment([(t1, t2), (t2, t1), (t1, t1)], noiseless, CFG,
                                    StochasticityConfig(), n_pairs=1, with_as_on_split=False)
    assert [r["pair_id"] for r in rows] == [0, 1]  # (t1, t1) is degenerate and skipped
    assert rows[0]["acc"] == pytest.approx(1.0 - rows[1]["acc"], abs=1e-12)
    assert rows[0]["as_diff"] == pytest.approx(-rows[1]["as_diff"])
