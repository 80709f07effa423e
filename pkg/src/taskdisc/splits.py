"""Adversarial train-test splits, matched random baselines and split evaluation.

An adversarial split keeps the points where a target task and a distractor
task agree for training and moves the points where they disagree to the test
side, so any reliance on the distractor is punished at test time.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .agreement import (
    StochasticityConfig,
    TrainConfig,
    agreement_score,
    predict,
    train_classifier,
)
from .data import Dataset, SplitSpec, class_counts
from .errors import ContractError, DegenerateSplitError, UnsupportedArityError
from .seeding import derive_seed, make_rng
from .tasks import Task

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClassPartition:
    C1: frozenset
    C2: frozenset

    def __post_init__(self):
        object.__setattr__(self, "C1", frozenset(int(c) for c in self.C1))
        object.__setattr__(self, "C2", frozenset(int(c) for c in self.C2))
        if not self.C1 or not self.C2:
            raise ContractError("both class sets must be non-empty")
        if self.C1 & self.C2:
            raise ContractError("class sets must be disjoint")
        if self.C1 | self.C2 != frozenset(range(self.K)):
            raise ContractError(f"class sets must cover 0..{self.K - 1}")

    @property
    def K(self):
        return max(self.C1 | self.C2) + 1

    @classmethod
    def random_equal(cls, K, seed):
        """A uniformly random partition into halves (C1 gets the extra class when K is odd)."""
        perm = make_rng(seed, "class-partition").permutation(K)
        h = (K + 1) // 2
        return cls(frozenset(perm[:h].tolist()), frozenset(perm[h:].tolist()))


@dataclass
class SplitReport:
    provenance: str
    n_train: int
    n_test: int
    balance: dict
    acc_mean: float
    acc_std: float
    accs: list = field(default_factory=list)
    as_on_split: float = None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _check_sides(train, test, min_side):
    if len(train) < max(min_side, 1) or len(test) < max(min_side, 1):
        raise DegenerateSplitError(
            f"split sides have {len(train)} train / {len(test)} test points (minimum {max(min_side, 1)})")


def _ids_or_default(ids, task):
    return task.ids if ids is None else np.asarray(ids, dtype=np.int64)


def adversarial_split(t_target: Task, t_distractor: Task, ids=None, min_side=1) -> SplitSpec:
    """Train where the two binary tasks agree, test where they disagree."""
    if t_target.K != 2 or t_distractor.K != 2:
        raise UnsupportedArityError("adversarial_split needs two binary tasks")
    ids = np.sort(_ids_or_default(ids, t_target))
    agree = t_target.labels_for(ids) == t_distractor.labels_for(ids)
    train, test = ids[agree], ids[~agree]
    _check_sides(train, test, min_side)
    return SplitSpec(train, test, "adversarial").record_balance(t_target)


def adversarial_split_multiclass(t_target: Task, t_distractor: Task, partition: ClassPartition,
                                 ids=None, min_side=1) -> SplitSpec:
    """Train where ``[target in C1]`` equals the distractor; the rest is test.

    The test side is exactly the set where ``[target in C2]`` equals the
    distractor, since the two indicators are complementary.
    """
    if t_distractor.K != 2:
        raise UnsupportedArityError("the distractor must be binary")
    if partition.K != t_target.K:
        raise ContractError(f"partition covers {partition.K} classes, target has {t_target.K}")
    ids = np.sort(_ids_or_default(ids, t_target))
    in_c1 = np.isin(t_target.labels_for(ids), list(partition.C1)).astype(np.int64)
    agree = in_c1 == t_distractor.labels_for(ids)
    train, test = ids[agree], ids[~agree]
    _check_sides(train, test, min_side)
    return SplitSpec(train, test, "adversarial").record_balance(t_target)


def matched_random_split(t_target: Task, reference: SplitSpec, seed, ids=None) -> SplitSpec:
    """Random split with the reference's sizes and per-class train/test counts.

    ``ids`` defaults to the reference's train and test ids combined.
    """
    pool = np.sort(np.concatenate([reference.train_ids, reference.test_ids]) if ids is None
                   else np.asarray(ids, dtype=np.int64))
    y_pool = t_target.labels_for(pool)
    need = class_counts(t_target.labels_for(reference.train_ids), t_target.K)
    need_test = class_counts(t_target.labels_for(reference.test_ids), t_target.K)
    rng = make_rng(seed, "matched-split")
    train, test = [], []
    for c in range(t_target.K):
        members = pool[y_pool == c]
        if len(members) < need[c] + need_test[c]:
            raise DegenerateSplitError(
                f"class {c}: {len(members)} ids available, reference needs {need[c] + need_test[c]}")
        members = members[rng.permutation(len(members))]
        train.append(members[:need[c]])
        test.append(members[need[c]:need[c] + need_test[c]])
    split = SplitSpec(np.sort(np.concatenate(train)), np.sort(np.concatenate(test)), "random")
    return split.record_balance(t_target)


def split_accuracies(dataset: Dataset, split: SplitSpec, t_target: Task, cfg: TrainConfig,
                    stoch: StochasticityConfig, n_runs=4, labels=None):
    """Accuracy w.r.t. ``t_target`` on the test side for ``n_runs`` independently trained models.

    Models are trained on ``labels`` (default: the target itself) over the train side.
    """
    labels = t_target if labels is None else labels
    X_test = dataset.X(split.test_ids)
    y_test = t_target.labels_for(split.test_ids)
    accs = []
    with dc.deterministic():
        for r in range(n_runs):
            params, info = train_classifier(dataset, labels, split, cfg, stoch, r,
                                            n_classes=t_target.K, return_info=True)
            accs.append(float(np.mean(predict(params, info["spec"], X_test) == y_test)))
    return accs


def evaluate_split(dataset: Dataset, split: SplitSpec, t_target: Task, cfg: TrainConfig = None,
                   stoch: StochasticityConfig = None, n_runs=4, with_as=False, n_pairs=2) -> SplitReport:
    """Test accuracy mean and std over ``n_runs`` trainings, optionally with AS on the split.

    Sides smaller than twice the batch size are rejected rather than shrinking the batch.
    """
    cfg = cfg or TrainConfig()
    stoch = stoch or StochasticityConfig()
    _check_sides(split.train_ids, split.test_ids, 2 * cfg.batch_size)
    accs = split_accuracies(dataset, split, t_target, cfg, stoch, n_runs)
    as_val = None
    if with_as:
        as_val = agreement_score(dataset, t_target, split, cfg,
                                 stoch.reseeded(derive_seed(stoch.init_seed, "split-as")), n_pairs).mean
    if not split.balance:
        split.record_balance(t_target)
    return SplitReport(split.provenance, split.n_train, split.n_test, split.balance,
                       float(np.mean(accs)), float(np.std(accs)), accs, as_val)


def as_difference_experiment(task_pairs, dataset: Dataset, cfg: TrainConfig = None,
                             stoch: StochasticityConfig = None, random_split: SplitSpec = None,
                             n_pairs=2, n_runs=1, with_as_on_split=True, seed=0):
    """For each (t1, t2): AS difference on a random split vs. accuracy w.r.t. t1 on their adversarial split.

    Models on the adversarial split are trained on t1's labels (identical to
    t2's there). Pairs whose split is degenerate are skipped and logged.
    Returns records with keys pair_id, as_diff, acc, as_on_split, as_t1, as_t2.
    """
    from .data import split_dataset

    cfg = cfg or TrainConfig()
    stoch = stoch or StochasticityConfig()
    random_split = random_split or split_dataset(dataset, 0.1, derive_seed(seed, "as-diff-split"))
    cache = {}

    def as_of(t):
        if id(t) not in cache:
            cache[id(t)] = agreement_score(dataset, t, random_split, cfg, stoch, n_pairs).mean
        return cache[id(t)]

    rows = []
    for pid, (t1, t2) in enumerate(task_pairs):
        try:
            split = adversarial_split(t1, t2, min_side=2 * cfg.batch_size)
        except DegenerateSplitError as exc:
            log.warning("pair %d skipped: %s", pid, exc)
            continue
        accs = split_accuracies(dataset, split, t1, cfg, stoch, n_runs)
        a1, a2 = as_of(t1), as_of(t2)
        as_split = None
        if with_as_on_split:
            as_split = agreement_score(dataset, t1, split, cfg, stoch, n_pairs).mean
        rows.append({"pair_id": pid, "as_diff": a1 - a2, "acc": float(np.mean(accs)),
                     "as_on_split": as_split, "as_t1": a1, "as_t2": a2})
    return rows
