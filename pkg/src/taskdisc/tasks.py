"""Task labelings, task networks, similarity and baseline task constructors."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .data import Dataset, balanced_binary
from .diffcore import MlpSpec, ParamVector
from .errors import DegenerateTaskError, DimensionError, SpecError, UnsupportedArityError
from .seeding import derive_seed, make_rng

ORIGINS = ("planted", "random", "pixel", "random-net", "discovered", "loaded")


@dataclass(eq=False)
class Task:
    """Class labels for every id of a dataset."""

    ids: np.ndarray
    labels: np.ndarray
    origin: str = "loaded"
    K: int = 2
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.ids.shape != self.labels.shape or self.ids.ndim != 1:
            raise DimensionError("task needs exactly one label per id")
        if len(np.unique(self.ids)) != len(self.ids):
            raise SpecError("task ids must be unique")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.K):
            raise SpecError(f"labels must lie in 0..{self.K - 1}")
        order = np.argsort(self.ids, kind="stable")
        self._sorted = (self.ids[order], order)

    def labels_for(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        sorted_ids, order = self._sorted
        loc = np.clip(np.searchsorted(sorted_ids, ids), 0, max(len(sorted_ids) - 1, 0))
        if ids.size and not np.array_equal(sorted_ids[loc], ids):
            raise KeyError("task is not defined on some requested ids")
        return self.labels[order[loc]]

    def flipped(self) -> "Task":
        if self.K != 2:
            raise UnsupportedArityError("only binary tasks can be flipped")
        return Task(self.ids, 1 - self.labels, self.origin, 2, dict(self.meta))

    def to_dict(self):
        return {"ids": self.ids.tolist(), "labels": self.labels.tolist(),
                "origin": self.origin, "K": int(self.K)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["ids"], d["labels"], d.get("origin", "loaded"), int(d.get("K", 2)))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class TaskNetwork:
    """Shared encoder plus a linear head: ``logit(x) = e(x; theta_e) @ head``.

    ``head`` is a d-vector for binary tasks or a d x K matrix for K-way tasks.
    """

    encoder: ParamVector
    spec: MlpSpec
    head: np.ndarray

    def __post_init__(self):
        self.head = np.asarray(self.head, dtype=np.float32)
        if self.head.shape[0] != self.spec.d_out:
            raise DimensionError(
                f"head dimension {self.head.shape[0]} does not match embedding size {self.spec.d_out}"
            )

    @property
    def d(self):
        return self.spec.d_out

    @property
    def K(self):
        return 2 if self.head.ndim == 1 else self.head.shape[1]

    def embed(self, X, encoder=None):
        return dc.mlp_forward(encoder if encoder is not None else self.encoder, self.spec, X)

    def logits(self, X, encoder=None):
        h = self.embed(X, encoder)
        if self.head.ndim == 1:
            return h @ dc.Tensor(self.head.reshape(-1, 1))
        return h @ dc.Tensor(self.head)


def _binary_check(*tasks):
    for t in tasks:
        if t.K != 2:
            raise UnsupportedArityError(f"similarity is defined for binary tasks only (got K={t.K})")


def similarity(t1: Task, t2: Task, ids=None) -> float:
    """Fraction of agreeing labels, maximized over flipping one task."""
    _binary_check(t1, t2)
    ids = t1.ids if ids is None else ids
    a, b = t1.labels_for(ids), t2.labels_for(ids)
    agree = float(np.mean(a == b))
    return max(agree, 1.0 - agree)


def similarity_matrix(tasks, ids=None) -> np.ndarray:
    _binary_check(*tasks)
    ids = tasks[0].ids if ids is None else ids
    signs = np.stack([2.0 * t.labels_for(ids) - 1.0 for t in tasks])
    agree = (1.0 + signs @ signs.T / signs.shape[1]) / 2.0
    return np.maximum(agree, 1.0 - agree)


def mean_max_similarity(tasks, ids=None) -> float:
    """Mean over tasks of the largest similarity to any other task in the set."""
    s = similarity_matrix(tasks, ids)
    np.fill_diagonal(s, -np.inf)
    return float(np.mean(s.max(axis=1)))


def planted_task(dataset: Dataset, factor: int) -> Task:
    if dataset.planted is None or not 0 <= factor < dataset.F:
        raise SpecError(f"dataset has no planted factor {factor}")
    return Task(dataset.ids, dataset.planted[factor], "planted", 2, {"factor": factor})


def planted_multiclass(dataset: Dataset, factors) -> Task:
    """K = 2**len(factors) classes from the binary code of several planted factors."""
    factors = list(factors)
    labels = np.zeros(dataset.N, dtype=np.int64)
    for f in factors:
        labels = labels * 2 + dataset.planted[f]
    return Task(dataset.ids, labels, "planted", 2 ** len(factors), {"factors": factors})


def random_task(ids, seed) -> Task:
    ids = np.asarray(ids, dtype=np.int64)
    if len(ids) < 2:
        raise SpecError("a random task needs at least two ids")
    return Task(ids, balanced_binary(len(ids), make_rng(seed, "random-task")), "random", 2,
                {"seed": int(seed)})


def rank_split(values, ids) -> np.ndarray:
    """Label the top half of ``values`` 1 and the rest 0.

    Sorting is by value, then by id, so ties are resolved deterministically
    and the result always has exactly floor(N/2) ones.
    """
    values = np.asarray(values, dtype=np.float64)
    order = np.lexsort((np.asarray(ids), values))
    labels = np.zeros(len(values), dtype=np.int64)
    labels[order[len(values) - len(values) // 2:]] = 1
    return labels


def pixel_threshold_task(dataset: Dataset, coord: int) -> Task:
    """1 where feature ``coord`` lies above its median (an even rank split)."""
    if not 0 <= coord < dataset.D:
        raise DimensionError(f"coordinate {coord} out of range for D={dataset.D}")
    col = dataset.features[:, coord]
    if np.all(col == col[0]):
        raise DegenerateTaskError(f"feature column {coord} is constant")
    return Task(dataset.ids, rank_split(col, dataset.ids), "pixel", 2,
                {"coord": int(coord), "threshold": float(np.median(col))})


def least_predictable_coord(dataset: Dataset) -> int:
    """Feature column with the smallest R^2 when linearly regressed on all the others.

    Thresholding this column gives the pixel task that is least recoverable
    from the remaining features.
    """
    X = dataset.features.astype(np.float64)
    X = X - X.mean(axis=0)
    cov = X.T @ X / len(X)
    r2 = 1.0 - 1.0 / (np.diag(np.linalg.pinv(cov)) * np.diag(cov))
    return int(np.argmin(r2))


def permute_columns(X, cols, rng) -> np.ndarray:
    """Copy of ``X`` with each listed column independently shuffled across rows."""
    X = np.array(X, copy=True)
    for c in np.atleast_1d(cols):
        X[:, c] = X[rng.permutation(len(X)), c]
    return X


def random_network_task(dataset: Dataset, spec: MlpSpec, seed) -> Task:
    """Median split of the logits of a freshly initialized network."""
    if spec.d_out != 1:
        raise SpecError("random-network tasks need a single-logit network")
    params = dc.init_params(spec, make_rng(seed, "random-net"))
    with dc.no_grad():
        logits = dc.mlp_forward(params, spec, dataset.features).data[:, 0]
    return Task(dataset.ids, rank_split(logits, dataset.ids), "random-net", 2, {"seed": int(seed)})


@dataclass
class NaiveDiscoveryResult:
    tasks: list
    draws: list  # draws spent on each accepted task
    total_draws: int
    exhausted: bool

    @property
    def cumulative_draws(self):
        return np.cumsum(self.draws).tolist()

    @property
    def draws_per_acceptance(self):
        """Running average cost: draws so far divided by tasks accepted so far."""
        c = np.cumsum(self.draws)
        return (c / np.arange(1, len(c) + 1)).tolist()


def naive_random_discovery(dataset: Dataset, sim_threshold=0.55, n_tasks=10, budget=10_000,
                           spec: MlpSpec = None, seed=0) -> NaiveDiscoveryResult:
    """Rejection-sample random-network tasks until ``n_tasks`` mutually dissimilar ones are kept.

    A draw is kept when its similarity to every kept task is below
    ``sim_threshold``. Stops early with ``exhausted=True`` if the draw budget
    runs out.
    """
    if not 0.5 < sim_threshold < 1:
        raise ValueError("sim_threshold must lie in (0.5, 1)")
    spec = spec or MlpSpec.make(dataset.D, (64,), 1)
    kept, kept_signs, draws = [], [], []
    since_last = 0
    for d in range(budget):
        since_last += 1
        task = random_network_task(dataset, spec, derive_seed(seed, "naive", d))
        s = 2.0 * task.labels - 1.0
        if kept_signs:
            agree = (1.0 + np.stack(kept_signs) @ s / len(s)) / 2.0
            if np.max(np.maximum(agree, 1.0 - agree)) >= sim_threshold:
                continue
        kept.append(task)
        kept_signs.append(s)
        draws.append(since_last)
        since_last = 0
        if len(kept) == n_tasks:
            return NaiveDiscoveryResult(kept, draws, d + 1, False)
    return NaiveDiscoveryResult(kept, draws, budget, True)


def acceptance_cost(dataset: Dataset, kept, sim_threshold=0.55, n_hits=16, max_draws=20_000,
                    spec: MlpSpec = None, seed=0):
    """Expected draws per acceptance at each stage of a naive discovery run.

    Stage ``k`` faces the first ``k`` kept tasks. Fresh random-network tasks
    are drawn against that fixed set until ``n_hits`` of them would be
    accepted (or ``max_draws`` is reached), and the cost is draws / hits
    (``inf`` with no hits). Repeating the acceptance at a frozen stage gives
    every stage a similar relative precision. Returns one value per kept task.
    """
    spec = spec or MlpSpec.make(dataset.D, (64,), 1)
    signs = np.stack([2.0 * t.labels_for(dataset.ids) - 1.0 for t in kept])
    costs = [1.0]
    for k in range(1, len(kept)):
        hits = draws = 0
        while hits < n_hits and draws < max_draws:
            task = random_network_task(dataset, spec, derive_seed(seed, "probe", k, draws))
            draws += 1
            agree = (1.0 + signs[:k] @ (2.0 * task.labels - 1.0) / dataset.N) / 2.0
            hits += np.max(np.maximum(agree, 1.0 - agree)) < sim_threshold
        costs.append(draws / hits if hits else float("inf"))
    return costs


def materialize(task_net: TaskNetwork, dataset: Dataset, mode="hard", ids=None):
    """Labels (``hard``) or class probabilities (``soft``) induced by a task network.

    Binary soft output is P(class 1) per point; a probability of exactly 0.5
    maps to class 0 in hard mode.
    """
    if task_net.spec.d_in != dataset.D:
        raise DimensionError(
            f"encoder expects {task_net.spec.d_in} input features, dataset has {dataset.D}"
        )
    ids = dataset.ids if ids is None else np.asarray(ids)
    with dc.no_grad():
        logits = task_net.logits(dataset.X(ids)).data.astype(np.float64)
    if task_net.K == 2:
        probs = 1.0 / (1.0 + np.exp(-logits[:, 0]))
        if mode == "soft":
            return probs
        return Task(ids, (probs > 0.5).astype(np.int64), "discovered", 2)
    z = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    if mode == "soft":
        return probs
    return Task(ids, probs.argmax(axis=1), "discovered", task_net.K)
