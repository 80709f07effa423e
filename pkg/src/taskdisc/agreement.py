"""Agreement-score estimation, the differentiable proxy, and pool-based bound checks.

The agreement score of a task is the expected fraction of test points on
which two independently trained networks predict the same class, where both
networks are trained on the task's labels over the train ids.
"""
from __future__ import annotations

import csv
import itertools
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .data import Dataset, SplitSpec
from .diffcore import MlpSpec, ParamVector, Tensor
from .diffcore import tensor as T
from .errors import ContractError, DegenerateSplitError, PoisonedStateError, TrainingFailure
from .seeding import derive_seed, make_rng
from .tasks import Task, TaskNetwork

log = logging.getLogger(__name__)

GRAD_NOISE_SCALE = 1e-3


@dataclass
class StochasticityConfig:
    """Which randomness sources differ between training runs.

    A disabled source uses the same seed for every run (for the parallel-noise
    analog: no perturbation at all), so with all three off every run is
    bit-identical.
    """

    vary_init: bool = True
    vary_data_order: bool = True
    vary_parallel_noise: bool = True
    init_seed: int = 0
    order_seed: int = 1
    noise_seed: int = 2

    def run_seeds(self, run_index):
        return {
            "init": derive_seed(self.init_seed, "init", run_index if self.vary_init else 0),
            "order": derive_seed(self.order_seed, "order", run_index if self.vary_data_order else 0),
            "noise": derive_seed(self.noise_seed, "noise", run_index) if self.vary_parallel_noise else None,
        }

    @classmethod
    def fixed(cls, **kw):
        return cls(False, False, False, **kw)

    def reseeded(self, seed):
        """Same flags, base seeds derived from ``seed``."""
        return StochasticityConfig(self.vary_init, self.vary_data_order, self.vary_parallel_noise,
                                   derive_seed(seed, "init"), derive_seed(seed, "order"),
                                   derive_seed(seed, "noise"))


@dataclass
class TrainConfig:
    hidden: tuple = (64,)
    activation: str = "relu"
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 64
    epochs: float = 20.0
    steps: int = None  # overrides epochs when set

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def mlp_spec(self, d_in, n_classes=2) -> MlpSpec:
        return MlpSpec.make(d_in, self.hidden, n_classes, self.activation)

    def n_steps(self, n_train):
        if self.steps is not None:
            return int(self.steps)
        return int(math.ceil(self.epochs * n_train / self.batch_size))


@dataclass
class ASResult:
    mean: float
    std: float
    per_pair: list
    n_pairs: int
    split: dict = field(default_factory=dict)
    train_acc: list = field(default_factory=list)

    def records(self, task_id="task", config="default"):
        return [{"task_id": task_id, "config": config, "pair": i, "agreement": a}
                for i, a in enumerate(self.per_pair)]


@dataclass
class ExtendedTask:
    """A task on the train ids extended to the test ids."""

    train_ids: np.ndarray
    train_labels: np.ndarray
    test_ids: np.ndarray
    test_labels: np.ndarray
    origin: str = "majority"
    K: int = 2

    def as_task(self) -> Task:
        return Task(np.concatenate([self.train_ids, self.test_ids]),
                    np.concatenate([self.train_labels, self.test_labels]), "loaded", self.K)


def _labels_on(labels, ids):
    if isinstance(labels, Task):
        return labels.labels_for(ids), labels.K
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != len(ids):
        raise ContractError("label array must align with the train ids")
    return labels, int(labels.max()) + 1 if labels.size else 2


def train_classifier(dataset: Dataset, labels, split: SplitSpec, cfg: TrainConfig,
                     stoch: StochasticityConfig, run_index=0, n_classes=None, return_info=False):
    """Train one MLP on ``labels`` over ``split.train_ids``.

    Init weights, minibatch order and the gradient-noise stream are drawn from
    seeds derived from ``stoch`` and ``run_index``. The gradient noise is a
    gaussian perturbation of size ``1e-3 * rms(grad)`` per step, standing in
    for non-deterministic parallel kernels.
    """
    ids = split.train_ids
    y, k = _labels_on(labels, ids)
    k = n_classes or max(k, 2)
    X = dataset.X(ids)
    n = len(ids)
    if cfg.batch_size > n:
        raise ContractError(f"batch size {cfg.batch_size} exceeds train set size {n}")
    spec = cfg.mlp_spec(dataset.D, k)
    seeds = stoch.run_seeds(run_index)
    params = dc.init_params(spec, make_rng(seeds["init"], "init"))
    order_rng = make_rng(seeds["order"], "order")
    noise_rng = make_rng(seeds["noise"], "noise") if seeds["noise"] is not None else None
    opt = dc.Adam(cfg.lr) if cfg.optimizer == "adam" else None
    total = cfg.n_steps(n)
    flat = params.data.copy()
    perm, pos = order_rng.permutation(n), 0
    loss_val = float("nan")
    for step in range(total):
        if pos + cfg.batch_size > n:
            perm, pos = order_rng.permutation(n), 0
        b = perm[pos:pos + cfg.batch_size]
        pos += cfg.batch_size
        leaf = ParamVector(Tensor(flat, requires_grad=True), params.layout)
        loss = dc.cross_entropy(dc.mlp_forward(leaf, spec, X[b]), y[b])
        loss_val = float(loss.data)
        if not math.isfinite(loss_val):
            raise TrainingFailure(f"training diverged (loss {loss_val}) at step {step}", step=step)
        g = T.grad(loss, leaf.flat).data
        if noise_rng is not None:
            rms = float(np.sqrt(np.mean(g.astype(np.float64) ** 2)))
            g = g + (GRAD_NOISE_SCALE * rms) * noise_rng.standard_normal(g.shape).astype(g.dtype)
        try:
            flat = opt.step(flat, g) if opt else (flat - cfg.lr * g).astype(flat.dtype)
        except PoisonedStateError as exc:
            raise TrainingFailure(str(exc), step=step) from exc
    params = ParamVector(Tensor(flat), params.layout)
    if not return_info:
        return params
    acc = float(np.mean(predict(params, spec, X) == y))
    return params, {"train_acc": acc, "steps": total, "final_loss": loss_val, "spec": spec}


def predict(params: ParamVector, spec: MlpSpec, X) -> np.ndarray:
    with dc.no_grad():
        return dc.mlp_forward(params, spec, X).data.argmax(axis=1)


def _train_pool(dataset, task, split, cfg, stoch, runs):
    """Test-set predictions (runs x n_test) and train accuracies of a model pool."""
    if split.n_test == 0:
        raise DegenerateSplitError("agreement needs a non-empty test set")
    k = task.K if isinstance(task, Task) else None
    X_test = dataset.X(split.test_ids)
    preds, accs = [], []
    for r in runs:
        params, info = train_classifier(dataset, task, split, cfg, stoch, r, n_classes=k,
                                        return_info=True)
        preds.append(predict(params, info["spec"], X_test))
        accs.append(info["train_acc"])
    return np.stack(preds), accs


def agreement_score(dataset: Dataset, task, split: SplitSpec, cfg: TrainConfig = None,
                    stoch: StochasticityConfig = None, n_pairs=4, deterministic=None) -> ASResult:
    """Mean and std over ``n_pairs`` disjoint network pairs of their test agreement."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    cfg = cfg or TrainConfig()
    stoch = stoch or StochasticityConfig()
    with dc.deterministic(deterministic):
        preds, accs = _train_pool(dataset, task, split, cfg, stoch, range(2 * n_pairs))
    per_pair = [float(np.mean(preds[2 * i] == preds[2 * i + 1])) for i in range(n_pairs)]
    return ASResult(float(np.mean(per_pair)), float(np.std(per_pair)), per_pair, n_pairs,
                    {"provenance": split.provenance, "n_train": split.n_train,
                     "n_test": split.n_test}, accs)


def pool_agreement(preds: np.ndarray) -> float:
    """Agreement averaged over all distinct pairs of a model pool (exact count)."""
    m = preds.shape[0]
    if m < 2:
        raise ValueError("need at least two models")
    k = int(preds.max()) + 1
    counts = np.stack([(preds == c).sum(axis=0) for c in range(k)])
    return float(np.mean((counts * (counts - 1)).sum(axis=0) / (m * (m - 1))))


def majority_labels(preds: np.ndarray) -> np.ndarray:
    """Per-column majority class; ties go to the smallest class id."""
    k = int(preds.max()) + 1
    counts = np.stack([(preds == c).sum(axis=0) for c in range(k)])
    return counts.argmax(axis=0)


def majority_vote_extension(dataset: Dataset, task, split: SplitSpec, cfg: TrainConfig,
                            stoch: StochasticityConfig, M=8, preds=None) -> ExtendedTask:
    if M < 1:
        raise ValueError("M must be >= 1")
    if preds is None:
        with dc.deterministic():
            preds, _ = _train_pool(dataset, task, split, cfg, stoch, range(M))
    y, k = _labels_on(task, split.train_ids)
    k = task.K if isinstance(task, Task) else max(k, 2)
    return ExtendedTask(split.train_ids, y, split.test_ids, majority_labels(preds), "majority", k)


@dataclass
class BoundsReport:
    agreement: float
    acc_majority: float
    upper_slack: float  # ACC(majority) - AS
    lower_slacks: list  # AS - (2 ACC(extension) - 1), one per h
    n_models: int
    tolerance: float = 1e-6

    @property
    def min_lower_slack(self):
        return float(min(self.lower_slacks)) if self.lower_slacks else float("inf")

    @property
    def violations(self):
        v = int(self.upper_slack < -self.tolerance)
        return v + sum(int(s < -self.tolerance) for s in self.lower_slacks)

    @property
    def ok(self):
        return self.violations == 0


def bounds_from_pool(preds: np.ndarray, h_list, tolerance=1e-6) -> BoundsReport:
    """Check ACC(majority) >= AS >= 2 ACC(h) - 1 on one shared pool of predictions."""
    as_pool = pool_agreement(preds)
    tau_hat = majority_labels(preds)
    acc_hat = float(np.mean(preds == tau_hat[None, :]))
    lower = [as_pool - (2.0 * float(np.mean(preds == np.asarray(h)[None, :])) - 1.0)
             for h in h_list]
    return BoundsReport(as_pool, acc_hat, acc_hat - as_pool, lower, preds.shape[0], tolerance)


def prop1_bounds_check(dataset: Dataset, task, split: SplitSpec, cfg: TrainConfig,
                       stoch: StochasticityConfig, M=8, n_h_samples=100, seed=0,
                       preds=None) -> BoundsReport:
    """Train a pool of ``M`` models and check both agreement bounds on it.

    The extensions checked are the majority vote itself plus ``n_h_samples``
    balanced random labelings of the test ids.
    """
    if M < 2:
        raise ValueError("M must be >= 2")
    if preds is None:
        with dc.deterministic():
            preds, _ = _train_pool(dataset, task, split, cfg, stoch, range(M))
    rng = make_rng(seed, "prop1-h")
    n = preds.shape[1]
    k = max(int(preds.max()) + 1, task.K if isinstance(task, Task) else 2)
    h_list = [majority_labels(preds)]
    for _ in range(n_h_samples):
        h = np.arange(n) % k
        h_list.append(h[rng.permutation(n)])
    return bounds_from_pool(preds, h_list)


FLAG_NAMES = ("init", "data_order", "parallel_noise")


def stochasticity_ablation(dataset: Dataset, task, split: SplitSpec, cfg: TrainConfig = None,
                           n_pairs=4, seed=0):
    """Agreement under all 8 on/off combinations of the three randomness sources."""
    rows = []
    base = StochasticityConfig().reseeded(seed)
    for flags in itertools.product((False, True), repeat=3):
        stoch = StochasticityConfig(*flags, base.init_seed, base.order_seed, base.noise_seed)
        res = agreement_score(dataset, task, split, cfg, stoch, n_pairs)
        name = "+".join(n for n, f in zip(FLAG_NAMES, flags) if f) or "none"
        rows.append({"config": name, "vary_init": flags[0], "vary_data_order": flags[1],
                     "vary_parallel_noise": flags[2], "mean": res.mean, "std": res.std,
                     "per_pair": res.per_pair})
    return rows


def early_stop_monitor(trace, threshold=0.6, patience=3) -> bool:
    """True when the last ``patience`` agreements all exceed ``threshold``."""
    if len(trace) < patience:
        return False
    return all(a > threshold for a in trace[-patience:])


@dataclass
class ProxyAS:
    loss: Tensor  # mean symmetric cross-entropy between the two networks; lower = more agreement
    trace: list  # hard agreement on each fresh batch, before the update
    steps: int
    early_stopped: bool
    embeddings: list = field(default_factory=list, repr=False)

    @property
    def value(self):
        return float(self.loss.data)


def _soft_targets(task, X, ids, encoder):
    """Training targets for a batch plus (for task networks) the embeddings."""
    if isinstance(task, TaskNetwork):
        h = task.embed(X, encoder)
        z = h @ Tensor(task.head.reshape(-1, 1) if task.head.ndim == 1 else task.head)
        if task.K == 2:
            p1 = T.sigmoid(z)
            return T.concat([1.0 - p1, p1], axis=1), h
        return T.softmax(z, axis=1), h
    if isinstance(task, Task):
        y = task.labels_for(ids)
        onehot = np.zeros((len(y), task.K), dtype=T.get_dtype())
        onehot[np.arange(len(y)), y] = 1.0
        return Tensor(onehot), None
    raise ContractError(f"unsupported task type {type(task).__name__}")


def _sym_ce(logits1, logits2):
    lp1, lp2 = T.log_softmax(logits1, axis=1), T.log_softmax(logits2, axis=1)
    ce12 = T.neg(T.mean(T.tsum(T.exp(lp2) * lp1, axis=1)))
    ce21 = T.neg(T.mean(T.tsum(T.exp(lp1) * lp2, axis=1)))
    return 0.5 * (ce12 + ce21)


def differentiable_as(dataset: Dataset, task, split: SplitSpec, inner_cfg: TrainConfig,
                      stoch: StochasticityConfig, run_index=0, encoder: ParamVector = None,
                      early_stop=True, allow_restart=False) -> ProxyAS:
    """Unrolled two-network training whose agreement loss is differentiable.

    Two networks start from independent inits and take ``inner_cfg.steps``
    SGD steps on the same fresh batches, trained on the task's soft labels.
    Before each update the symmetric cross-entropy between their predictions
    on the incoming batch is accumulated; ``loss`` is its mean over steps.
    With a TaskNetwork, pass ``encoder`` (a ParamVector that requires grad)
    to get gradients with respect to the encoder.
    """
    K = inner_cfg.steps
    if K is None or K < 1:
        raise ContractError("the proxy needs a step budget of at least 1")
    if K > 50:
        raise ContractError(f"proxy unrolls are capped at 50 steps, got {K}")
    if inner_cfg.optimizer != "sgd":
        raise ContractError("the proxy unroll uses plain SGD")
    ids = split.train_ids
    n, M = len(ids), inner_cfg.batch_size
    if M > n:
        raise ContractError(f"batch size {M} exceeds train set size {n}")
    n_classes = task.K if isinstance(task, (Task, TaskNetwork)) else 2
    spec = inner_cfg.mlp_spec(dataset.D, n_classes)
    if isinstance(task, TaskNetwork) and encoder is None:
        encoder = task.encoder
    s1, s2 = stoch.run_seeds(2 * run_index), stoch.run_seeds(2 * run_index + 1)
    # leaves that record gradients, so the inner updates stay on the tape
    w = [dc.init_params(spec, make_rng(s1["init"], "init")).leaf(),
         dc.init_params(spec, make_rng(s2["init"], "init")).leaf()]
    order_rng = make_rng(s1["order"], "order")
    perm, pos = order_rng.permutation(n), 0
    X_all = dataset.X(ids)
    total, trace, embs = None, [], []
    stopped = False
    for k in range(K):
        if pos + M > n:
            if not allow_restart:
                raise ContractError(
                    f"batch stream exhausted after {k} steps ({n} train points, batch {M})")
            warnings.warn("inner loop exceeds one epoch; restarting the batch stream", RuntimeWarning)
            perm, pos = order_rng.permutation(n), 0
        b = perm[pos:pos + M]
        pos += M
        xb = X_all[b]
        out1, out2 = dc.mlp_forward(w[0], spec, xb), dc.mlp_forward(w[1], spec, xb)
        step_loss = _sym_ce(out1, out2)
        total = step_loss if total is None else total + step_loss
        trace.append(float(np.mean(out1.data.argmax(1) == out2.data.argmax(1))))
        targets, h = _soft_targets(task, xb, ids[b], encoder)
        if h is not None:
            embs.append(h)
        for i, out in enumerate((out1, out2)):
            inner = dc.cross_entropy(out, targets)
            g = dc.backward(inner, w[i], create_graph=True)
            w[i] = dc.sgd_step(w[i], g, inner_cfg.lr, step=k)
        if early_stop and early_stop_monitor(trace):
            stopped = True
            break
    steps = len(trace)
    return ProxyAS(total * (1.0 / steps), trace, steps, stopped, embs)


def proxy_agreement(dataset, task, split, inner_cfg, stoch, n_runs=3, early_stop=False):
    """Negated proxy loss averaged over ``n_runs`` seeds (higher = more agreement)."""
    # grad mode must stay on: the inner SGD steps differentiate the inner losses
    vals = [-differentiable_as(dataset, task, split, inner_cfg, stoch, r, early_stop=early_stop,
                               allow_restart=True).value for r in range(n_runs)]
    return float(np.mean(vals))


def write_as_csv(rows, path):
    """Rows with columns task_id, config, pair, agreement."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["task_id", "config", "pair", "agreement"])
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in ("task_id", "config", "pair", "agreement")})
