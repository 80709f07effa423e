"""Meta-optimization of the agreement score over a shared-embedding task family.

Every head ``theta`` in a fixed bank defines the task ``x -> [e(x) . theta > 0]``
(or an argmax over a K-way frame). The encoder ``e`` is trained so that tasks
drawn from the bank have high proxy agreement, while a uniformity penalty on
the embeddings keeps the tasks induced by orthogonal heads dissimilar.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .agreement import StochasticityConfig, TrainConfig, agreement_score, differentiable_as
from .data import Dataset, SplitSpec
from .diffcore import MlpSpec, ParamVector, Tensor
from .diffcore import tensor as T
from .errors import ContractError, CorruptionError, FormatError, NumericalError, TrainingFailure
from .seeding import derive_seed, make_rng
from .tasks import Task, TaskNetwork, materialize, similarity, similarity_matrix

log = logging.getLogger(__name__)


@dataclass
class DiscoveryConfig:
    d: int = 8
    encoder_hidden: tuple = (64,)
    lam: float = 1.0
    alpha: float = 2.0
    inner_steps: int = 20
    inner_lr: float = 0.5
    inner_batch: int = 64
    inner_hidden: tuple = (64,)
    meta_lr: float = 1e-3
    outer_steps: int = 200
    n_classes: int = 2
    early_stop: bool = True
    seed: int = 0

    def __post_init__(self):
        self.encoder_hidden = tuple(self.encoder_hidden)
        self.inner_hidden = tuple(self.inner_hidden)
        if self.d < 1:
            raise ContractError("embedding size d must be >= 1")
        if self.lam < 0:
            raise ContractError("lambda must be >= 0")
        if self.alpha <= 0:
            raise ContractError("alpha must be > 0")
        if not 1 <= self.inner_steps <= 50:
            raise ContractError("inner step budget must lie in 1..50")
        if self.n_classes < 2:
            raise ContractError("n_classes must be >= 2")

    def encoder_spec(self, d_in) -> MlpSpec:
        return MlpSpec.make(d_in, self.encoder_hidden, self.d)

    def inner_cfg(self) -> TrainConfig:
        return TrainConfig(self.inner_hidden, optimizer="sgd", lr=self.inner_lr,
                           batch_size=self.inner_batch, steps=self.inner_steps)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class HeadBank:
    """Fixed linear heads: ``(n, d)`` vectors for binary tasks, ``(n, d, K)`` frames otherwise."""

    heads: np.ndarray

    @property
    def K(self):
        return 2 if self.heads.ndim == 2 else self.heads.shape[2]

    def __len__(self):
        return self.heads.shape[0]

    def __getitem__(self, i):
        return self.heads[i]


def rotation_frame(u, v, K):
    """K heads in the plane of orthonormal ``u, v``, consecutive angle 2*pi/K."""
    ang = 2 * np.pi * np.arange(K) / K
    return np.outer(u, np.cos(ang)) + np.outer(v, np.sin(ang))


def _random_frame(rng, d, K):
    q, _ = np.linalg.qr(rng.standard_normal((d, 2)))
    return rotation_frame(q[:, 0], q[:, 1], K)


def init_head_bank(d, K_classes=2, seed=0, n_heads=None) -> HeadBank:
    """Orthonormal binary heads, or K-way frames built from a random start and rotation direction."""
    if K_classes < 2:
        raise ContractError("K_classes must be >= 2")
    rng = make_rng(seed, "head-bank")
    n_heads = d if n_heads is None else n_heads
    if K_classes == 2:
        if n_heads > d:
            raise ContractError(f"cannot place {n_heads} orthogonal heads in {d} dimensions")
        q, r = np.linalg.qr(rng.standard_normal((d, d)))
        q = q * np.sign(np.diag(r))  # unique, uniformly distributed orthogonal matrix
        return HeadBank(q.T[:n_heads].astype(np.float32))
    if d < 2:
        raise ContractError("K-way frames need an embedding of size >= 2")
    return HeadBank(np.stack([_random_frame(rng, d, K_classes) for _ in range(n_heads)])
                    .astype(np.float32))


def uniformity_loss(embeddings: Tensor, alpha=2.0) -> Tensor:
    """``log mean_{i != j} exp(alpha * cos(h_i, h_j))`` over all distinct pairs."""
    h = T.as_tensor(embeddings)
    n = h.shape[0]
    if n < 2:
        raise ContractError("uniformity needs at least two embeddings")
    sq = T.tsum(h * h, axis=1, keepdims=True)
    zero = np.flatnonzero(sq.data[:, 0] == 0)
    if zero.size:
        raise NumericalError(f"embedding {zero[0]} has zero norm", index=int(zero[0]))
    z = h / T.sqrt(sq)
    cos = z @ z.T
    mask = 1.0 - np.eye(n, dtype=h.data.dtype)
    # log-mean-exp shifted by alpha (cos <= 1) for stability
    e = T.exp(alpha * (cos - 1.0)) * Tensor(mask)
    return T.log(T.tsum(e) * (1.0 / (n * (n - 1)))) + alpha


@dataclass
class DiscoveryState:
    encoder: ParamVector
    spec: MlpSpec
    bank: HeadBank
    opt: dc.Adam
    as_trace: list = field(default_factory=list)
    unif_trace: list = field(default_factory=list)
    agree_trace: list = field(default_factory=list)
    inner_steps_trace: list = field(default_factory=list)
    step: int = 0

    def task_network(self, i) -> TaskNetwork:
        return TaskNetwork(self.encoder, self.spec, self.bank[i])

    def task_networks(self):
        return [self.task_network(i) for i in range(len(self.bank))]


def init_state(dataset: Dataset, cfg: DiscoveryConfig) -> DiscoveryState:
    spec = cfg.encoder_spec(dataset.D)
    enc = dc.init_params(spec, make_rng(cfg.seed, "encoder"))
    bank = init_head_bank(cfg.d, cfg.n_classes, derive_seed(cfg.seed, "bank"))
    return DiscoveryState(enc, spec, bank, dc.Adam(cfg.meta_lr))


def meta_objective(encoder: ParamVector, state: DiscoveryState, dataset, split, cfg, step):
    """Proxy loss plus weighted uniformity for the head sampled at ``step``.

    Returns ``(total, proxy, uniformity)``; ``total`` is differentiable in ``encoder``.
    """
    head = int(make_rng(cfg.seed, "head", step).integers(len(state.bank)))
    net = TaskNetwork(encoder, state.spec, state.bank[head])
    stoch = StochasticityConfig().reseeded(derive_seed(cfg.seed, "inner", step))
    proxy = differentiable_as(dataset, net, split, cfg.inner_cfg(), stoch, encoder=encoder,
                              early_stop=cfg.early_stop, allow_restart=True)
    unif = None
    for h in proxy.embeddings:
        u = uniformity_loss(h, cfg.alpha)
        unif = u if unif is None else unif + u
    unif = unif * (1.0 / len(proxy.embeddings))
    total = proxy.loss + cfg.lam * unif if cfg.lam else proxy.loss
    return total, proxy, unif


def meta_step(state: DiscoveryState, dataset: Dataset, split: SplitSpec,
              cfg: DiscoveryConfig) -> DiscoveryState:
    """One Adam update of the encoder on the sampled head's proxy and uniformity losses."""
    leaf = state.encoder.leaf()
    total, proxy, unif = meta_objective(leaf, state, dataset, split, cfg, state.step)
    g = T.grad(total, leaf.flat).data
    if not np.all(np.isfinite(g)):
        dump = {"step": state.step, "as_trace": state.as_trace[-10:],
                "unif_trace": state.unif_trace[-10:], "agreement": proxy.trace}
        raise TrainingFailure(f"non-finite meta-gradient: {json.dumps(dump)}", step=state.step)
    state.encoder = ParamVector(Tensor(state.opt.step(state.encoder.data, g)), state.encoder.layout)
    state.as_trace.append(proxy.value)
    state.unif_trace.append(float(unif.data))
    state.agree_trace.append(float(np.mean(proxy.trace)))
    state.inner_steps_trace.append(proxy.steps)
    state.step += 1
    return state


@dataclass
class DiscoveryResult:
    state: DiscoveryState
    tasks: list
    heads: np.ndarray  # heads behind each task, bank first


def sample_heads(d, K, n, seed):
    """Fresh isotropic-gaussian heads (binary) or random K-way frames."""
    rng = make_rng(seed, "fresh-heads")
    if K == 2:
        return rng.standard_normal((n, d)).astype(np.float32)
    return np.stack([_random_frame(rng, d, K) for _ in range(n)]).astype(np.float32)


def discover(dataset: Dataset, split: SplitSpec, cfg: DiscoveryConfig, n_fresh=0,
             state: DiscoveryState = None, callback=None) -> DiscoveryResult:
    """Run the outer loop to ``cfg.outer_steps`` and materialize the bank's tasks.

    Tasks are hard labels (0.5 threshold) on every dataset id; ``n_fresh``
    extra tasks come from newly sampled heads on the same encoder.
    """
    state = state or init_state(dataset, cfg)
    with dc.deterministic():
        while state.step < cfg.outer_steps:
            meta_step(state, dataset, split, cfg)
            if callback:
                callback(state)
    heads = [state.bank[i] for i in range(len(state.bank))]
    if n_fresh:
        heads += list(sample_heads(cfg.d, cfg.n_classes, n_fresh, derive_seed(cfg.seed, "fresh")))
    tasks = [materialize(TaskNetwork(state.encoder, state.spec, h), dataset) for h in heads]
    return DiscoveryResult(state, tasks, np.stack(heads))


def lambda_sweep(dataset: Dataset, split: SplitSpec, cfg: DiscoveryConfig, lambdas,
                 as_cfg: TrainConfig = None, n_pairs=2, measure_as=True):
    """One discovery run per lambda; records mean max-similarity and mean task AS."""
    lambdas = list(lambdas)
    if not lambdas:
        raise ValueError("lambda list is empty")
    rows = []
    for lam in lambdas:
        c = DiscoveryConfig.from_dict({**cfg.to_dict(), "lam": float(lam)})
        res = discover(dataset, split, c)
        sims = similarity_matrix(res.tasks, split.train_ids)
        np.fill_diagonal(sims, -np.inf)
        row = {"lambda": float(lam),
               "mean_max_similarity": float(np.mean(sims.max(axis=1))),
               "max_similarity": float(sims.max()),
               "final_as_loss": float(np.mean(res.state.as_trace[-10:])),
               "final_uniformity": float(np.mean(res.state.unif_trace[-10:]))}
        if measure_as:
            stoch = StochasticityConfig().reseeded(derive_seed(cfg.seed, "sweep-as"))
            row["mean_as"] = float(np.mean([agreement_score(dataset, t, split, as_cfg, stoch,
                                                            n_pairs).mean for t in res.tasks]))
        rows.append(row)
    return rows


def embed(state: DiscoveryState, X):
    with dc.no_grad():
        return dc.mlp_forward(state.encoder, state.spec, X).data.astype(np.float64)


def fit_linear_probe(H, y, steps=2000, lr=0.05, l2=1e-4):
    """Bias-free logistic regression by full-batch Adam (matches the head family)."""
    H = np.asarray(H, dtype=np.float64)
    scale = np.sqrt(np.mean(H ** 2)) or 1.0
    Hs = H / scale
    s = 2.0 * np.asarray(y, dtype=np.float64) - 1.0
    w = np.zeros(H.shape[1])
    opt = dc.Adam(lr)
    for step in range(steps):
        m = s * (Hs @ w)
        # d/dw mean log(1 + exp(-m))
        g = -(Hs * (s * 0.5 * (1.0 - np.tanh(m / 2)))[:, None]).mean(axis=0) + l2 * w
        if not np.all(np.isfinite(g)):
            raise TrainingFailure("linear probe diverged", step=step)
        w = opt.step(w, g)
    return w / scale


def nearest_discovered_task(state: DiscoveryState, target: Task, split: SplitSpec,
                            dataset: Dataset):
    """Fit a head on frozen embeddings to predict ``target``; return (head, task, similarity)."""
    if target.K != 2:
        raise ContractError("recall is defined for binary targets")
    ids = split.train_ids
    head = fit_linear_probe(embed(state, dataset.X(ids)), target.labels_for(ids))
    task = materialize(TaskNetwork(state.encoder, state.spec, head), dataset)
    return head, task, similarity(task, target, ids)


# checkpoint blob: b"TDCK" | u32 version | u32 header length | JSON header | f32 payloads
CKPT_MAGIC = b"TDCK"
CKPT_VERSION = 1


def save_checkpoint(state: DiscoveryState, path, cfg: DiscoveryConfig = None):
    opt = state.opt.state_dict()
    arrays = {"encoder": state.encoder.data, "heads": state.bank.heads}
    if opt.get("m") is not None:
        arrays["adam_m"], arrays["adam_v"] = opt["m"], opt["v"]
    header = {
        "spec": state.spec.to_dict(), "layout": state.encoder.layout.to_dict(),
        "step": state.step, "adam": {k: v for k, v in opt.items() if k not in ("m", "v")},
        "traces": {"as": state.as_trace, "unif": state.unif_trace, "agree": state.agree_trace,
                   "inner_steps": state.inner_steps_trace},
        "arrays": [[k, list(np.shape(a))] for k, a in arrays.items()],
        "config": cfg.to_dict() if cfg else None,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hb)) + hb)
        for a in arrays.values():
            fh.write(np.asarray(a, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Returns ``(state, config or None)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a discovery checkpoint")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    header = json.loads(raw[12:12 + hlen])
    off, arrays = 12 + hlen, {}
    expected = off + 4 * sum(int(np.prod(shape)) for _, shape in header["arrays"])
    if len(raw) != expected:
        raise CorruptionError(f"{path}: checkpoint has {len(raw)} bytes, header implies {expected}")
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) * 4
        arrays[name] = np.frombuffer(raw[off:off + n], dtype="<f4").reshape(shape).copy()
        off += n
    spec = MlpSpec.from_dict(header["spec"])
    layout = dc.Layout.from_dict(header["layout"])
    opt = dc.Adam()
    opt.load_state_dict({**header["adam"], "m": arrays.get("adam_m"), "v": arrays.get("adam_v")})
    tr = header["traces"]
    state = DiscoveryState(ParamVector(Tensor(arrays["encoder"]), layout), spec,
                           HeadBank(arrays["heads"]), opt, tr["as"], tr["unif"], tr["agree"],
                           tr["inner_steps"], header["step"])
    cfg = DiscoveryConfig.from_dict(header["config"]) if header["config"] else None
    return state, cfg
