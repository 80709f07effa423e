"""MLP classifiers over flat parameter vectors, plus differentiable SGD."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError, PoisonedStateError, SpecError
from . import tensor as T
from .tensor import Tensor

ACTIVATIONS = ("relu", "identity", "tanh")


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths ``(D, h1, ..., C)`` and one activation per linear layer.

    ``normalize`` turns on a parameter-free per-sample standardization after
    each hidden activation (batch independent, so predictions for a point do
    not depend on which other points share its batch).
    """

    widths: tuple
    activations: tuple = None
    normalize: bool = False

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 2:
            raise SpecError("MlpSpec needs at least one layer (two widths)")
        if any(w < 1 for w in widths):
            raise SpecError(f"layer widths must be positive, got {widths}")
        acts = self.activations
        if acts is None:
            acts = ("relu",) * (len(widths) - 2) + ("identity",)
        acts = tuple(acts)
        if len(acts) != len(widths) - 1:
            raise SpecError(f"{len(widths) - 1} layers but {len(acts)} activations")
        bad = [a for a in acts if a not in ACTIVATIONS]
        if bad:
            raise SpecError(f"unknown activation(s) {bad}; expected one of {ACTIVATIONS}")
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "activations", acts)

    @classmethod
    def make(cls, d_in, hidden=(), d_out=2, activation="relu", normalize=False):
        widths = (d_in, *hidden, d_out)
        acts = (activation,) * len(hidden) + ("identity",)
        return cls(widths, acts, normalize)

    @property
    def d_in(self):
        return self.widths[0]

    @property
    def d_out(self):
        return self.widths[-1]

    @property
    def n_layers(self):
        return len(self.widths) - 1

    def layout(self) -> "Layout":
        return Layout.for_spec(self)

    @property
    def n_params(self):
        return self.layout().size

    def to_dict(self):
        return {"widths": list(self.widths), "activations": list(self.activations),
                "normalize": self.normalize}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["widths"]), tuple(d.get("activations") or ()) or None,
                   bool(d.get("normalize", False)))


@dataclass(frozen=True)
class Layout:
    """Maps named slices of a flat vector to per-layer weight shapes."""

    entries: tuple  # (name, offset, shape)

    @classmethod
    def for_spec(cls, spec: MlpSpec):
        entries, off = [], 0
        for i, (a, b) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
            entries.append((f"W{i}", off, (a, b)))
            off += a * b
            entries.append((f"b{i}", off, (b,)))
            off += b
        return cls(tuple(entries))

    @property
    def size(self):
        name, off, shape = self.entries[-1]
        return off + int(np.prod(shape))

    def unflatten(self, flat):
        """Split a flat array or Tensor into a dict of shaped pieces."""
        out = {}
        for name, off, shape in self.entries:
            n = int(np.prod(shape))
            piece = flat[off:off + n]
            out[name] = piece.reshape(shape)
        return out

    def flatten(self, pieces) -> np.ndarray:
        return np.concatenate([np.asarray(pieces[name]).reshape(-1)
                               for name, _, _ in self.entries])

    def to_dict(self):
        return [{"name": n, "offset": o, "shape": list(s)} for n, o, s in self.entries]

    @classmethod
    def from_dict(cls, items):
        return cls(tuple((d["name"], int(d["offset"]), tuple(d["shape"])) for d in items))


@dataclass
class ParamVector:
    flat: Tensor
    layout: Layout = field(repr=False)

    def __post_init__(self):
        self.flat = T.as_tensor(self.flat)
        if self.flat.ndim != 1 or self.flat.size != self.layout.size:
            raise DimensionError(
                f"parameter vector of size {self.flat.size} does not match layout size "
                f"{self.layout.size}"
            )

    @property
    def data(self) -> np.ndarray:
        return self.flat.data

    def __len__(self):
        return self.flat.size

    def pieces(self):
        return self.layout.unflatten(self.flat)

    def detach(self):
        return ParamVector(Tensor(self.flat.data.copy()), self.layout)

    def leaf(self):
        """A fresh copy that records gradients."""
        return ParamVector(Tensor(self.flat.data.copy(), requires_grad=True), self.layout)

    def copy(self):
        return self.detach()


def init_params(spec: MlpSpec, rng: np.random.Generator) -> ParamVector:
    """Uniform fan-in initialization: weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    This matches the default Kaiming-uniform scheme of common frameworks.
    Draw order is fixed (W0, b0, W1, b1, ...) so a seed determines the net.
    """
    layout = spec.layout()
    pieces = {}
    for name, _, shape in layout.entries:
        fan_in = spec.widths[int(name[1:])]
        bound = 1.0 / np.sqrt(fan_in)
        pieces[name] = rng.uniform(-bound, bound, size=shape)
    return ParamVector(Tensor(layout.flatten(pieces)), layout)


def _normalize_rows(x, eps=1e-5):
    mu = T.mean(x, axis=1, keepdims=True)
    c = x - mu
    var = T.mean(c * c, axis=1, keepdims=True)
    return c / T.sqrt(var + eps)


def mlp_forward(params: ParamVector, spec: MlpSpec, batch, upto=None):
    """Logits of the MLP on an ``N x D`` batch.

    ``upto`` stops after that many layers (used to read hidden features).
    """
    x = T.as_tensor(batch)
    if x.ndim != 2:
        raise DimensionError(f"batch must be 2-D (N x D), got shape {x.shape}")
    if params.layout.size != spec.n_params:
        raise DimensionError(
            f"parameters ({params.layout.size}) do not match spec ({spec.n_params})"
        )
    pieces = params.pieces()
    n_layers = spec.n_layers if upto is None else upto
    for i in range(n_layers):
        if x.shape[1] != spec.widths[i]:
            raise DimensionError(
                f"layer {i}: expected input width {spec.widths[i]}, got {x.shape[1]}"
            )
        x = x @ pieces[f"W{i}"] + pieces[f"b{i}"]
        act = spec.activations[i]
        if act == "relu":
            x = T.relu(x)
        elif act == "tanh":
            x = T.tanh(x)
        if spec.normalize and i < spec.n_layers - 1:
            x = _normalize_rows(x)
    return x


def backward(loss, leaves, create_graph=False):
    """Gradient of scalar ``loss`` for each ParamVector (or Tensor) in ``leaves``."""
    single = not isinstance(leaves, (list, tuple))
    leaves = [leaves] if single else list(leaves)
    tensors = [p.flat if isinstance(p, ParamVector) else p for p in leaves]
    gs = T.grad(loss, tensors, create_graph=create_graph)
    out = [ParamVector(g, p.layout) if isinstance(p, ParamVector) else g
           for g, p in zip(gs, leaves)]
    return out[0] if single else out


def sgd_step(params: ParamVector, grads: ParamVector, lr: float, step=None) -> ParamVector:
    """``params - lr * grads`` as a new graph node.

    When ``grads`` was built with ``create_graph=True`` the result stays
    differentiable with respect to whatever produced the gradients.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    if params.layout.size != grads.layout.size:
        raise DimensionError(
            f"params ({params.layout.size}) and grads ({grads.layout.size}) differ in size"
        )
    if not np.all(np.isfinite(grads.data)):
        raise PoisonedStateError(f"non-finite gradient at step {step}", step=step)
    if lr == 0:
        return params
    return ParamVector(params.flat - lr * grads.flat, params.layout)


class Adam:
    """Plain Adam on numpy arrays (no graph)."""

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = self.v = None
        self.t = 0

    def step(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        if not np.all(np.isfinite(g)):
            raise PoisonedStateError(f"non-finite gradient at step {self.t}", step=self.t)
        b1, b2 = self.betas
        if self.m is None:
            self.m = np.zeros_like(x)
            self.v = np.zeros_like(x)
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * g
        self.v = b2 * self.v + (1 - b2) * g * g
        mhat = self.m / (1 - b1 ** self.t)
        vhat = self.v / (1 - b2 ** self.t)
        return (x - self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(x.dtype)

    def state_dict(self):
        return {"lr": self.lr, "betas": list(self.betas), "eps": self.eps, "t": self.t,
                "m": self.m, "v": self.v}

    def load_state_dict(self, d):
        self.lr, self.betas, self.eps, self.t = d["lr"], tuple(d["betas"]), d["eps"], d["t"]
        self.m, self.v = d["m"], d["v"]
