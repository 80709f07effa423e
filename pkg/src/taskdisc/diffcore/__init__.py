"""Dense tensors with reverse-mode differentiation, MLPs and differentiable SGD."""
import contextlib
import os

from threadpoolctl import threadpool_limits

from .check import finite_diff_check
from .mlp import (
    Adam,
    Layout,
    MlpSpec,
    ParamVector,
    backward,
    init_params,
    mlp_forward,
    sgd_step,
)
from .tensor import (
    Tensor,
    as_tensor,
    cross_entropy,
    get_dtype,
    grad,
    is_grad_enabled,
    log_softmax,
    no_grad,
    precision,
    set_grad_enabled,
    softmax,
)


_DETERMINISTIC = True


def set_deterministic_default(flag: bool):
    """Default used by ``deterministic()`` when called without an argument."""
    global _DETERMINISTIC
    _DETERMINISTIC = bool(flag)


@contextlib.contextmanager
def deterministic(enabled=None):
    """Pin BLAS to one thread so reductions run in a fixed order.

    When disabled, the thread count is capped by ``TASKDISC_THREADS`` if set.
    """
    enabled = _DETERMINISTIC if enabled is None else enabled
    if not enabled:
        limit = os.environ.get("TASKDISC_THREADS")
        with threadpool_limits(int(limit)) if limit else contextlib.nullcontext():
            yield
        return
    with threadpool_limits(1):
        yield


__all__ = [
    "Adam", "Layout", "MlpSpec", "ParamVector", "Tensor", "as_tensor", "backward",
    "cross_entropy", "deterministic", "finite_diff_check", "get_dtype", "grad",
    "init_params", "is_grad_enabled", "set_deterministic_default", "log_softmax", "mlp_forward", "no_grad", "precision",
    "set_grad_enabled", "sgd_step", "softmax",
]
