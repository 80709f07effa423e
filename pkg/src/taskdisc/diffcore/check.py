"""Central finite-difference gradient checks."""
from __future__ import annotations

import numpy as np

from ..errors import NumericalError
from . import tensor as T
from .mlp import ParamVector
from .tensor import Tensor


def _call(fn, point, flat_np, layout):
    x = Tensor(flat_np, requires_grad=True)
    arg = ParamVector(x, layout) if layout is not None else x
    return x, fn(arg)


def finite_diff_check(fn, point, eps=1e-3, coords=None, dtype=np.float64, return_details=False):
    """Max relative error between the analytic gradient and central differences.

    ``fn`` maps a ParamVector (or flat Tensor) to a scalar Tensor. The error
    per coordinate is ``|analytic - numeric| / (|analytic| + 1e-8)``. The
    check runs in ``dtype`` (float64 by default) because single-precision
    central differences carry roundoff of the same order as the tolerances
    being checked.
    """
    layout = point.layout if isinstance(point, ParamVector) else None
    base = np.asarray(point.data if isinstance(point, (ParamVector, Tensor)) else point)
    with T.precision(dtype):
        base = base.astype(dtype).reshape(-1)
        x, y = _call(fn, point, base, layout)
        if not np.isfinite(y.data).all():
            raise NumericalError("function value is not finite at the base point")
        analytic = T.grad(y, x).data.reshape(-1)
        idx = np.arange(base.size) if coords is None else np.asarray(coords, dtype=int)
        numeric = np.empty(len(idx), dtype=dtype)
        # grad mode stays on: fn may itself differentiate (unrolled SGD)
        for j, c in enumerate(idx):
            plus, minus = base.copy(), base.copy()
            plus[c] += eps
            minus[c] -= eps
            fp = _call(fn, point, plus, layout)[1].data
            fm = _call(fn, point, minus, layout)[1].data
            if not (np.isfinite(fp).all() and np.isfinite(fm).all()):
                raise NumericalError(f"non-finite function value at coordinate {c}", index=int(c))
            numeric[j] = (float(fp) - float(fm)) / (2 * eps)
    a = analytic[idx]
    rel = np.abs(a - numeric) / (np.abs(a) + 1e-8)
    err = float(rel.max()) if rel.size else 0.0
    if return_details:
        return err, {"coords": idx, "analytic": a, "numeric": numeric, "rel": rel}
    return err
