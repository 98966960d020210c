"""Finite-difference gradient checking for the tape ops.

Central differences with step 1e-4 against the analytic backward pass.
Non-scalar op outputs are reduced to a scalar by a fixed random projection
so a single backward covers the whole Jacobian in expectation.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, avg_pool, backward, mul, reshape, scale

FD_STEP = 1e-4
REL_TOL = 1e-3


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max over elements of |a - n| / max(1, |a|, |n|)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom))


def fd_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar-valued f at x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def _tape_sum(t: Tensor) -> Tensor:
    """Sum a taped tensor to a scalar: mean via 1x1 avg pool, times n."""
    n = t.data.size
    pooled = avg_pool(reshape(t, (1, n)), (1, 1))
    return scale(reshape(pooled, ()), float(n))


def check_op(
    fn: Callable,
    arrays: Sequence[np.ndarray],
    kwargs: dict | None = None,
    extra_consts: Sequence[np.ndarray] = (),
    h: float = FD_STEP,
) -> float:
    """Compare analytic and numeric gradients of fn w.r.t. every array input.

    `arrays` are the differentiable inputs, passed first; `extra_consts`
    follow as constant tensors (fixed targets and the like). Returns the
    worst relative error across all inputs.
    """
    kwargs = dict(kwargs or {})
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    consts = [Tensor(c) for c in extra_consts]

    def run(xs: Sequence[np.ndarray]):
        tape = Tape()
        leaves = [tape.tensor(x) for x in xs]
        out = fn(*leaves, *consts, **kwargs)
        return tape, leaves, out

    tape, leaves, out = run(arrays)
    proj = np.random.default_rng(0).standard_normal(out.data.shape)

    if out.data.shape == ():
        loss = out
    else:
        flat = reshape(out, (out.data.size,))
        loss = _tape_sum(mul(flat, Tensor(proj.reshape(-1))))
    backward(tape, loss)
    analytic = [leaf.grad.copy() for leaf in leaves]

    worst = 0.0
    for i in range(len(arrays)):
        def f(x, i=i):
            xs = [a.copy() for a in arrays]
            xs[i] = x
            _, _, o = run(xs)
            val = o.data if o.data.shape == () else (o.data * proj).sum()
            return float(val)

        numeric = fd_gradient(f, arrays[i], h=h)
        worst = max(worst, relative_error(analytic[i], numeric))
    return worst
