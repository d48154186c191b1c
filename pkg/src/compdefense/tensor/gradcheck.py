"""Central finite-difference probe for checking reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import Tensor, grad


class NonDeterministicError(RuntimeError):
    pass


@dataclass
class ProbeRecord:
    index: int
    analytic: float
    numeric: float
    rel_err: float
    # One-sided slopes disagree: f is not differentiable at this coordinate
    # (relu/max-pool/clamp kink or a rounding jump), so rel_err is meaningless.
    kink: bool


def rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def finite_difference_probe(
    f: Callable[[Tensor], Tensor],
    x,
    coords: Sequence[int],
    h: float = 1e-4,
    kink_tol: float = 0.05,
) -> list[ProbeRecord]:
    """Compare the analytic gradient of scalar ``f`` at ``x`` with central differences.

    Evaluation runs in float64. ``coords`` index the flattened input.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    def value(arr):
        return float(f(Tensor(arr)).data)

    f0 = value(x0)
    if value(x0.copy()) != f0:
        raise NonDeterministicError("f returned different values for the same input")

    xt = Tensor(x0.copy(), requires_grad=True)
    (g,) = grad(f(xt), [xt])
    g = g.reshape(-1)

    out = []
    flat = x0.reshape(-1)
    for i in coords:
        xp = flat.copy()
        xp[i] += h
        xm = flat.copy()
        xm[i] -= h
        fp, fm = value(xp.reshape(x0.shape)), value(xm.reshape(x0.shape))
        numeric = (fp - fm) / (2 * h)
        fwd, bwd = (fp - f0) / h, (f0 - fm) / h
        kink = abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd), 1e-6)
        a = float(g[i])
        out.append(ProbeRecord(int(i), a, numeric, rel_error(a, numeric), bool(kink)))
    return out
