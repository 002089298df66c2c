"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .tensor import GradientTape, Tensor, mul, sum_

# Gradient entries smaller than DEFAULT_FLOOR * max(1, |objective|) are compared
# in absolute terms: round-off in the objective, amplified by 1/eps, sets the
# resolution of a central difference and it grows with the objective's size.
DEFAULT_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    max_rel_error: float
    location: str  # "<leaf name>[index]" of the worst entry
    n_checked: int
    n_kinks: int = 0  # entries whose estimate moved when the step shrank

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: float, numeric: float, floor: float = DEFAULT_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    fn: Callable[..., Tensor],
    leaves: Sequence[Union[Tensor, tuple]],
    eps: float = 1e-5,
    max_entries: Optional[int] = 64,
    seed: int = 0,
    names: Optional[Sequence[str]] = None,
    floor: float = DEFAULT_FLOOR,
    kink_retries: int = 2,
) -> GradCheckResult:
    """Compare tape gradients of ``fn(*inputs)`` with central differences.

    ``leaves`` holds tensors (checked in place; they must be float64 and
    ``requires_grad``) or shapes, for which random float64 inputs are drawn.
    Extra parameters that ``fn`` closes over are passed as tensors here too;
    every leaf is forwarded positionally to ``fn``.

    The output is reduced to a scalar by a fixed random projection so that all
    gradient entries are of comparable magnitude.  At most ``max_entries``
    randomly chosen coordinates per leaf are perturbed (all when ``None``).

    Piecewise-linear activations make the objective non-smooth, and a kink
    inside the stencil spoils the difference.  Disagreeing entries are
    re-measured with ten times smaller steps (up to ``kink_retries`` times) and
    the best agreement is kept.  A wrong backward pass disagrees at every step
    size, so it still fails; a kink moves the estimate and is counted in
    ``n_kinks``.
    """
    rng = np.random.default_rng(seed)
    tensors = []
    for leaf in leaves:
        if isinstance(leaf, Tensor):
            tensors.append(leaf)
        else:
            tensors.append(Tensor(rng.standard_normal(leaf), requires_grad=True))
    names = list(names) if names is not None else [t.name or f"arg{i}" for i, t in enumerate(tensors)]

    probe = {}

    def objective() -> Tensor:
        out = fn(*tensors)
        if "w" not in probe:
            probe["w"] = rng.standard_normal(out.shape)
        return sum_(mul(out, Tensor(probe["w"], dtype=out.dtype)))

    with GradientTape() as tape:
        loss = objective()
    tape.backward(loss)
    floor = floor * max(1.0, abs(loss.item()))
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in tensors]

    worst, where, count, kinks = 0.0, "", 0, 0
    for t, name, grad in zip(tensors, names, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        for i in idx:
            g = grad.reshape(-1)[i]
            h, err, prev = eps, np.inf, None
            for _ in range(kink_retries + 1):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = objective().item()
                flat[i] = orig - h
                f_minus = objective().item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2 * h)
                if prev is not None and relative_error(prev, numeric, floor) > 1e-3:
                    kinks += 1
                err = min(err, relative_error(g, numeric, floor))
                if err < 1e-5:
                    break
                prev, h = numeric, h / 10
            count += 1
            if err > worst or not where:
                worst = err
                where = f"{name}{tuple(int(j) for j in np.unravel_index(i, t.shape))}"
    return GradCheckResult(float(worst), where, count, kinks)
