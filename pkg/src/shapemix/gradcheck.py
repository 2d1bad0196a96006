"""Central finite-difference verification of analytic gradients.

The relative disagreement reported for each checked entry is

    |analytic - numeric| / max(1, |analytic|, |numeric|)

with ``numeric`` a central difference (f(x+eps) - f(x-eps)) / (2 eps).
Parameter values are restored bit-exactly before returning. Checking every
entry is the default; ``samples_per_param`` caps the per-tensor count for
large models, drawing indices from a deterministic stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericError
from .rng import Rng
from .tensor import Tensor


@dataclass
class GroupCheck:
    name: str
    max_rel_error: float
    checked: int


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    samples_per_param: int | None = None,
    rng: Rng | None = None,
) -> float:
    """Max relative error across all checked parameter entries."""
    groups = grad_check_groups(loss_fn, params, eps, samples_per_param, rng)
    return max(g.max_rel_error for g in groups)


def grad_check_groups(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    samples_per_param: int | None = None,
    rng: Rng | None = None,
) -> list[GroupCheck]:
    """Per-parameter breakdown of the finite-difference comparison."""
    if not (1e-7 <= eps <= 1e-3):
        raise ConfigError(f"grad_check: eps must lie in [1e-7, 1e-3], got {eps}")
    if not params:
        raise ConfigError("grad_check: no parameters to check")

    for p in params:
        p.zero_grad()
    loss = loss_fn()
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"grad_check: loss is non-finite ({value}) at the base point")
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    results: list[GroupCheck] = []
    for pi, p in enumerate(params):
        name = p.name or f"param{pi}"
        flat = p.data.reshape(-1)
        n = flat.size
        if samples_per_param is None or samples_per_param >= n:
            indices = np.arange(n)
        else:
            draw = rng if rng is not None else Rng(0, ("gradcheck",))
            indices = np.sort(draw.substream("idx", pi).permutation(n)[:samples_per_param])
        a_flat = analytic[pi].reshape(-1)
        worst = 0.0
        for idx in indices:
            original = flat[idx]
            flat[idx] = original + eps
            f_plus = loss_fn().item()
            flat[idx] = original - eps
            f_minus = loss_fn().item()
            flat[idx] = original
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NumericError(
                    f"grad_check: non-finite loss while perturbing {name}[{idx}]", param=name)
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(a_flat[idx])
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, rel)
        results.append(GroupCheck(name=name, max_rel_error=worst, checked=len(indices)))
    return results
