from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_coords: int
    worst: tuple[str, int, float, float] | None  # (param name, flat index, analytic, numeric)


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    n_coords: int = 200,
    seed: int = 0,
) -> GradCheckResult:
    """Compare tape gradients with central differences on sampled coordinates.

    ``f`` must rebuild the scalar loss from the current contents of ``params``
    (which are perturbed in place and restored). Relative error uses the
    denominator max(|analytic|, |numeric|, 1e-8). Params should be float64.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    with Tape() as tape:
        loss = f()
    analytic = backward(tape, loss, params)

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(total, size=min(n_coords, total), replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = None
    max_err = 0.0
    for flat in picks:
        pi = int(np.searchsorted(offsets, flat, side="right") - 1)
        p = params[pi]
        j = int(flat - offsets[pi])
        view = p.data.reshape(-1)
        orig = view[j]
        view[j] = orig + eps
        f_plus = float(f().data)
        view[j] = orig - eps
        f_minus = float(f().data)
        view[j] = orig
        numeric = (f_plus - f_minus) / (2 * eps)
        a = float(analytic[id(p)].reshape(-1)[j])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        if err >= max_err:
            max_err = err
            worst = (p.name or f"param{pi}", j, a, numeric)
    return GradCheckResult(max_rel_error=max_err, n_coords=len(picks), worst=worst)
