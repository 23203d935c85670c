"""Central-difference verification of the analytic gradients."""

from __future__ import annotations

import numpy as np

__all__ = ["grad_check"]


def grad_check(model, build_loss, eps: float = 1e-4,
               samples: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Probe parameters and report the worst relative gradient error.

    build_loss(model) must rebuild the loss from the model's current
    flat parameter vector and return (value, flat gradient); `model`
    only needs a mutable .params array, so toy stand-ins work. A random
    subset of `samples` parameters is probed (all when None). The
    relative error divides by max(|analytic|, |numeric|, 1e-5) so dead
    parameters do not blow up the ratio.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    _, grads = build_loss(model)
    n = model.params.size
    if samples is None or samples >= n:
        probe = np.arange(n)
    else:
        rng = np.random.default_rng(0) if rng is None else rng
        probe = np.sort(rng.choice(n, size=samples, replace=False))
    worst = 0.0
    for i in probe:
        saved = model.params[i]
        model.params[i] = saved + eps
        up, _ = build_loss(model)
        model.params[i] = saved - eps
        down, _ = build_loss(model)
        model.params[i] = saved
        numeric = (up - down) / (2.0 * eps)
        denom = max(abs(numeric), abs(float(grads[i])), 1e-5)
        worst = max(worst, abs(numeric - float(grads[i])) / denom)
    return float(worst)
