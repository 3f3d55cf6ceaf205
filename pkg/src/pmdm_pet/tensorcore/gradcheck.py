"""Finite-difference checks of the tape's gradients.

The analytic side is the ordinary 32-bit backward pass. The numeric side
re-evaluates the loss in 64-bit along a random direction, so the central
difference is not swamped by 32-bit rounding.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, default_dtype, no_grad, record_kinks, replay_kinks

CONDITIONING_FLOOR = 1e-5


def directional_error(
    loss_fn: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    rng: np.random.Generator,
    h: float = 1e-3,
    freeze_kinks: bool = True,
) -> float:
    """Relative error between ``<grad, v>`` and its central difference.

    ``loss_fn`` must rebuild the scalar loss from ``leaves`` on every call;
    ``v`` is a random unit direction over all leaves jointly, so the total
    perturbation has norm ``h`` however many parameters there are.

    With ``freeze_kinks`` the perturbed evaluations reuse the ReLU sign
    patterns of the base point. The result is the smooth piece of the loss
    that contains the base point, whose derivative there is exactly the
    gradient being checked; without it, units within ``h`` of a kink make
    the central difference meaningless for wide ReLU networks.
    """
    for t in leaves:
        t.requires_grad = True
        t.grad = None
    with record_kinks() as masks:
        loss = loss_fn()
    if loss.size != 1:
        raise ValueError("loss must be a scalar")
    loss.backward()
    dirs = [rng.standard_normal(t.shape) for t in leaves]
    norm = np.sqrt(sum(float(np.sum(d * d)) for d in dirs))
    dirs = [d / norm for d in dirs]
    analytic = sum(
        float(np.sum((t.grad if t.grad is not None else 0.0) * d, dtype=np.float64)) for t, d in zip(leaves, dirs)
    )
    saved = [t.data for t in leaves]
    base = [s.astype(np.float64) for s in saved]

    def at(sign: float) -> float:
        for t, b, d in zip(leaves, base, dirs):
            t.data = b + sign * h * d
        with default_dtype(np.float64), no_grad():
            if not freeze_kinks:
                return float(loss_fn().data)
            with replay_kinks(masks):
                return float(loss_fn().data)

    try:
        numeric = (at(1.0) - at(-1.0)) / (2.0 * h)
    finally:
        for t, s in zip(leaves, saved):
            t.data = s
    # A direction nearly orthogonal to the gradient makes the relative error
    # ill-conditioned; floor the denominator a few hundred 32-bit ulps below
    # the largest attainable directional derivative, the gradient norm.
    gnorm = np.sqrt(sum(float(np.sum(np.square(t.grad, dtype=np.float64))) for t in leaves if t.grad is not None))
    scale = max(abs(analytic), abs(numeric), CONDITIONING_FLOOR * gnorm)
    return 0.0 if scale == 0.0 else abs(analytic - numeric) / scale
