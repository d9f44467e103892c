"""
Central finite-difference oracle for analytic gradients.
"""
import logging
from typing import Callable, Sequence

import numpy as np

from graphformers.core.tensor import Tensor, backward, no_grad
from graphformers.errors import ContractError, DeterminismError

logger = logging.getLogger(__name__)

LossFn = Callable[[Sequence[Tensor]], Tensor]


def _value(root: Tensor) -> float:
    if root.size != 1:
        raise ContractError(f"finite_diff_check needs a scalar function, got shape {root.shape}")
    return root.item()


def finite_diff_check(f: LossFn, params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """
    Compare analytic gradients against (f(θ+eps) - f(θ-eps)) / (2·eps) for
    every parameter entry.

    Args:
        f: maps the parameter list to a scalar Tensor; must be deterministic
        params: leaf tensors with ``requires_grad``
        eps: perturbation size

    Returns:
        Maximum relative error, denominator max(|analytic|, |numeric|, 1e-8)
    """
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")

    for p in params:
        p.zero_grad()
    root = f(params)
    first = _value(root)
    backward(root, inputs=params)
    with no_grad():
        second = _value(f(params))
    if first != second:
        raise DeterminismError(f"f evaluated to {first!r} then {second!r} on identical input")

    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for p, grad in zip(params, analytic):
            flat = p.data.reshape(-1)
            flat_grad = grad.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + eps
                plus = _value(f(params))
                flat[i] = original - eps
                minus = _value(f(params))
                flat[i] = original
                numeric = (plus - minus) / (2.0 * eps)
                a = float(flat_grad[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
            p.bump_version()

    logger.debug(f"finite_diff_check: {sum(p.size for p in params)} entries, max rel err {worst:.3e}")
    return worst
