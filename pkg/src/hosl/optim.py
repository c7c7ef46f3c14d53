"""Zeroth-order and first-order update primitives.

Everything random here is regenerated from a seed: the perturbation z for
seed s is ``prng.normals(s, dim)``, consumed in coordinate order, so
``perturb`` and ``zo_update`` with the same seed touch each coordinate with the
same draw.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import prng
from .model import ConfigError, ShapeError


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


@dataclass(frozen=True)
class ZOConfig:
    eps: float
    Q: int
    lr_client: float

    def __post_init__(self):
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        if self.Q < 1:
            raise ConfigError("Q must be >= 1")
        if not self.lr_client > 0:
            raise ConfigError("client learning rate must be positive")


@dataclass(frozen=True)
class FOConfig:
    lr_server: float

    def __post_init__(self):
        if not self.lr_server > 0:
            raise ConfigError("server learning rate must be positive")


@dataclass(frozen=True)
class ZOGradientRecord:
    """Projected gradient scalar (already divided by 2*eps*Q) and its seed."""

    g_hat: float
    seed: int


# indirection point so tests can observe exactly which z each call consumes
direction = prng.normals


def perturb(params: np.ndarray, delta: float, seed: int, *, inplace: bool = False) -> np.ndarray:
    """Return ``params + delta * z(seed)``."""
    if not np.all(np.isfinite(params)):
        raise NumericError("cannot perturb non-finite parameters")
    out = params if inplace else np.array(params, dtype=np.float64, copy=True)
    if delta == 0.0 or out.size == 0:
        return out
    z = direction(seed, out.size)
    out += delta * z
    return out


def spsa_scalar(loss_plus: float, loss_minus: float, eps: float, Q: int) -> float:
    if not eps > 0:
        raise ConfigError("eps must be positive")
    if Q < 1:
        raise ConfigError("Q must be >= 1")
    return (loss_plus - loss_minus) / (2.0 * eps * Q)


def zo_update(params: np.ndarray, record: ZOGradientRecord, lr: float, *, inplace: bool = False) -> np.ndarray:
    """``params - lr * g_hat * z(seed)``; the same arithmetic as perturb."""
    return perturb(params, -(lr * record.g_hat), record.seed, inplace=inplace)


def zo_dense_estimate(
    theta: np.ndarray,
    loss_fn: Callable[[np.ndarray], float],
    eps: float,
    Q: int,
    seed: int,
    sampler: Callable[[int], np.ndarray] | None = None,
) -> np.ndarray:
    """Averaged two-point estimate materialised as a vector.

    Direction q is ``prng.normals(derive_seed(seed, q), d)`` unless a
    ``sampler(q)`` is given. Exactly 2*Q calls to ``loss_fn``.
    """
    if not eps > 0:
        raise ConfigError("eps must be positive")
    if Q < 1:
        raise ConfigError("Q must be >= 1")
    theta = np.asarray(theta, dtype=np.float64)
    est = np.zeros_like(theta)
    for q in range(Q):
        z = sampler(q) if sampler is not None else prng.normals(prng.derive_seed(seed, q), theta.size)
        diff = loss_fn(theta + eps * z) - loss_fn(theta - eps * z)
        est += (diff / (2.0 * eps)) * z
    return est / Q


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise ShapeError(f"grad shape {grad.shape} != params shape {params.shape}")
    return params - lr * grad
