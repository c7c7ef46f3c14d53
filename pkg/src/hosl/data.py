"""Seeded synthetic datasets and minibatch streams."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import prng
from .model import ConfigError

KINDS = ("quadratic", "linreg", "blobs")


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "quadratic"
    n_features: int = 64
    n_outputs: int = 1  # regression width, or number of classes for blobs
    samples: int = 128
    noise: float = 0.0
    seed: int = 0
    cond: float = 10.0  # quadratic only: condition number of A^T A

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.n_features < 1 or self.n_outputs < 1 or self.samples < 1:
            raise ConfigError("dataset sizes must be positive")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")
        if self.kind == "quadratic" and self.samples < self.n_features:
            raise ConfigError("quadratic needs samples >= n_features")
        if self.cond < 1:
            raise ConfigError("cond must be >= 1")


@dataclass
class Dataset:
    spec: DatasetSpec
    x: np.ndarray
    y: np.ndarray
    # quadratic only: L(theta) = 1/2 ||A theta - b||^2 equals the mean
    # per-sample loss over (x, y) = (sqrt(n) A, sqrt(n) b)
    A: np.ndarray | None = None
    b: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def hessian(self) -> np.ndarray:
        if self.A is None:
            raise ValueError("only quadratic datasets have a fixed Hessian")
        return self.A.T @ self.A

    @property
    def lam_max(self) -> float:
        return float(np.linalg.eigvalsh(self.hessian)[-1])

    @property
    def optimum(self) -> np.ndarray:
        return np.linalg.lstsq(self.A, self.b, rcond=None)[0]

    def quadratic_loss(self, theta: np.ndarray) -> float:
        r = self.A @ theta - self.b
        return 0.5 * float(r @ r)

    def minibatch_variance(self, theta: np.ndarray, batch_size: int, d_c: int) -> tuple[float, float]:
        """Exact E||g_batch - g||^2 on each block for with-replacement batches.

        Quadratic only. Returns (client block, server block); zero for full
        batches.
        """
        if self.A is None:
            raise ValueError("only defined for quadratic datasets")
        if batch_size <= 0:
            return 0.0, 0.0
        r = self.x @ theta - self.y[:, 0]
        per_sample = self.x * r[:, None]
        dev = per_sample - per_sample.mean(axis=0)
        sq = (dev * dev).mean(axis=0) / batch_size
        return float(sq[:d_c].sum()), float(sq[d_c:].sum())

    def batches(self, seed: int, batch_size: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Endless minibatches drawn with replacement; size 0 means full batch."""
        if batch_size <= 0:
            while True:
                yield self.x, self.y
        rng = np.random.default_rng(seed)
        while True:
            idx = rng.integers(0, self.n, size=batch_size)
            yield self.x[idx], self.y[idx]

    def to_bytes(self) -> bytes:
        return self.x.astype("<f8").tobytes() + self.y.astype("<f8").tobytes()


def _quadratic(spec: DatasetSpec, rng: np.random.Generator) -> Dataset:
    n, d = spec.samples, spec.n_features
    u, _ = np.linalg.qr(rng.standard_normal((n, d)))
    v, _ = np.linalg.qr(rng.standard_normal((d, d)))
    eig = np.geomspace(1.0 / spec.cond, 1.0, d)
    A = (u * np.sqrt(eig)) @ v.T
    theta_star = rng.standard_normal(d)
    b = A @ theta_star + spec.noise * rng.standard_normal(n)
    scale = np.sqrt(n)
    return Dataset(spec, scale * A, (scale * b).reshape(-1, 1), A=A, b=b)


def _linreg(spec: DatasetSpec, rng: np.random.Generator) -> Dataset:
    x = rng.standard_normal((spec.samples, spec.n_features))
    w = rng.standard_normal((spec.n_features, spec.n_outputs)) / np.sqrt(spec.n_features)
    y = np.tanh(x @ w) + spec.noise * rng.standard_normal((spec.samples, spec.n_outputs))
    return Dataset(spec, x, y)


def _blobs(spec: DatasetSpec, rng: np.random.Generator) -> Dataset:
    k = spec.n_outputs
    if k < 2:
        raise ConfigError("blobs needs at least 2 classes")
    centers = 3.0 * rng.standard_normal((k, spec.n_features))
    labels = np.arange(spec.samples) % k
    x = centers[labels] + spec.noise * rng.standard_normal((spec.samples, spec.n_features))
    return Dataset(spec, x, labels.reshape(-1, 1).astype(np.float64))


def generate_dataset(spec: DatasetSpec) -> Dataset:
    rng = np.random.default_rng(prng.derive_seed(spec.seed, 0xDA7A))
    return {"quadratic": _quadratic, "linreg": _linreg, "blobs": _blobs}[spec.kind](spec, rng)
