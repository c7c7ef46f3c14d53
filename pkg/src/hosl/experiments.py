"""Seed-ensemble experiments on the quadratic benchmark.

Shared by the acceptance suite and the scripts in ``scripts/``. Each seed
draws its own quadratic instance and its own perturbation stream.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .accounting import TheoryParams, bound_check
from .data import DatasetSpec, generate_dataset
from .protocol import EncodeError
from .roles import TrainingConfig, run_training

log = logging.getLogger(__name__)

BENCH_D, BENCH_DC = 64, 16


def bench_dataset(seed: int, d: int = BENCH_D, samples: int = 128, cond: float = 10.0) -> DatasetSpec:
    return DatasetSpec("quadratic", n_features=d, samples=samples, seed=seed, cond=cond)


def bench_config(mode: str, seed: int, **kw) -> TrainingConfig:
    base = dict(mode=mode, T=300, Q=4, eps=1e-4, cut=BENCH_DC, dataset=bench_dataset(seed),
                master_seed=seed, record_time=False)
    base.update(kw)
    return TrainingConfig(**base)


# --- rate ordering ------------------------------------------------------------

# step-size grids searched per mode: (lr_client, lr_server)
RATE_GRIDS = {
    "fo_fo": [(e, e) for e in (0.5, 1.0, 1.5, 1.8)],
    "zo_fo": list(itertools.product((0.2, 0.3, 0.45, 0.6, 0.8), (1.0, 1.5, 1.8))),
    "zo_zo": [(e, e) for e in (0.04, 0.08, 0.11, 0.14, 0.18, 0.24)],
}


def iterations_to_target(cfg: TrainingConfig, fraction: float = 0.01) -> float:
    """Iterations until L <= fraction * L0; inf on divergence or budget exhaustion."""
    try:
        out = run_training(replace(cfg, stop_fraction=fraction))
    except (EncodeError, FloatingPointError, OverflowError) as exc:
        log.info("diverged (%s): %s", type(exc).__name__, cfg)
        return math.inf
    hit = out.iterations_to(fraction)
    return math.inf if hit is None else float(hit)


@dataclass
class RateResult:
    mode: str
    lr: tuple[float, float]
    iterations: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.iterations))


def tune_steps(mode: str, tune_seeds=(100, 101, 102), budget: int = 1500, Q: int = 4) -> tuple[float, float]:
    """Grid-search the step pair minimising mean iterations on held-out seeds."""
    best, best_mean = None, math.inf
    for lrc, lrs in RATE_GRIDS[mode]:
        its = [
            iterations_to_target(bench_config(mode, s, T=budget, Q=Q, lr_client=lrc, lr_server=lrs))
            for s in tune_seeds
        ]
        mean = float(np.mean(its))
        log.info("tune %s lr=(%g, %g): %s", mode, lrc, lrs, its)
        if mean < best_mean:
            best, best_mean = (lrc, lrs), mean
    if best is None:
        raise RuntimeError(f"no step size converged for {mode}")
    return best


def rate_ordering(seeds=range(10), budget: int = 1500, Q: int = 4) -> dict[str, RateResult]:
    results = {}
    for mode in ("fo_fo", "zo_fo", "zo_zo"):
        lrc, lrs = tune_steps(mode, budget=budget, Q=Q)
        its = [
            iterations_to_target(bench_config(mode, s, T=budget, Q=Q, lr_client=lrc, lr_server=lrs))
            for s in seeds
        ]
        results[mode] = RateResult(mode, (lrc, lrs), its)
    return results


# --- Q and d_c trends -----------------------------------------------------------

def corollary_step(Q: int, d_c: int, T: int, L: float = 1.0) -> float:
    return math.sqrt(Q) / math.sqrt(d_c * T * L)


def zo_fo_stationarity(seed: int, Q: int, d_c: int, T: int = 300, eps: float = 1e-4,
                       lr: float | None = None) -> float:
    """Final (1/T) sum ||grad||^2 of one zo_fo run; lr defaults to the corollary step."""
    eta = corollary_step(Q, d_c, T) if lr is None else lr
    cfg = bench_config("zo_fo", seed, T=T, Q=Q, cut=d_c, eps=eps, lr_client=eta, lr_server=eta)
    return run_training(cfg).stationarity()


def q_trend(seeds=range(10), qs=(1, 5, 10), d_c: int = BENCH_DC, **kw) -> dict[int, float]:
    return {q: float(np.mean([zo_fo_stationarity(s, q, d_c, **kw) for s in seeds])) for q in qs}


def dc_trend(seeds=range(10), cuts=(8, 16, 32), Q: int = 10, **kw) -> dict[int, float]:
    return {k: float(np.mean([zo_fo_stationarity(s, Q, k, **kw) for s in seeds])) for k in cuts}


# --- bound check ------------------------------------------------------------------

def bound_run(seed: int, Q: int = 4, d_c: int = BENCH_DC, T: int = 300, eps: float = 1e-3,
              batch_size: int = 0):
    """zo_fo run at the largest admissible shared step; returns the BoundReport."""
    spec = bench_dataset(seed)
    L = generate_dataset(spec).lam_max
    eta = min(3.0 / (4.0 * L), Q / (4.0 * L * d_c))
    cfg = bench_config("zo_fo", seed, T=T, Q=Q, cut=d_c, eps=eps, lr_client=eta, lr_server=eta,
                       batch_size=batch_size)
    out = run_training(cfg)
    sc, ss = out.sigma2_max
    return bound_check(out, TheoryParams(L, sc, ss, d_c, T, Q, eta, eps))
