"""Sweeps over (mode, Q, cut, seed) with one CSV per cell plus a summary."""

from __future__ import annotations

import csv
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

from .accounting import TheoryParams, bound_check
from .data import generate_dataset
from .roles import TrainingConfig, TrainLog, run_training

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = (
    "mode", "Q", "k", "seed", "status", "final_loss", "final_stationarity",
    "client_to_server_bytes", "server_to_client_bytes", "bound",
)


@dataclass(frozen=True)
class CampaignSpec:
    base: TrainingConfig
    modes: tuple[str, ...] = ("zo_fo",)
    qs: tuple[int, ...] = (10,)
    cuts: tuple[int, ...] = (1,)
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "runs"
    jobs: int = 1

    def cells(self) -> list[TrainingConfig]:
        """Cartesian product in (mode, Q, cut, seed) order."""
        return [
            replace(self.base, mode=m, Q=q, cut=k, master_seed=s)
            for m, q, k, s in itertools.product(self.modes, self.qs, self.cuts, self.seeds)
        ]


def cell_name(cfg: TrainingConfig) -> str:
    return f"{cfg.mode}_Q{cfg.Q}_k{cfg.cut}_s{cfg.master_seed}.csv"


def theory_for(cfg: TrainingConfig, train_log: TrainLog) -> TheoryParams | None:
    """Bound parameters for hybrid runs on the quadratic benchmark."""
    if cfg.mode != "zo_fo" or cfg.layers or not cfg.instrument:
        return None
    L = generate_dataset(cfg.dataset).lam_max
    sc, ss = train_log.sigma2_max
    eta = min(cfg.lr_client, cfg.lr_server)
    return TheoryParams(L, sc, ss, cfg.cut, cfg.T, cfg.Q, eta, cfg.eps)


def _run_cell(cfg: TrainingConfig, out_dir: str) -> dict:
    row = {"mode": cfg.mode, "Q": cfg.Q, "k": cfg.cut, "seed": cfg.master_seed}
    try:
        train_log = run_training(cfg)
    except Exception as exc:
        log.error("cell %s failed: %s", cell_name(cfg), exc)
        row.update(status=f"error: {type(exc).__name__}", final_loss="", final_stationarity="",
                   client_to_server_bytes="", server_to_client_bytes="", bound="")
        return row
    train_log.write_csv(Path(out_dir) / cell_name(cfg))
    theory = theory_for(cfg, train_log)
    bound = bound_check(train_log, theory).bound if theory else math.nan
    row.update(
        status="ok",
        final_loss=repr(train_log.final_loss),
        final_stationarity=repr(train_log.stationarity()),
        client_to_server_bytes=train_log.ledger.client_to_server_bytes,
        server_to_client_bytes=train_log.ledger.server_to_client_bytes,
        bound="" if math.isnan(bound) else repr(bound),
    )
    return row


def run_campaign(spec: CampaignSpec) -> Path:
    """Run every cell; a failing cell is recorded and the sweep continues."""
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = spec.cells()
    if spec.jobs > 1:
        with ProcessPoolExecutor(spec.jobs) as pool:
            rows = list(pool.map(_run_cell, cells, itertools.repeat(str(out))))
    else:
        rows = [_run_cell(c, str(out)) for c in cells]
    summary = out / "summary.csv"
    with open(summary, "w", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return summary
