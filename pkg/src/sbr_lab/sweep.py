"""Multi-seed sweeps over beta, similarity measure or sampling rate."""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import math

from .config import TrainConfig
from .train import RunReport, run_seeds

log = logging.getLogger(__name__)

AXES = ("beta_grid", "measure", "sampling_rate")
_AXIS_FIELD = {"beta_grid": "beta", "measure": "measure", "sampling_rate": "sampling_rate"}


@dataclass
class SweepCell:
    axis: str
    value: object
    report: Optional[RunReport] = None
    error: Optional[str] = None
    beta: Optional[float] = None
    tried: list = field(default_factory=list)  # (beta, mean) pairs when beta was tuned

    @property
    def ok(self) -> bool:
        return self.report is not None

    @property
    def mean(self) -> float:
        return self.report.final["test_acc_mean"] if self.ok else math.nan

    @property
    def std(self) -> float:
        return self.report.final["test_acc_std"] if self.ok else math.nan

    def row(self) -> dict:
        return {"axis": self.axis, "value": self.value, "beta": self.beta,
                "test_acc_mean": self.mean, "test_acc_std": self.std,
                "test_accs": self.report.final["test_accs"] if self.ok else None,
                "tried": self.tried, "error": self.error}


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("SBR_LAB_THREADS", "1")))
    except ValueError:
        return 1


def _run_one(cfg: TrainConfig, bench) -> tuple:
    try:
        return run_seeds(cfg, bench.source, bench.train, bench.test), None
    except Exception as exc:  # a failed cell is recorded, not fatal
        return None, f"{type(exc).__name__}: {exc}"


def _map(jobs: list, bench, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [_run_one(cfg, bench) for cfg in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, jobs, [bench] * len(jobs)))


def sweep(template: TrainConfig, axis: str, values: Sequence, bench,
          beta_grids: Optional[dict] = None, workers: Optional[int] = None) -> list:
    """One multi-seed run per axis value, sorted by value.

    With ``beta_grids`` (measure -> betas) every cell is the best of its
    measure's grid by mean test accuracy; the tried betas are kept on the cell.
    """
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}")
    if not values:
        raise ValueError("sweep needs at least one value")
    workers = default_workers() if workers is None else workers
    key = _AXIS_FIELD[axis]

    jobs, owners = [], []
    for v in values:
        cfg = template.with_(**{key: v})
        measure = cfg.measure
        betas = beta_grids.get(measure) if beta_grids and cfg.method == "sbr" and axis != "beta_grid" else None
        for b in (betas or [cfg.beta]):
            jobs.append(cfg.with_(beta=b))
            owners.append(v)
    results = _map(jobs, bench, workers)

    cells = []
    for v in values:
        mine = [(cfg, res) for cfg, owner, res in zip(jobs, owners, results) if owner == v]
        cell = SweepCell(axis, v)
        errors = []
        for cfg, (rep, err) in mine:
            if err is not None:
                errors.append(f"beta={cfg.beta}: {err}")
                log.warning("sweep cell %s=%s beta=%s failed: %s", axis, v, cfg.beta, err)
                cell.tried.append((cfg.beta, None))
                continue
            cell.tried.append((cfg.beta, rep.final["test_acc_mean"]))
            if cell.report is None or rep.final["test_acc_mean"] > cell.mean:
                cell.report, cell.beta = rep, cfg.beta
        if cell.report is None:
            cell.error = "; ".join(errors)
        cells.append(cell)
    cells.sort(key=lambda c: (str(type(c.value)), c.value))
    return cells


def write_table(cells: list, path) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as fh:
        for c in cells:
            fh.write(json.dumps(c.row()) + "\n")
    os.replace(tmp, path)


def format_table(cells: list) -> str:
    lines = [f"{'value':>18}  {'beta':>9}  {'mean':>7}  {'std':>7}"]
    for c in cells:
        if c.ok:
            lines.append(f"{str(c.value):>18}  {c.beta:>9.3g}  {c.mean:>7.4f}  {c.std:>7.4f}")
        else:
            lines.append(f"{str(c.value):>18}  {'-':>9}  {'failed':>7}  {c.error}")
    return "\n".join(lines)
