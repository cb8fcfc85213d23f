"""Brute-force N-1 line-outage ranking by voltage-collapse margin."""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .case_model import NetworkCase, apply_outage, is_connected
from .cpf import CpfError, CpfOptions, Termination, TransferSchedule, run_cpf, transfer_schedule


class NotInTable(KeyError):
    pass


# margins closer than this are treated as ties
TIE_TOL = 1e-9


@dataclass(frozen=True, order=True)
class OutageId:
    branch_index: int
    from_bus: int
    to_bus: int

    @classmethod
    def of(cls, case: NetworkCase, k: int) -> "OutageId":
        br = case.branches[k]
        return cls(k, br.from_bus, br.to_bus)


@dataclass(frozen=True)
class RankRow:
    outage: OutageId
    max_lambda: float
    rank: int | None  # None for unconverged rows, which are not ranked


@dataclass
class RankingTable:
    rows: list[RankRow]
    base_p: np.ndarray
    base_q: np.ndarray
    failed: list[OutageId] = field(default_factory=list)

    @property
    def m(self) -> int:
        return len(self.rows)


def enumerate_n1(case: NetworkCase) -> list[OutageId]:
    """In-service branches whose loss keeps the network in one piece."""
    out = []
    for k, br in enumerate(case.branches):
        if br.status and is_connected(apply_outage(case, k)):
            out.append(OutageId.of(case, k))
    return out


def outage_margin(case: NetworkCase, branch_index: int, schedule: TransferSchedule,
                  opts: CpfOptions = CpfOptions()) -> float | None:
    """max_lambda of the case with one branch removed, or None when the CPF fails."""
    try:
        trace = run_cpf(apply_outage(case, branch_index), schedule, opts)
    except CpfError:
        return None
    if trace.terminated != Termination.NOSE_DETECTED or not math.isfinite(trace.max_lambda):
        return None
    return trace.max_lambda


def _margin_task(args):
    case, k, schedule, opts = args
    return outage_margin(case, k, schedule, opts)


def map_jobs(fn, tasks, jobs: int = 1):
    """Ordered map, optionally over a process pool. Results never depend on ``jobs``."""
    tasks = list(tasks)
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))


def competition_ranks(values) -> list[int]:
    """1-based ranks of already-sorted values; near-equal values share the lower rank."""
    ranks = []
    for i, v in enumerate(values):
        if i and abs(v - values[i - 1]) <= TIE_TOL:
            ranks.append(ranks[-1])
        else:
            ranks.append(i + 1)
    return ranks


def rank_all(case: NetworkCase, schedule: TransferSchedule | None = None,
             opts: CpfOptions = CpfOptions(), jobs: int = 1) -> RankingTable:
    """Run the CPF for every feasible N-1 outage and rank by ascending margin."""
    schedule = transfer_schedule(case) if schedule is None else schedule
    outages = enumerate_n1(case)
    margins = map_jobs(_margin_task, [(case, o.branch_index, schedule, opts) for o in outages], jobs)
    ok = [(m, o) for m, o in zip(margins, outages) if m is not None]
    failed = [o for m, o in zip(margins, outages) if m is None]
    # ties in margin fall back to (from, to) order so the table is input-order independent
    ok.sort(key=lambda mo: (mo[0], mo[1].from_bus, mo[1].to_bus, mo[1].branch_index))
    ranks = competition_ranks([m for m, _ in ok])
    rows = [RankRow(outage=o, max_lambda=m, rank=r) for (m, o), r in zip(ok, ranks)]
    return RankingTable(rows=rows, base_p=case.pd, base_q=case.qd, failed=failed)


def rank_of(outage: OutageId | int, table: RankingTable) -> int:
    k = outage.branch_index if isinstance(outage, OutageId) else int(outage)
    for row in table.rows:
        if row.outage.branch_index == k:
            return row.rank
    raise NotInTable(f"branch {k} is not a ranked contingency")


def margin_of(outage: OutageId | int, table: RankingTable) -> float:
    k = outage.branch_index if isinstance(outage, OutageId) else int(outage)
    for row in table.rows:
        if row.outage.branch_index == k:
            return row.max_lambda
    raise NotInTable(f"branch {k} is not a ranked contingency")


def write_ranking_csv(table: RankingTable, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["outage_from", "outage_to", "max_lambda", "rank"])
        for row in table.rows:
            writer.writerow([row.outage.from_bus, row.outage.to_bus, repr(row.max_lambda), row.rank])
