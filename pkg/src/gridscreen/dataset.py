"""Worst-contingency corpus generation and the six-channel grid-image encoding.

Channel layout of a grid image (each N x N)::

    0 base P (diagonal)   1 base Q (diagonal)   2 intact connection matrix
    3 critical P (diag)   4 critical Q (diag)   5 post-outage connection matrix

Load channels are min-max normalized per channel over the training split; the
connection channels are binary and pass through unchanged.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .case_model import NetworkCase, apply_outage, connection_matrix, is_connected
from .cpf import CpfError, CpfOptions, Termination, run_cpf, transfer_schedule
from .oracle import OutageId, map_jobs

N_CHANNELS = 6
LOAD_CHANNELS = (0, 1, 3, 4)
BASE_CHANNELS = (0, 1, 2)
TARGET_CHANNELS = (3, 4, 5)


class TooFewConverged(RuntimeError):
    pass


class NoEdgeSelected(ValueError):
    pass


@dataclass(frozen=True)
class ContingencySample:
    base_p: np.ndarray  # MW
    base_q: np.ndarray  # MVar
    outage: OutageId
    crit_p: np.ndarray
    crit_q: np.ndarray
    max_lambda: float
    seed: int

    def to_dict(self) -> dict:
        return {
            "base_p": self.base_p.tolist(),
            "base_q": self.base_q.tolist(),
            "outage": {"branch_index": self.outage.branch_index,
                       "from": self.outage.from_bus, "to": self.outage.to_bus},
            "crit_p": self.crit_p.tolist(),
            "crit_q": self.crit_q.tolist(),
            "max_lambda": self.max_lambda,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ContingencySample":
        o = d["outage"]
        return cls(
            base_p=np.asarray(d["base_p"], dtype=float),
            base_q=np.asarray(d["base_q"], dtype=float),
            outage=OutageId(int(o["branch_index"]), int(o["from"]), int(o["to"])),
            crit_p=np.asarray(d["crit_p"], dtype=float),
            crit_q=np.asarray(d["crit_q"], dtype=float),
            max_lambda=float(d["max_lambda"]),
            seed=int(d["seed"]),
        )


@dataclass(frozen=True)
class Discard:
    seed: int
    reason: str


def attempt_seed(master_seed: int, index: int) -> int:
    """Independent, order-free seed for attempt ``index`` of a run."""
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1, np.uint64)[0] >> 1)


def load_factors(rng: np.random.Generator, n: int) -> np.ndarray:
    """Standard-normal draws squashed affinely into [0.5, 1.5] (3 sigma clipped)."""
    z = rng.standard_normal(n)
    return 1.0 + 0.5 * np.clip(z / 3.0, -1.0, 1.0)


def perturb_loads(case: NetworkCase, rng: np.random.Generator) -> NetworkCase:
    f = load_factors(rng, case.n_bus)
    return case.with_loads(case.pd * f, case.qd * f)


def generate_sample(case: NetworkCase, schedule_scale: float, rng: np.random.Generator,
                    seed: int = 0, outage: int | None = None,
                    opts: CpfOptions = CpfOptions()) -> ContingencySample | Discard:
    """One Algorithm-1 attempt: perturb loads, drop one line, trace to collapse."""
    base = perturb_loads(case, rng)
    in_service = np.flatnonzero(case.in_service)
    k = int(in_service[rng.integers(len(in_service))]) if outage is None else int(outage)
    damaged = apply_outage(base, k)
    if not is_connected(damaged):
        return Discard(seed, "islanding")
    schedule = transfer_schedule(base, schedule_scale)
    try:
        trace = run_cpf(damaged, schedule, opts)
    except CpfError as exc:
        return Discard(seed, f"cpf: {exc}")
    if trace.terminated != Termination.NOSE_DETECTED or not trace.max_lambda > 0:
        return Discard(seed, f"cpf terminated {trace.terminated.value}")
    lam = trace.max_lambda
    return ContingencySample(
        base_p=base.pd,
        base_q=base.qd,
        outage=OutageId.of(case, k),
        crit_p=base.pd + lam * schedule.dp * case.base_mva,
        crit_q=base.qd + lam * schedule.dq * case.base_mva,
        max_lambda=lam,
        seed=seed,
    )


def _attempt_task(args):
    case, scale, seed, opts = args
    return generate_sample(case, scale, np.random.default_rng(seed), seed=seed, opts=opts)


def run_attempts(case: NetworkCase, n: int, schedule_scale: float = 2.5, master_seed: int = 0,
                 jobs: int = 1, opts: CpfOptions = CpfOptions()) -> list[ContingencySample | Discard]:
    seeds = [attempt_seed(master_seed, i) for i in range(n)]
    return map_jobs(_attempt_task, [(case, schedule_scale, s, opts) for s in seeds], jobs)


def select_worst(results, fraction: float = 0.1) -> list[ContingencySample]:
    """Lowest-margin ``ceil(fraction * converged)`` samples, ascending."""
    converged = [r for r in results if isinstance(r, ContingencySample)]
    converged.sort(key=lambda s: (s.max_lambda, s.seed))
    return converged[: math.ceil(fraction * len(converged))]


def generate_dataset(case: NetworkCase, n: int, schedule_scale: float = 2.5, master_seed: int = 0,
                     jobs: int = 1, opts: CpfOptions = CpfOptions()) -> list[ContingencySample]:
    if n < 10:
        raise ValueError("need at least 10 attempts")
    results = run_attempts(case, n, schedule_scale, master_seed, jobs, opts)
    n_ok = sum(isinstance(r, ContingencySample) for r in results)
    if n_ok < 10:
        raise TooFewConverged(f"only {n_ok} of {n} attempts converged")
    return select_worst(results)


# -- normalization and encoding ----------------------------------------------------------

@dataclass(frozen=True)
class Normalizer:
    mins: tuple[float, ...]
    maxs: tuple[float, ...]

    @classmethod
    def fit(cls, samples: list[ContingencySample]) -> "Normalizer":
        stacks = {
            0: np.concatenate([s.base_p for s in samples]),
            1: np.concatenate([s.base_q for s in samples]),
            3: np.concatenate([s.crit_p for s in samples]),
            4: np.concatenate([s.crit_q for s in samples]),
        }
        mins, maxs = [0.0] * N_CHANNELS, [1.0] * N_CHANNELS
        for ch, v in stacks.items():
            mins[ch], maxs[ch] = float(v.min()), float(v.max())
            if not maxs[ch] > mins[ch]:
                raise ValueError(f"channel {ch} is constant over the training split")
        return cls(tuple(mins), tuple(maxs))

    def normalize(self, ch: int, v):
        return (np.asarray(v, dtype=float) - self.mins[ch]) / (self.maxs[ch] - self.mins[ch])

    def denormalize(self, ch: int, v):
        return np.asarray(v, dtype=float) * (self.maxs[ch] - self.mins[ch]) + self.mins[ch]

    def to_dict(self) -> dict:
        return {"mins": list(self.mins), "maxs": list(self.maxs)}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(tuple(map(float, d["mins"])), tuple(map(float, d["maxs"])))


def outage_connection(case: NetworkCase, outage: OutageId) -> np.ndarray:
    return connection_matrix(apply_outage(case, outage.branch_index)).c


def encode_sample(sample: ContingencySample, case: NetworkCase, normalizer: Normalizer) -> np.ndarray:
    """6 x N x N grid image of one sample (float64)."""
    n = case.n_bus
    img = np.zeros((N_CHANNELS, n, n))
    diag = np.diag_indices(n)
    img[0][diag] = normalizer.normalize(0, sample.base_p)
    img[1][diag] = normalizer.normalize(1, sample.base_q)
    img[2] = connection_matrix(case).c
    img[3][diag] = normalizer.normalize(3, sample.crit_p)
    img[4][diag] = normalizer.normalize(4, sample.crit_q)
    img[5] = outage_connection(case, sample.outage)
    return img


def encode_base(base_p, base_q, case: NetworkCase, normalizer: Normalizer) -> np.ndarray:
    """Grid image carrying only the base state; target channels are zero."""
    n = case.n_bus
    img = np.zeros((N_CHANNELS, n, n))
    diag = np.diag_indices(n)
    img[0][diag] = normalizer.normalize(0, base_p)
    img[1][diag] = normalizer.normalize(1, base_q)
    img[2] = connection_matrix(case).c
    return img


def branch_for_pair(case: NetworkCase, i: int, j: int) -> int:
    """Lowest-index in-service branch joining internal buses i and j."""
    f, t = case.branch_ends
    hits = np.flatnonzero(case.in_service & (((f == i) & (t == j)) | ((f == j) & (t == i))))
    if len(hits) == 0:
        raise NoEdgeSelected(f"no in-service branch between buses {i} and {j}")
    return int(hits[0])


@dataclass(frozen=True)
class DecodedSample:
    crit_p: np.ndarray
    crit_q: np.ndarray
    outage: OutageId
    # pairs whose symmetrized channel-5 value dropped below 0.5 (diagnostic only)
    thresholded_removals: tuple[tuple[int, int], ...]


def decode_generated(tensor: np.ndarray, case: NetworkCase, normalizer: Normalizer) -> DecodedSample:
    """Read critical loads and the removed line out of a (generated) grid image."""
    tensor = np.asarray(tensor, dtype=float)
    n = case.n_bus
    if tensor.shape != (N_CHANNELS, n, n):
        raise ValueError(f"expected shape {(N_CHANNELS, n, n)}, got {tensor.shape}")
    if not np.all(np.isfinite(tensor)):
        raise NoEdgeSelected("non-finite generated tensor")
    diag = np.diag_indices(n)
    base_p = normalizer.denormalize(0, tensor[0][diag])
    base_q = normalizer.denormalize(1, tensor[1][diag])
    crit_p = normalizer.denormalize(3, tensor[3][diag])
    crit_q = normalizer.denormalize(4, tensor[4][diag])
    # critical loads sit on the ray from the base point, so they keep the base sign
    crit_p = np.where(base_p < 0, np.minimum(crit_p, 0.0), np.maximum(crit_p, 0.0))
    crit_q = np.where(base_q < 0, np.minimum(crit_q, 0.0), np.maximum(crit_q, 0.0))

    intact = connection_matrix(case).c
    sym = 0.5 * (tensor[5] + tensor[5].T)
    iu, ju = np.triu_indices(n, k=1)
    edge = intact[iu, ju] == 1
    iu, ju = iu[edge], ju[edge]
    vals = sym[iu, ju]
    best = int(np.argmin(vals))
    k = branch_for_pair(case, int(iu[best]), int(ju[best]))
    removed = tuple((case.buses[i].id, case.buses[j].id) for i, j, v in zip(iu, ju, vals) if v < 0.5)
    return DecodedSample(crit_p=crit_p, crit_q=crit_q, outage=OutageId.of(case, k), thresholded_removals=removed)


def decode_sample(img: np.ndarray, case: NetworkCase, normalizer: Normalizer, seed: int = 0,
                  max_lambda: float = math.nan) -> ContingencySample:
    """Inverse of :func:`encode_sample` (margin and seed are not stored in the image)."""
    diag = np.diag_indices(case.n_bus)
    dec = decode_generated(img, case, normalizer)
    return ContingencySample(
        base_p=normalizer.denormalize(0, img[0][diag]),
        base_q=normalizer.denormalize(1, img[1][diag]),
        outage=dec.outage,
        crit_p=normalizer.denormalize(3, img[3][diag]),
        crit_q=normalizer.denormalize(4, img[4][diag]),
        max_lambda=max_lambda,
        seed=seed,
    )


def save_dataset(samples: list[ContingencySample], path: str | Path, normalizer: Normalizer | None = None):
    """JSON Lines dataset plus a ``<name>.normalizer.json`` sidecar."""
    path = Path(path)
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict()) + "\n")
    if normalizer is not None:
        normalizer_path(path).write_text(json.dumps(normalizer.to_dict(), indent=2) + "\n")


def normalizer_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".normalizer.json")


def load_dataset(path: str | Path) -> tuple[list[ContingencySample], Normalizer | None]:
    path = Path(path)
    samples = [ContingencySample.from_dict(json.loads(line)) for line in path.read_text().splitlines() if line.strip()]
    side = normalizer_path(path)
    norm = Normalizer.from_dict(json.loads(side.read_text())) if side.exists() else None
    return samples, norm
