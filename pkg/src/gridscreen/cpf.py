"""Continuation power flow along a fixed load-growth direction.

The load at every bus grows as ``S_load(lam) = S_load0 + lam * b`` with the
slack bus absorbing the active-power imbalance and PV buses holding voltage.
The trace runs predictor/corrector steps until the tangent's lambda component
changes sign (the nose of the PV curve), then bisects the step to pin the
maximum loadability ``max_lambda``.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .case_model import NetworkCase
from .powerflow import PFState, _jacobian, _mismatch_vec, solve_newton


class CpfError(ArithmeticError):
    pass


class BaseCaseDiverged(CpfError):
    pass


class SingularAugmentedSystem(CpfError):
    pass


class CorrectorDiverged(CpfError):
    pass


class Scheme(str, enum.Enum):
    NATURAL = "natural"
    PSEUDO_ARC_LENGTH = "pseudo_arc_length"


class Termination(str, enum.Enum):
    NOSE_DETECTED = "NoseDetected"
    TARGET_REACHED = "TargetReached"
    STEP_UNDERFLOW = "StepUnderflow"
    CORRECTOR_FAILED = "CorrectorFailed"
    MAX_STEPS = "MaxSteps"


@dataclass(frozen=True)
class TransferSchedule:
    """Per-bus load growth in pu: active entries for all buses, then reactive."""

    b: np.ndarray

    @property
    def n(self) -> int:
        return len(self.b) // 2

    @property
    def dp(self) -> np.ndarray:
        return self.b[: self.n]

    @property
    def dq(self) -> np.ndarray:
        return self.b[self.n:]

    def is_zero(self) -> bool:
        return not np.any(self.b)


def transfer_schedule(base: NetworkCase, target_scale: float = 2.5) -> TransferSchedule:
    """Schedule taking every load from its base value to ``target_scale`` times it."""
    if not target_scale > 1:
        raise ValueError(f"target_scale must exceed 1, got {target_scale}")
    k = target_scale - 1.0
    return TransferSchedule(b=np.concatenate([k * base.pd, k * base.qd]) / base.base_mva)


@dataclass(frozen=True)
class CpfOptions:
    scheme: Scheme = Scheme.PSEUDO_ARC_LENGTH
    step: float = 0.1
    step_min: float = 1e-5
    step_max: float = 0.5
    adapt: bool = True
    corrector_tol: float = 1e-8
    max_steps: int = 500
    corrector_max_iter: int = 10
    # steps that corrected within this many iterations grow the step
    easy_iters: int = 3
    lambda_target: float | None = None

    def __post_init__(self):
        if not 0 < self.step_min <= self.step <= self.step_max:
            raise ValueError("need 0 < step_min <= step <= step_max")


@dataclass(frozen=True)
class CpfPoint:
    state: PFState
    lam: float
    dlam: float
    vm_min_bus: int = 0

    @property
    def vm_min(self) -> float:
        return float(self.state.vm[self.vm_min_bus])


@dataclass
class CpfTrace:
    points: list[CpfPoint] = field(default_factory=list)
    max_lambda: float = math.nan
    critical_state: PFState | None = None
    terminated: Termination = Termination.TARGET_REACHED

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([p.lam for p in self.points])


class _Problem:
    """Packed continuation system over w = [va[pvpq], vm[pq], lam]."""

    def __init__(self, case: NetworkCase, schedule: TransferSchedule, template: PFState):
        self.case = case
        self.ybus = case.ybus
        self.pvpq = case.pvpq
        self.pq = case.pq
        self.npvpq = len(self.pvpq)
        self.sbus0 = case.sbus
        self.ds = schedule.dp + 1j * schedule.dq
        self.f_lam = np.concatenate([schedule.dp[self.pvpq], schedule.dq[self.pq]])
        self.va0 = np.asarray(template.va, dtype=float).copy()
        self.vm0 = np.asarray(template.vm, dtype=float).copy()
        self.e_lam = np.zeros(self.npvpq + len(self.pq) + 1)
        self.e_lam[-1] = 1.0

    def pack(self, state: PFState, lam: float) -> np.ndarray:
        return np.concatenate([state.va[self.pvpq], state.vm[self.pq], [lam]])

    def unpack(self, w: np.ndarray) -> PFState:
        va = self.va0.copy()
        vm = self.vm0.copy()
        va[self.pvpq] = w[: self.npvpq]
        vm[self.pq] = w[self.npvpq:-1]
        return PFState(va=va, vm=vm)

    def voltage(self, w: np.ndarray) -> np.ndarray:
        s = self.unpack(w)
        return s.vm * np.exp(1j * s.va)

    def sbus(self, lam: float) -> np.ndarray:
        return self.sbus0 - lam * self.ds

    def residual(self, w: np.ndarray) -> np.ndarray:
        return _mismatch_vec(self.ybus, self.voltage(w), self.sbus(w[-1]), self.pvpq, self.pq)

    def augmented(self, w: np.ndarray, row: np.ndarray) -> np.ndarray:
        j = _jacobian(self.ybus, self.voltage(w), self.pvpq, self.pq)
        top = np.hstack([j, self.f_lam[:, None]])
        return np.vstack([top, row[None, :]])

    def tangent(self, w: np.ndarray, row: np.ndarray) -> np.ndarray:
        """Unit tangent solving [J f_lam; row] z = e_last."""
        try:
            z = np.linalg.solve(self.augmented(w, row), self.e_lam)
        except np.linalg.LinAlgError as exc:
            raise SingularAugmentedSystem(str(exc)) from None
        if not np.all(np.isfinite(z)):
            raise SingularAugmentedSystem("non-finite tangent")
        return z / np.linalg.norm(z)

    def correct(self, w_hat: np.ndarray, z: np.ndarray, scheme: Scheme, tol: float, max_iter: int):
        """Newton on [f(w); p(w)] = 0; returns (w, iterations)."""
        row = self.e_lam if scheme == Scheme.NATURAL else z
        w = w_hat.copy()
        for it in range(max_iter + 1):
            f = self.residual(w)
            p = row @ (w - w_hat)
            norm = max(np.max(np.abs(f), initial=0.0), abs(p))
            if not np.isfinite(norm):
                break
            if norm <= tol:
                return w, it
            if it == max_iter:
                break
            try:
                dw = np.linalg.solve(self.augmented(w, row), -np.append(f, p))
            except np.linalg.LinAlgError:
                break
            w = w + dw
        raise CorrectorDiverged(f"corrector did not reach {tol:g} within {max_iter} iterations")


def _row_for(problem: _Problem, scheme: Scheme, prev_tangent: np.ndarray | None) -> np.ndarray:
    if scheme == Scheme.NATURAL or prev_tangent is None:
        return problem.e_lam
    return prev_tangent


def predictor(state: PFState, lam: float, prev_tangent, case: NetworkCase, b: TransferSchedule,
              opts: CpfOptions = CpfOptions(), step: float | None = None):
    """Tangent predictor step; returns ``(state_hat, lambda_hat, unit tangent)``."""
    problem = _Problem(case, b, state)
    w = problem.pack(state, lam)
    z = problem.tangent(w, _row_for(problem, opts.scheme, prev_tangent))
    if prev_tangent is not None and z @ prev_tangent < 0:
        z = -z
    alpha = opts.step if step is None else step
    w_hat = w + alpha * z
    return problem.unpack(w_hat), float(w_hat[-1]), z


def corrector(state_hat: PFState, lambda_hat: float, tangent: np.ndarray, case: NetworkCase,
              b: TransferSchedule, opts: CpfOptions = CpfOptions()):
    """Newton corrector; returns ``(state, lambda, iterations)`` or raises CorrectorDiverged."""
    problem = _Problem(case, b, state_hat)
    w_hat = problem.pack(state_hat, lambda_hat)
    w, iters = problem.correct(w_hat, tangent, opts.scheme, opts.corrector_tol, opts.corrector_max_iter)
    if opts.scheme == Scheme.NATURAL:
        w[-1] = lambda_hat
    return problem.unpack(w), float(w[-1]), iters


def run_cpf(case: NetworkCase, schedule: TransferSchedule, opts: CpfOptions = CpfOptions()) -> CpfTrace:
    """Trace the nose curve from the base solution and return the collapse margin."""
    base = solve_newton(case, tol=opts.corrector_tol)
    if not base.converged:
        raise BaseCaseDiverged(f"base power flow did not converge (mismatch {base.max_mismatch:.3g})")
    problem = _Problem(case, schedule, base.state)
    trace = CpfTrace()

    def point(w, z):
        s = problem.unpack(w)
        return CpfPoint(state=s, lam=float(w[-1]), dlam=float(z[-1]), vm_min_bus=int(np.argmin(s.vm)))

    def finish(term: Termination) -> CpfTrace:
        trace.terminated = term
        lams = trace.lambdas
        k = int(np.argmax(lams))
        trace.max_lambda = float(lams[k])
        trace.critical_state = trace.points[k].state
        return trace

    w = problem.pack(base.state, 0.0)
    if schedule.is_zero():
        trace.points.append(CpfPoint(state=base.state, lam=0.0, dlam=0.0,
                                     vm_min_bus=int(np.argmin(base.state.vm))))
        trace.critical_state = base.state
        trace.terminated = Termination.TARGET_REACHED
        return trace

    try:
        z = problem.tangent(w, problem.e_lam)
    except SingularAugmentedSystem:
        raise BaseCaseDiverged("singular augmented system at the base point") from None
    trace.points.append(point(w, z))

    natural = opts.scheme == Scheme.NATURAL
    alpha = opts.step
    tol, max_iter = opts.corrector_tol, opts.corrector_max_iter
    for _ in range(opts.max_steps):
        try:
            w_new, iters = problem.correct(w + alpha * z, z, opts.scheme, tol, max_iter)
            z_new = problem.tangent(w_new, problem.e_lam if natural else z)
        except CorrectorDiverged:
            alpha /= 2
            if alpha < opts.step_min:
                return finish(Termination.STEP_UNDERFLOW)
            continue
        except SingularAugmentedSystem:
            return finish(Termination.CORRECTOR_FAILED)

        if not natural and z_new[-1] <= 0:
            trace.points.extend(_refine_nose(problem, w, z, w_new, z_new, alpha / 2, opts, point))
            return finish(Termination.NOSE_DETECTED)

        trace.points.append(point(w_new, z_new))
        w, z = w_new, z_new
        if opts.lambda_target is not None and w[-1] >= opts.lambda_target:
            return finish(Termination.TARGET_REACHED)
        if opts.adapt and iters <= opts.easy_iters:
            alpha = min(alpha * 1.5, opts.step_max)
    return finish(Termination.MAX_STEPS)


def _refine_nose(problem: _Problem, w_lo, z_lo, w_post, z_post, h, opts: CpfOptions, point):
    """Bisect the step from the last pre-nose point until it falls below step_min.

    Returns the new points in acceptance order; the final entry is the closest
    point found past the nose (tangent lambda component <= 0).
    """
    added = []
    guard = 10_000
    while h >= opts.step_min and guard:
        guard -= 1
        try:
            w_q, _ = problem.correct(w_lo + h * z_lo, z_lo, opts.scheme, opts.corrector_tol, opts.corrector_max_iter)
            z_q = problem.tangent(w_q, z_lo)
        except CpfError:
            h /= 2
            continue
        if z_q[-1] > 0:
            added.append(point(w_q, z_q))
            w_lo, z_lo = w_q, z_q
        else:
            w_post, z_post = w_q, z_q
            h /= 2
    added.append(point(w_post, z_post))
    return added


def write_trace_csv(trace: CpfTrace, path: str | Path, case: NetworkCase | None = None) -> None:
    """Dump a trace as CSV (step, lambda, dlambda, vm_min_bus, vm_min)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "lambda", "dlambda", "vm_min_bus", "vm_min"])
        for k, p in enumerate(trace.points):
            bus = case.buses[p.vm_min_bus].id if case is not None else p.vm_min_bus
            writer.writerow([k, repr(p.lam), repr(p.dlam), bus, repr(p.vm_min)])
