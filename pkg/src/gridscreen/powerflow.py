"""Newton-Raphson AC power flow in polar coordinates.

Mismatch ordering follows MATPOWER: active-power rows for PV then PQ buses,
followed by reactive-power rows for PQ buses. Unknowns are ordered the same
way (angles at PV+PQ buses, then magnitudes at PQ buses).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .case_model import NetworkCase


class SingularJacobian(ArithmeticError):
    pass


@dataclass(frozen=True)
class PFState:
    va: np.ndarray  # rad
    vm: np.ndarray  # pu

    @property
    def v(self) -> np.ndarray:
        return self.vm * np.exp(1j * self.va)

    @classmethod
    def from_complex(cls, v: np.ndarray) -> "PFState":
        return cls(va=np.angle(v), vm=np.abs(v))


@dataclass(frozen=True)
class PFSolution:
    state: PFState
    iterations: int
    converged: bool
    max_mismatch: float


def flat_start(case: NetworkCase) -> PFState:
    va = np.full(case.n_bus, np.deg2rad(case.buses[case.slack].va))
    return PFState(va=va, vm=case.v_setpoint.copy())


def injections(case: NetworkCase, state: PFState) -> tuple[np.ndarray, np.ndarray]:
    """Network active/reactive injections P_T, Q_T in pu."""
    v = state.v
    s = v * np.conj(case.ybus @ v)
    return s.real, s.imag


def _mismatch_vec(ybus, v, sbus, pvpq, pq):
    mis = v * np.conj(ybus @ v) - sbus
    return np.concatenate([mis.real[pvpq], mis.imag[pq]])


def mismatch(case: NetworkCase, state: PFState, sbus: np.ndarray | None = None) -> np.ndarray:
    """Calculated minus scheduled injection, pu, MATPOWER row ordering."""
    sbus = case.sbus if sbus is None else sbus
    return _mismatch_vec(case.ybus, state.v, sbus, case.pvpq, case.pq)


def dsbus_dv(ybus: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Partial derivatives of complex injections w.r.t. angle and magnitude (dense)."""
    ibus = ybus @ v
    vnorm = v / np.abs(v)
    ds_dvm = v[:, None] * np.conj(ybus * vnorm[None, :])
    ds_dvm[np.diag_indices_from(ds_dvm)] += np.conj(ibus) * vnorm
    ds_dva = -1j * v[:, None] * np.conj(ybus * v[None, :])
    ds_dva[np.diag_indices_from(ds_dva)] += 1j * v * np.conj(ibus)
    return ds_dva, ds_dvm


def _jacobian(ybus, v, pvpq, pq):
    ds_dva, ds_dvm = dsbus_dv(ybus, v)
    j11 = ds_dva.real[np.ix_(pvpq, pvpq)]
    j12 = ds_dvm.real[np.ix_(pvpq, pq)]
    j21 = ds_dva.imag[np.ix_(pq, pvpq)]
    j22 = ds_dvm.imag[np.ix_(pq, pq)]
    return np.block([[j11, j12], [j21, j22]])


def jacobian(case: NetworkCase, state: PFState) -> np.ndarray:
    """Analytic d(mismatch)/d(va[pvpq], vm[pq])."""
    return _jacobian(case.ybus, state.v, case.pvpq, case.pq)


def _update_voltage(va, vm, dx, pvpq, pq):
    npvpq = len(pvpq)
    va = va.copy()
    vm = vm.copy()
    va[pvpq] += dx[:npvpq]
    vm[pq] += dx[npvpq:]
    return va, vm


def solve_newton(
    case: NetworkCase,
    init: PFState | None = None,
    tol: float = 1e-8,
    max_iter: int = 30,
    sbus: np.ndarray | None = None,
) -> PFSolution:
    """Full Newton power flow. Non-convergence is reported in the result, not raised.

    PV buses hold their generator voltage setpoint; reactive limits are not
    enforced. ``sbus`` overrides the case's scheduled injections (used by the
    continuation solver and the lambda sweep).
    """
    if tol <= 0 or max_iter < 1:
        raise ValueError("tol must be positive and max_iter at least 1")
    init = flat_start(case) if init is None else init
    sbus = case.sbus if sbus is None else sbus
    ybus, pvpq, pq = case.ybus, case.pvpq, case.pq

    va = np.asarray(init.va, dtype=float).copy()
    vm = np.asarray(init.vm, dtype=float).copy()
    gen_buses = np.setdiff1d(np.arange(case.n_bus), pq)
    vm[gen_buses] = case.v_setpoint[gen_buses]
    va[case.slack] = np.deg2rad(case.buses[case.slack].va)

    v = vm * np.exp(1j * va)
    f = _mismatch_vec(ybus, v, sbus, pvpq, pq)
    norm = np.max(np.abs(f), initial=0.0)
    it = 0
    while norm > tol and it < max_iter:
        it += 1
        try:
            dx = np.linalg.solve(_jacobian(ybus, v, pvpq, pq), -f)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian(str(exc)) from None
        va, vm = _update_voltage(va, vm, dx, pvpq, pq)
        v = vm * np.exp(1j * va)
        f = _mismatch_vec(ybus, v, sbus, pvpq, pq)
        norm = np.max(np.abs(f), initial=0.0)
        if not np.isfinite(norm) or norm > 1e10:
            break
    converged = bool(norm <= tol)
    return PFSolution(state=PFState(va=va, vm=vm), iterations=it, converged=converged, max_mismatch=float(norm))
