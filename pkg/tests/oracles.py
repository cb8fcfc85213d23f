"""Independent reference computations used by the test-suite."""
from __future__ import annotations

from collections import deque

import numpy as np

from gridscreen.powerflow import solve_newton


def sweep_max_lambda(case, schedule, step=1e-3, lam_cap=20.0):
    """Largest lambda on a uniform grid for which a warm-started Newton solve converges."""
    ds = schedule.dp + 1j * schedule.dq
    sol = solve_newton(case)
    if not sol.converged:
        return None
    last, state, k = 0.0, sol.state, 0
    while k * step < lam_cap:
        k += 1
        lam = k * step
        sol = solve_newton(case, init=state, sbus=case.sbus - lam * ds, max_iter=50)
        if not sol.converged:
            break
        last, state = lam, sol.state
    return last


def bfs_connected(case):
    ids = [b.id for b in case.buses]
    adj = {i: set() for i in ids}
    for br in case.branches:
        if br.status:
            adj[br.from_bus].add(br.to_bus)
            adj[br.to_bus].add(br.from_bus)
    seen = {ids[0]}
    queue = deque([ids[0]])
    while queue:
        u = queue.popleft()
        for v in adj[u] - seen:
            seen.add(v)
            queue.append(v)
    return len(seen) == len(ids)


def loop_injections(case, va, vm):
    """Trigonometric power sums written out bus by bus."""
    y = case.ybus
    n = case.n_bus
    p = np.zeros(n)
    q = np.zeros(n)
    for i in range(n):
        for j in range(n):
            mag, ang = abs(y[i, j]), np.angle(y[i, j])
            p[i] += vm[i] * vm[j] * mag * np.cos(va[i] - va[j] - ang)
            q[i] += vm[i] * vm[j] * mag * np.sin(va[i] - va[j] - ang)
    return p, q


def stamped_ybus(case):
    """Branch-by-branch admittance stamping with explicit loops."""
    n = case.n_bus
    idx = case.index
    y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        if not br.status:
            continue
        f, t = idx[br.from_bus], idx[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        half = 0.5j * br.b_charging
        a = br.tap
        y[f, f] += (ys + half) / (a * a)
        y[t, t] += ys + half
        y[f, t] -= ys / a
        y[t, f] -= ys / a
    for i, b in enumerate(case.buses):
        y[i, i] += complex(b.gs, b.bs) / case.base_mva
    return y
