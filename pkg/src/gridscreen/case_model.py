"""Power-system case data: MATPOWER parsing, validation, outages, Ybus and topology.

Cases are immutable. Every mutating helper (``apply_outage``, ``with_loads``)
returns a fresh :class:`NetworkCase`.
"""
from __future__ import annotations

import dataclasses
import enum
import json
import re
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components


class CaseError(ValueError):
    """Base class for case parsing and validation problems."""


class MissingSection(CaseError):
    pass


class MalformedRow(CaseError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class NoSlackBus(CaseError):
    pass


class DuplicateBusId(CaseError):
    pass


class AlreadyOut(CaseError):
    pass


class BusType(enum.IntEnum):
    # MATPOWER bus type codes
    PQ = 1
    PV = 2
    SLACK = 3


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusType
    pd: float
    qd: float
    gs: float = 0.0
    bs: float = 0.0
    vm: float = 1.0
    va: float = 0.0
    base_kv: float = 0.0


@dataclass(frozen=True)
class Generator:
    bus: int
    pg: float
    qg: float
    vg: float
    status: bool = True


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap: float = 1.0
    status: bool = True


@dataclass(frozen=True)
class ConnectionMatrix:
    n: int
    c: np.ndarray = field(repr=False)

    def __eq__(self, other):
        return isinstance(other, ConnectionMatrix) and self.n == other.n and np.array_equal(self.c, other.c)

    __hash__ = None


@dataclass(frozen=True, eq=True)
class NetworkCase:
    base_mva: float
    buses: tuple[Bus, ...]
    gens: tuple[Generator, ...]
    branches: tuple[Branch, ...]
    name: str = "case"

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "gens", tuple(self.gens))
        object.__setattr__(self, "branches", tuple(self.branches))
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DuplicateBusId(f"duplicate bus ids: {dup}")
        n_slack = sum(b.kind == BusType.SLACK for b in self.buses)
        if n_slack != 1:
            raise NoSlackBus(f"expected exactly one slack bus, found {n_slack}")
        known = set(ids)
        for b in self.buses:
            if not b.vm > 0:
                raise CaseError(f"bus {b.id}: vm must be positive")
        for g in self.gens:
            if g.bus not in known:
                raise CaseError(f"generator at unknown bus {g.bus}")
        for k, br in enumerate(self.branches):
            if br.from_bus not in known or br.to_bus not in known:
                raise CaseError(f"branch {k} references an unknown bus")
            if br.from_bus == br.to_bus:
                raise CaseError(f"branch {k} is a self loop")
            if br.x == 0 and br.r == 0:
                raise CaseError(f"branch {k} has zero impedance")
            if not br.tap > 0:
                raise CaseError(f"branch {k}: tap must be positive")

    # -- indexing -----------------------------------------------------------------

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @cached_property
    def index(self) -> dict[int, int]:
        """External bus id -> dense internal index."""
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def bus_types(self) -> np.ndarray:
        return np.array([int(b.kind) for b in self.buses])

    @property
    def slack(self) -> int:
        return int(np.flatnonzero(self.bus_types == BusType.SLACK)[0])

    @cached_property
    def pv(self) -> np.ndarray:
        return np.flatnonzero(self.bus_types == BusType.PV)

    @cached_property
    def pq(self) -> np.ndarray:
        return np.flatnonzero(self.bus_types == BusType.PQ)

    @cached_property
    def pvpq(self) -> np.ndarray:
        return np.concatenate([self.pv, self.pq])

    @property
    def pd(self) -> np.ndarray:
        return np.array([b.pd for b in self.buses])

    @property
    def qd(self) -> np.ndarray:
        return np.array([b.qd for b in self.buses])

    @cached_property
    def load_buses(self) -> np.ndarray:
        """Internal indices of buses carrying nonzero active or reactive load."""
        return np.flatnonzero((self.pd != 0) | (self.qd != 0))

    @cached_property
    def branch_ends(self) -> tuple[np.ndarray, np.ndarray]:
        f = np.array([self.index[br.from_bus] for br in self.branches], dtype=int)
        t = np.array([self.index[br.to_bus] for br in self.branches], dtype=int)
        return f, t

    @cached_property
    def in_service(self) -> np.ndarray:
        return np.array([br.status for br in self.branches], dtype=bool)

    @cached_property
    def sbus(self) -> np.ndarray:
        """Scheduled complex injections (gen - load) in pu."""
        s = -(self.pd + 1j * self.qd)
        for g in self.gens:
            if g.status:
                s[self.index[g.bus]] += g.pg + 1j * g.qg
        return s / self.base_mva

    @cached_property
    def v_setpoint(self) -> np.ndarray:
        """Voltage magnitude targets: generator Vg at PV/slack buses, case Vm elsewhere."""
        vm = np.array([b.vm for b in self.buses])
        for g in self.gens:
            i = self.index[g.bus]
            if g.status and self.bus_types[i] != BusType.PQ:
                vm[i] = g.vg
        return vm

    @cached_property
    def ybus(self) -> np.ndarray:
        return build_ybus(self)

    # -- derived cases --------------------------------------------------------------

    def with_loads(self, pd, qd) -> "NetworkCase":
        buses = tuple(dataclasses.replace(b, pd=float(p), qd=float(q)) for b, p, q in zip(self.buses, pd, qd))
        return dataclasses.replace(self, buses=buses)

    def with_branch_status(self, k: int, status: bool) -> "NetworkCase":
        branches = list(self.branches)
        branches[k] = dataclasses.replace(branches[k], status=status)
        return dataclasses.replace(self, branches=tuple(branches))

    def n_in_service(self) -> int:
        return int(self.in_service.sum())


# -- MATPOWER text --------------------------------------------------------------------

_SECTION_RE = r"mpc\.{name}\s*=\s*\[(?P<body>.*?)\]\s*;?"


def _strip_comment(line: str) -> str:
    return line.split("%", 1)[0]


def _parse_matrix(text: str, name: str, min_cols: int) -> list[tuple[int, list[float]]]:
    m = re.search(_SECTION_RE.format(name=name), text, flags=re.S)
    if m is None:
        raise MissingSection(f"no mpc.{name} section")
    first_line = text.count("\n", 0, m.start("body")) + 1
    rows = []
    for offset, raw in enumerate(m.group("body").split("\n")):
        lineno = first_line + offset
        for chunk in _strip_comment(raw).split(";"):
            tokens = chunk.replace(",", " ").split()
            if not tokens:
                continue
            try:
                values = [float(tok) for tok in tokens]
            except ValueError as exc:
                raise MalformedRow(lineno, f"non-numeric entry in mpc.{name}: {exc}") from None
            if len(values) < min_cols:
                raise MalformedRow(lineno, f"mpc.{name} row has {len(values)} columns, need {min_cols}")
            rows.append((lineno, values))
    return rows


def parse_matpower_case(text: str, name: str | None = None) -> NetworkCase:
    """Parse the body of a MATPOWER version-2 case function.

    Only the power-flow columns are read; ratings, angle limits, cost data and
    any trailing columns are ignored.
    """
    m = re.search(r"mpc\.baseMVA\s*=\s*([^;\n%]+)", text)
    if m is None:
        raise MissingSection("no mpc.baseMVA assignment")
    try:
        base_mva = float(m.group(1))
    except ValueError:
        raise MalformedRow(text.count("\n", 0, m.start()) + 1, "baseMVA is not a number") from None
    if name is None:
        fn = re.search(r"function\s+\w+\s*=\s*(\w+)", text)
        name = fn.group(1) if fn else "case"

    buses = []
    for lineno, v in _parse_matrix(text, "bus", 10):
        try:
            kind = BusType(int(v[1]))
        except ValueError:
            # isolated buses (type 4) are not supported by the solvers
            raise MalformedRow(lineno, f"unsupported bus type {v[1]:g}") from None
        buses.append(Bus(id=int(v[0]), kind=kind, pd=v[2], qd=v[3], gs=v[4], bs=v[5],
                         vm=v[7], va=v[8], base_kv=v[9]))
    gens = [Generator(bus=int(v[0]), pg=v[1], qg=v[2], vg=v[5], status=v[7] > 0)
            for _, v in _parse_matrix(text, "gen", 8)]
    branches = []
    for lineno, v in _parse_matrix(text, "branch", 11):
        tap = v[8] if v[8] != 0 else 1.0
        branches.append(Branch(from_bus=int(v[0]), to_bus=int(v[1]), r=v[2], x=v[3],
                               b_charging=v[4], tap=tap, status=v[10] > 0))
    return NetworkCase(base_mva=base_mva, buses=tuple(buses), gens=tuple(gens),
                       branches=tuple(branches), name=name)


def _num(v: float) -> str:
    return repr(float(v)) if not float(v).is_integer() else str(int(v))


def to_matpower(case: NetworkCase) -> str:
    """Serialize the columns this package reads back into MATPOWER text."""
    lines = [f"function mpc = {case.name}", "mpc.version = '2';", f"mpc.baseMVA = {_num(case.base_mva)};", "",
             "%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV", "mpc.bus = ["]
    for b in case.buses:
        cols = [b.id, int(b.kind), b.pd, b.qd, b.gs, b.bs, 1, b.vm, b.va, b.base_kv]
        lines.append("\t" + "\t".join(_num(c) for c in cols) + ";")
    lines += ["];", "", "%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus", "mpc.gen = ["]
    for g in case.gens:
        cols = [g.bus, g.pg, g.qg, 0, 0, g.vg, case.base_mva, int(g.status)]
        lines.append("\t" + "\t".join(_num(c) for c in cols) + ";")
    lines += ["];", "", "%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus", "mpc.branch = ["]
    for br in case.branches:
        cols = [br.from_bus, br.to_bus, br.r, br.x, br.b_charging, 0, 0, 0, br.tap, 0, int(br.status)]
        lines.append("\t" + "\t".join(_num(c) for c in cols) + ";")
    lines += ["];", ""]
    return "\n".join(lines)


def case_to_dict(case: NetworkCase) -> dict:
    return {
        "name": case.name,
        "base_mva": case.base_mva,
        "buses": [{**dataclasses.asdict(b), "kind": b.kind.name} for b in case.buses],
        "gens": [dataclasses.asdict(g) for g in case.gens],
        "branches": [dataclasses.asdict(br) for br in case.branches],
    }


def case_from_dict(data: dict) -> NetworkCase:
    buses = tuple(Bus(**{**b, "kind": BusType[b["kind"]]}) for b in data["buses"])
    return NetworkCase(
        base_mva=float(data["base_mva"]),
        buses=buses,
        gens=tuple(Generator(**g) for g in data["gens"]),
        branches=tuple(Branch(**br) for br in data["branches"]),
        name=data.get("name", "case"),
    )


def dump_case_json(case: NetworkCase) -> str:
    return json.dumps(case_to_dict(case), indent=2, sort_keys=True)


def load_case_json(text: str) -> NetworkCase:
    return case_from_dict(json.loads(text))


BUNDLED_CASES = ("case6ww", "case14", "case30")


def load_case(path_or_name: str | Path) -> NetworkCase:
    """Load a case from a ``.m``/``.json`` path or one of the bundled case names."""
    p = Path(path_or_name)
    if not p.exists() and str(path_or_name) in BUNDLED_CASES:
        text = resources.files("gridscreen.cases").joinpath(f"{path_or_name}.m").read_text()
        return parse_matpower_case(text)
    text = p.read_text()
    if p.suffix == ".json":
        return load_case_json(text)
    return parse_matpower_case(text)


# -- network matrices ---------------------------------------------------------------------

def build_ybus(case: NetworkCase) -> np.ndarray:
    """Dense bus admittance matrix from pi-model branches, taps and bus shunts."""
    n = case.n_bus
    f, t = case.branch_ends
    on = case.in_service
    r = np.array([br.r for br in case.branches])
    x = np.array([br.x for br in case.branches])
    bc = np.array([br.b_charging for br in case.branches])
    tap = np.array([br.tap for br in case.branches])

    ys = on / (r + 1j * x)
    ytt = ys + 1j * on * bc / 2
    yff = ytt / tap**2
    yft = -ys / tap
    ytf = -ys / tap

    y = np.zeros((n, n), dtype=complex)
    np.add.at(y, (f, f), yff)
    np.add.at(y, (t, t), ytt)
    np.add.at(y, (f, t), yft)
    np.add.at(y, (t, f), ytf)
    ysh = np.array([b.gs + 1j * b.bs for b in case.buses]) / case.base_mva
    y[np.diag_indices(n)] += ysh
    return y


def connection_matrix(case: NetworkCase) -> ConnectionMatrix:
    n = case.n_bus
    c = np.zeros((n, n), dtype=np.int8)
    f, t = case.branch_ends
    on = case.in_service
    c[f[on], t[on]] = 1
    c[t[on], f[on]] = 1
    np.fill_diagonal(c, 0)
    return ConnectionMatrix(n=n, c=c)


def apply_outage(case: NetworkCase, branch_index: int) -> NetworkCase:
    if not 0 <= branch_index < len(case.branches):
        raise IndexError(f"branch index {branch_index} out of range 0..{len(case.branches) - 1}")
    if not case.branches[branch_index].status:
        raise AlreadyOut(f"branch {branch_index} is already out of service")
    return case.with_branch_status(branch_index, False)


def is_connected(case: NetworkCase) -> bool:
    n = case.n_bus
    f, t = case.branch_ends
    on = case.in_service
    adj = csr_matrix((np.ones(on.sum()), (f[on], t[on])), shape=(n, n))
    n_comp, _ = connected_components(adj, directed=False)
    return n_comp == 1
