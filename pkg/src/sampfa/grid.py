"""Grid data model, admittance assembly, graph statistics, and case file I/O."""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np


class GridError(Exception):
    """Invalid grid data or case file."""


class BusKind(Enum):
    PQ = "PQ"
    PV = "PV"
    Slack = "Slack"
    # Virtual buses exist only as padding rows in model inputs; a physical
    # Network never contains them.
    Virtual = "Virtual"


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    p_set: float = 0.0
    q_set: float = 0.0
    v_set: float = 1.0
    q_min: float = -1e9
    q_max: float = 1e9
    g_sh: float = 0.0
    b_sh: float = 0.0

    def __post_init__(self):
        if self.q_min > self.q_max:
            raise GridError(f"bus {self.id}: q_min {self.q_min} > q_max {self.q_max}")
        if self.kind in (BusKind.PV, BusKind.Slack) and self.v_set <= 0:
            raise GridError(f"bus {self.id}: v_set must be > 0 for {self.kind.value}")


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    g_m: float = 0.0   # charging conductance per end
    b_m: float = 0.0   # charging susceptance per end
    tap: float = 1.0   # off-nominal ratio on the from side
    status: bool = True

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise GridError(f"branch {self.from_bus}-{self.to_bus}: self loop")
        if self.r == 0.0 and self.x == 0.0:
            raise GridError(f"branch {self.from_bus}-{self.to_bus}: zero impedance")
        if self.tap <= 0:
            raise GridError(f"branch {self.from_bus}-{self.to_bus}: tap {self.tap} <= 0")

    @property
    def y_series(self) -> complex:
        return 1.0 / complex(self.r, self.x)


@dataclass(frozen=True)
class Network:
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise GridError("duplicate bus ids")
        idset = set(ids)
        for br in self.branches:
            if br.from_bus not in idset or br.to_bus not in idset:
                raise GridError(f"branch {br.from_bus}-{br.to_bus} references unknown bus")
        slacks = [b for b in self.buses if b.kind == BusKind.Slack]
        if len(slacks) != 1:
            raise GridError(f"expected exactly one slack bus, found {len(slacks)}")
        if any(b.kind == BusKind.Virtual for b in self.buses):
            raise GridError("Virtual buses are not allowed in a physical Network")

    @property
    def n(self) -> int:
        return len(self.buses)

    @property
    def slack_index(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.kind == BusKind.Slack)

    def index_of(self, bus_id: int) -> int:
        for i, b in enumerate(self.buses):
            if b.id == bus_id:
                return i
        raise GridError(f"unknown bus id {bus_id}")

    def live_branches(self) -> list[tuple[int, Branch]]:
        """(original index, branch) for in-service branches."""
        return [(k, br) for k, br in enumerate(self.branches) if br.status]

    def adjacency_lists(self) -> dict[int, list[tuple[int, int]]]:
        """bus index -> [(neighbor index, branch index)] over in-service branches."""
        pos = {b.id: i for i, b in enumerate(self.buses)}
        adj: dict[int, list[tuple[int, int]]] = {i: [] for i in range(self.n)}
        for k, br in self.live_branches():
            i, j = pos[br.from_bus], pos[br.to_bus]
            adj[i].append((j, k))
            adj[j].append((i, k))
        return adj

    def is_connected(self) -> bool:
        if self.n == 0:
            return False
        adj = self.adjacency_lists()
        seen = {self.slack_index}
        q = deque(seen)
        while q:
            u = q.popleft()
            for v, _ in adj[u]:
                if v not in seen:
                    seen.add(v)
                    q.append(v)
        return len(seen) == self.n


def build_ybus(net: Network) -> np.ndarray:
    """Nodal admittance matrix; pi-model, tap on the from side."""
    pos = {b.id: i for i, b in enumerate(net.buses)}
    n = net.n
    y = np.zeros((n, n), dtype=complex)
    for _, br in net.live_branches():
        i, j = pos[br.from_bus], pos[br.to_bus]
        ys = br.y_series
        ym = complex(br.g_m, br.b_m)
        t = br.tap
        y[i, i] += (ys + ym) / (t * t)
        y[j, j] += ys + ym
        y[i, j] -= ys / t
        y[j, i] -= ys / t
    for b in net.buses:
        i = pos[b.id]
        y[i, i] += complex(b.g_sh, b.b_sh)
    return y


def weighted_adjacency(net: Network) -> tuple[np.ndarray, list[tuple[int, int, np.ndarray]]]:
    """|y_series| adjacency plus per-branch [g_L, b_L, tap] edge features.

    Edge list entries are (from index, to index, feature) for in-service branches.
    """
    pos = {b.id: i for i, b in enumerate(net.buses)}
    a = np.zeros((net.n, net.n))
    edges = []
    for _, br in net.live_branches():
        i, j = pos[br.from_bus], pos[br.to_bus]
        ys = br.y_series
        a[i, j] += abs(ys)
        a[j, i] += abs(ys)
        edges.append((i, j, np.array([ys.real, ys.imag, br.tap])))
    return a, edges


def jacobi_eigenvalues(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending."""
    a = np.array(a, dtype=float)
    if a.shape[0] != a.shape[1]:
        raise ValueError("matrix must be square")
    if not np.allclose(a, a.T, atol=1e-10):
        raise ValueError("matrix must be symmetric")
    n = a.shape[0]
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                # classic 2x2 rotation annihilating a[p,q]
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) \
                    if theta != 0.0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rows_p, rows_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rows_p - s * rows_q
                a[q, :] = s * rows_p + c * rows_q
                cols_p, cols_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * cols_p - s * cols_q
                a[:, q] = s * cols_p + c * cols_q
    return np.sort(np.diag(a))


def graph_stats(net: Network) -> dict:
    """Average degree and algebraic connectivity of the in-service graph.

    Connectivity is the second-smallest eigenvalue of the symmetric normalized
    Laplacian I - D^-1/2 A D^-1/2 on the 1/x reactance-weighted adjacency.
    """
    pos = {b.id: i for i, b in enumerate(net.buses)}
    n = net.n
    degree = np.zeros(n)
    w = np.zeros((n, n))
    for _, br in net.live_branches():
        i, j = pos[br.from_bus], pos[br.to_bus]
        degree[i] += 1
        degree[j] += 1
        wij = 1.0 / abs(br.x) if br.x != 0.0 else 1.0 / abs(br.r)
        w[i, j] += wij
        w[j, i] += wij
    connected = net.is_connected()
    if not connected:
        return {"avg_degree": float(degree.mean()), "algebraic_connectivity": 0.0,
                "connected": False}
    d = w.sum(axis=1)
    dinv = np.where(d > 0, 1.0 / np.sqrt(np.where(d > 0, d, 1.0)), 0.0)
    lap = np.eye(n) - (dinv[:, None] * w) * dinv[None, :]
    eig = jacobi_eigenvalues(lap)
    lam2 = float(eig[1]) if n > 1 else 0.0
    return {"avg_degree": float(degree.mean()), "algebraic_connectivity": lam2,
            "connected": True}


# --- grid-case JSON I/O ------------------------------------------------------

_BUS_FIELDS = ("id", "kind", "p", "q", "v", "qmin", "qmax", "gsh", "bsh")
_BRANCH_FIELDS = ("from", "to", "r", "x", "gm", "bm", "tap", "status")


def network_to_dict(net: Network) -> dict:
    return {
        "baseMVA": net.base_mva,
        "buses": [
            {"id": b.id, "kind": b.kind.value, "p": b.p_set, "q": b.q_set,
             "v": b.v_set, "qmin": b.q_min, "qmax": b.q_max,
             "gsh": b.g_sh, "bsh": b.b_sh}
            for b in net.buses
        ],
        "branches": [
            {"from": br.from_bus, "to": br.to_bus, "r": br.r, "x": br.x,
             "gm": br.g_m, "bm": br.b_m, "tap": br.tap, "status": br.status}
            for br in net.branches
        ],
    }


def network_from_dict(doc: dict, where: str = "<case>") -> Network:
    for key in ("baseMVA", "buses", "branches"):
        if key not in doc:
            raise GridError(f"{where}: missing required field '{key}'")
    buses = []
    for i, rec in enumerate(doc["buses"]):
        for f in _BUS_FIELDS:
            if f not in rec:
                raise GridError(f"{where}: buses[{i}] missing field '{f}'")
        try:
            kind = BusKind(rec["kind"])
        except ValueError:
            raise GridError(f"{where}: buses[{i}] unknown kind '{rec['kind']}'") from None
        buses.append(Bus(id=int(rec["id"]), kind=kind, p_set=float(rec["p"]),
                         q_set=float(rec["q"]), v_set=float(rec["v"]),
                         q_min=float(rec["qmin"]), q_max=float(rec["qmax"]),
                         g_sh=float(rec["gsh"]), b_sh=float(rec["bsh"])))
    branches = []
    for i, rec in enumerate(doc["branches"]):
        for f in _BRANCH_FIELDS:
            if f not in rec:
                raise GridError(f"{where}: branches[{i}] missing field '{f}'")
        branches.append(Branch(from_bus=int(rec["from"]), to_bus=int(rec["to"]),
                               r=float(rec["r"]), x=float(rec["x"]),
                               g_m=float(rec["gm"]), b_m=float(rec["bm"]),
                               tap=float(rec["tap"]), status=bool(rec["status"])))
    try:
        return Network(base_mva=float(doc["baseMVA"]), buses=tuple(buses),
                       branches=tuple(branches))
    except GridError as exc:
        raise GridError(f"{where}: {exc}") from None


def load_case(path) -> Network:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise GridError(f"{path}: not valid JSON ({exc})") from None
    return network_from_dict(doc, where=str(path))


def save_case(net: Network, path) -> None:
    with open(path, "w") as fh:
        json.dump(network_to_dict(net), fh, indent=1)
        fh.write("\n")
