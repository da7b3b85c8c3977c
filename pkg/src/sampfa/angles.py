"""Phase-angle reconstruction from voltages and branch flows."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .grid import Branch, Network


class SingularBranchError(Exception):
    """The angle-difference denominator is numerically zero for a branch."""


@dataclass
class AngleAssignment:
    theta: np.ndarray
    visited_order: list[int]
    slack: int
    slack_angle: float
    unassigned: list[int] = field(default_factory=list)
    cycle_residual: float = 0.0   # max closure error over non-tree edges, radians


def branch_angle_diff(p_l: float, q_l: float, v_i: float, branch: Branch,
                      at_from_side: bool = True) -> float:
    """theta_sending - theta_receiving from the sending-end series flow.

    Single-argument arctangent, valid for |angle difference| < pi/2. The tap
    rescales the sending voltage when measuring at the from side.
    """
    ys = branch.y_series
    g, b = ys.real, ys.imag
    v_eff = v_i / branch.tap if at_from_side else v_i
    num = b * p_l + g * q_l
    den = g * p_l - b * q_l - v_eff * v_eff * (g * g + b * b)
    if abs(den) <= 1e-12:
        raise SingularBranchError(
            f"branch {branch.from_bus}-{branch.to_bus}: angle denominator ~ 0")
    return math.atan(num / den)


def bfs_par(net: Network, v: np.ndarray, branch_flows: np.ndarray,
            slack: int, slack_angle: float = 0.0,
            queue_order=None) -> AngleAssignment:
    """Breadth-first angle recovery from the slack reference.

    `branch_flows` holds both directions per in-service branch in network
    order ([2k] from->to, [2k+1] to->from). Each bus is settled once via the
    first tree edge that reaches it; the angle difference is always evaluated
    in the direction measured at the already-settled bus, whose voltage is
    known. Non-tree edges contribute only to the cycle-consistency residual.
    """
    n = net.n
    theta = np.full(n, np.nan)
    theta[slack] = slack_angle
    adj = net.adjacency_lists()
    live = net.live_branches()
    live_pos = {k: idx for idx, (k, _) in enumerate(live)}
    pos = {b.id: i for i, b in enumerate(net.buses)}

    def diff_at(settled: int, other: int, k: int) -> float:
        """theta[settled] - theta[other] via branch k, measured at `settled`."""
        br = net.branches[k]
        idx = live_pos[k]
        if pos[br.from_bus] == settled:
            s = branch_flows[2 * idx]
            return branch_angle_diff(s.real, s.imag, v[settled], br, at_from_side=True)
        s = branch_flows[2 * idx + 1]
        return branch_angle_diff(s.real, s.imag, v[settled], br, at_from_side=False)

    visited = [slack]
    q = deque([slack])
    failures: list[int] = []
    while q:
        u = q.popleft()
        neigh = adj[u]
        if queue_order is not None:
            neigh = queue_order(u, list(neigh))
        for w, k in neigh:
            if not np.isnan(theta[w]):
                continue
            try:
                theta[w] = theta[u] - diff_at(u, w, k)
            except SingularBranchError:
                failures.append(w)
                continue
            visited.append(w)
            q.append(w)

    unassigned = [i for i in range(n) if np.isnan(theta[i])]
    residual = 0.0
    for idx, (k, br) in enumerate(live):
        i, j = pos[br.from_bus], pos[br.to_bus]
        if np.isnan(theta[i]) or np.isnan(theta[j]):
            continue
        try:
            s = branch_flows[2 * idx]
            d = branch_angle_diff(s.real, s.imag, v[i], br, at_from_side=True)
        except SingularBranchError:
            continue
        residual = max(residual, abs((theta[i] - theta[j]) - d))
    return AngleAssignment(theta=theta, visited_order=visited, slack=slack,
                           slack_angle=slack_angle, unassigned=unassigned,
                           cycle_residual=residual)
