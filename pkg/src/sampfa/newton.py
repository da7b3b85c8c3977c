"""Newton-Raphson AC power flow in polar coordinates with analytic Jacobian."""
from __future__ import annotations

import cmath
import time
from dataclasses import dataclass, field

import numpy as np

from .grid import Branch, BusKind, Network, build_ybus


class SingularJacobianError(Exception):
    """The Newton step matrix is singular (distinct from plain non-convergence)."""


class NonConvergenceError(Exception):
    pass


@dataclass
class SolverOptions:
    tol: float = 1e-8            # max |mismatch| in p.u.
    max_iterations: int = 200
    slack_angle: float = 0.0
    enforce_q_limits: bool = True


@dataclass
class PowerFlowSolution:
    v: np.ndarray               # p.u. magnitude per bus
    theta: np.ndarray           # radians per bus
    p: np.ndarray               # net active injection, p.u.
    q: np.ndarray               # net reactive injection, p.u.
    s_branch: np.ndarray        # (2E,) complex series flows; [2k]=from->to, [2k+1]=to->from

    def to_dict(self) -> dict:
        return {"v": self.v.tolist(), "theta": self.theta.tolist(),
                "p": self.p.tolist(), "q": self.q.tolist(),
                "s_branch": [[s.real, s.imag] for s in self.s_branch]}

    @classmethod
    def from_dict(cls, doc: dict) -> "PowerFlowSolution":
        sb = np.array([complex(a, b) for a, b in doc["s_branch"]], dtype=complex)
        return cls(v=np.asarray(doc["v"], float), theta=np.asarray(doc["theta"], float),
                   p=np.asarray(doc["p"], float), q=np.asarray(doc["q"], float),
                   s_branch=sb)


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    max_mismatch: float
    pv_to_pq_switches: int
    wall_time: float

    def to_dict(self) -> dict:
        return {"converged": self.converged, "iterations": self.iterations,
                "max_mismatch": self.max_mismatch,
                "pv_to_pq_switches": self.pv_to_pq_switches,
                "wall_time": self.wall_time}


def branch_flow(v_i: float, v_j: float, theta_ij: float, branch: Branch,
                at_from_side: bool = True) -> complex:
    """Complex power entering the series element, measured at the sending end.

    With tap t on the from side, the from-side sending voltage is v_i / t.
    Charging is not included; it enters the bus balance separately.
    """
    ys = branch.y_series
    if at_from_side:
        a = v_i / branch.tap
        b = v_j
    else:
        a = v_i
        b = v_j / branch.tap
    return ys.conjugate() * (a * a - a * b * cmath.exp(1j * theta_ij))


def branch_charging(v_sending: float, branch: Branch, at_from_side: bool = True) -> complex:
    """Complex power drawn by the sending-end charging shunt."""
    v_eff = v_sending / branch.tap if at_from_side else v_sending
    return v_eff * v_eff * complex(branch.g_m, -branch.b_m)


def injections(ybus: np.ndarray, v: np.ndarray, theta: np.ndarray) -> np.ndarray:
    vc = v * np.exp(1j * theta)
    return vc * np.conj(ybus @ vc)


def mismatch(net: Network, v: np.ndarray, theta: np.ndarray,
             ybus: np.ndarray | None = None,
             p_set: np.ndarray | None = None,
             q_set: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Diagnostic per-bus (dP, dQ) = setpoint minus computed injection, all buses."""
    if ybus is None:
        ybus = build_ybus(net)
    if p_set is None:
        p_set = np.array([b.p_set for b in net.buses])
    if q_set is None:
        q_set = np.array([b.q_set for b in net.buses])
    s = injections(ybus, v, theta)
    return p_set - s.real, q_set - s.imag


def _jacobian(ybus: np.ndarray, v: np.ndarray, theta: np.ndarray,
              ang_idx: np.ndarray, mag_idx: np.ndarray) -> np.ndarray:
    """d(-mismatch)/d(theta, v) restricted to the unknown coordinates."""
    vc = v * np.exp(1j * theta)
    ibus = ybus @ vc
    diag_v = np.diag(vc)
    diag_i = np.diag(ibus)
    diag_vnorm = np.diag(np.exp(1j * theta))
    ds_dva = 1j * diag_v @ np.conj(diag_i - ybus @ diag_v)
    ds_dvm = diag_v @ np.conj(ybus @ diag_vnorm) + np.conj(diag_i) @ diag_vnorm
    j11 = ds_dva[np.ix_(ang_idx, ang_idx)].real
    j12 = ds_dvm[np.ix_(ang_idx, mag_idx)].real
    j21 = ds_dva[np.ix_(mag_idx, ang_idx)].imag
    j22 = ds_dvm[np.ix_(mag_idx, mag_idx)].imag
    return np.block([[j11, j12], [j21, j22]])


def all_branch_flows(net: Network, v: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Series flows for in-service branches, both directions, in branch order."""
    pos = {b.id: i for i, b in enumerate(net.buses)}
    flows = []
    for _, br in net.live_branches():
        i, j = pos[br.from_bus], pos[br.to_bus]
        tij = theta[i] - theta[j]
        flows.append(branch_flow(v[i], v[j], tij, br, at_from_side=True))
        flows.append(branch_flow(v[j], v[i], -tij, br, at_from_side=False))
    return np.array(flows, dtype=complex)


def flat_start(net: Network) -> tuple[np.ndarray, np.ndarray]:
    v = np.array([b.v_set if b.kind in (BusKind.PV, BusKind.Slack) else 1.0
                  for b in net.buses])
    theta = np.zeros(net.n)
    return v, theta


def solve(net: Network, init: tuple[np.ndarray, np.ndarray] | None = None,
          opts: SolverOptions | None = None) -> tuple[PowerFlowSolution, SolveReport]:
    """Full Newton iteration with PV->PQ reactive-limit switching.

    `init` is an optional warm start (v, theta); otherwise a flat start is used.
    """
    opts = opts or SolverOptions()
    if not net.is_connected():
        raise NonConvergenceError("in-service network is not connected to the slack")
    t0 = time.perf_counter()
    ybus = build_ybus(net)
    n = net.n
    slack = net.slack_index
    kinds = [b.kind for b in net.buses]
    p_set = np.array([b.p_set for b in net.buses])
    q_set = np.array([b.q_set for b in net.buses])
    q_min = np.array([b.q_min for b in net.buses])
    q_max = np.array([b.q_max for b in net.buses])
    v_set = np.array([b.v_set for b in net.buses])

    # is_pq reflects the current (possibly switched) role of each bus
    is_pq = np.array([k == BusKind.PQ for k in kinds])
    switched_at = {}  # bus index -> "max" | "min" while a PV is held at a limit
    q_eff = q_set.copy()
    switch_count = 0

    if init is None:
        v, theta = flat_start(net)
    else:
        v = np.array(init[0], dtype=float)
        theta = np.array(init[1], dtype=float)
        theta = theta - theta[slack] + opts.slack_angle
        if opts.enforce_q_limits:
            # A warm start may already encode PV buses held at a reactive
            # limit (voltage off-setpoint, q pinned at the bound). Seed the
            # switched state so such starts are accepted as-is instead of
            # having their voltage snapped back to the setpoint.
            s0 = injections(ybus, v, theta)
            for i, k in enumerate(kinds):
                if k != BusKind.PV:
                    continue
                qi = s0[i].imag
                if v[i] > v_set[i] + 1e-9 and qi < q_min[i] + 1e-6:
                    switched_at[i] = "min"
                    q_eff[i] = q_min[i]
                    is_pq[i] = True
                elif v[i] < v_set[i] - 1e-9 and qi > q_max[i] - 1e-6:
                    switched_at[i] = "max"
                    q_eff[i] = q_max[i]
                    is_pq[i] = True
    theta[slack] = opts.slack_angle
    v[slack] = v_set[slack]
    for i, k in enumerate(kinds):
        if k == BusKind.PV and i not in switched_at:
            v[i] = v_set[i]

    def active_mismatch():
        dp, dq = mismatch(net, v, theta, ybus, p_set, q_eff)
        ang_idx = np.array([i for i in range(n) if i != slack], dtype=int)
        mag_idx = np.array([i for i in range(n) if is_pq[i]], dtype=int)
        f = np.concatenate([dp[ang_idx], dq[mag_idx]])
        return f, ang_idx, mag_idx

    iterations = 0
    converged = False
    for _ in range(opts.max_iterations + 1):
        f, ang_idx, mag_idx = active_mismatch()
        max_mis = float(np.max(np.abs(f))) if f.size else 0.0
        if max_mis < opts.tol:
            converged = True
            if not opts.enforce_q_limits or not _apply_q_switching(
                    net, ybus, v, theta, kinds, is_pq, switched_at, q_eff,
                    q_min, q_max, v_set):
                break
            switch_count += 1
            converged = False
            continue
        if iterations >= opts.max_iterations:
            break
        jac = _jacobian(ybus, v, theta, ang_idx, mag_idx)
        try:
            dx = np.linalg.solve(jac, f)
        except np.linalg.LinAlgError:
            raise SingularJacobianError(
                f"singular Jacobian at iteration {iterations}") from None
        na = len(ang_idx)
        theta[ang_idx] += dx[:na]
        v[mag_idx] += dx[na:]
        iterations += 1
        if opts.enforce_q_limits and _apply_q_switching(
                net, ybus, v, theta, kinds, is_pq, switched_at, q_eff,
                q_min, q_max, v_set):
            switch_count += 1

    s = injections(ybus, v, theta)
    dp, dq = mismatch(net, v, theta, ybus, p_set, q_eff)
    mag_idx = [i for i in range(n) if is_pq[i]]
    resid = [abs(dp[i]) for i in range(n) if i != slack] + [abs(dq[i]) for i in mag_idx]
    max_mis = max(resid) if resid else 0.0
    sol = PowerFlowSolution(v=v, theta=theta, p=s.real, q=s.imag,
                            s_branch=all_branch_flows(net, v, theta))
    report = SolveReport(converged=converged, iterations=iterations,
                         max_mismatch=float(max_mis),
                         pv_to_pq_switches=switch_count,
                         wall_time=time.perf_counter() - t0)
    return sol, report


def _apply_q_switching(net, ybus, v, theta, kinds, is_pq, switched_at, q_eff,
                       q_min, q_max, v_set) -> bool:
    """Evaluate PV reactive limits once; returns True if any bus changed role."""
    s = injections(ybus, v, theta)
    changed = False
    for i, k in enumerate(kinds):
        if k != BusKind.PV:
            continue
        if i not in switched_at:
            qi = s[i].imag
            if qi > q_max[i] + 1e-12:
                switched_at[i] = "max"
                q_eff[i] = q_max[i]
                is_pq[i] = True
                changed = True
            elif qi < q_min[i] - 1e-12:
                switched_at[i] = "min"
                q_eff[i] = q_min[i]
                is_pq[i] = True
                changed = True
        else:
            # held at a limit; release when the voltage signals q re-entry
            side = switched_at[i]
            if (side == "max" and v[i] > v_set[i]) or (side == "min" and v[i] < v_set[i]):
                del switched_at[i]
                q_eff[i] = net.buses[i].q_set
                is_pq[i] = False
                v[i] = v_set[i]
                changed = True
    return changed
