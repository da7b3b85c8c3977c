"""Local topology slicing: subgraph extraction with exact boundary equivalencing."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .grid import Branch, Bus, BusKind, Network, build_ybus, graph_stats, network_to_dict
from .newton import (PowerFlowSolution, SolverOptions, all_branch_flows,
                     branch_charging, branch_flow, mismatch, solve,
                     NonConvergenceError, SingularJacobianError)


class SliceRejected(Exception):
    """No generator bus reachable within the requested size; retry elsewhere."""


@dataclass
class DatasetSpec:
    sizes: list[int]
    samples_per_size: int
    perturbation: float = 0.20
    max_outages: int = 2
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.perturbation < 1.0):
            raise ValueError("perturbation must be in [0, 1)")
        if any(s < 2 for s in self.sizes):
            raise ValueError("slice sizes must be >= 2")


@dataclass
class SlicedSample:
    sub_network: Network
    solution: PowerFlowSolution
    bus_map: list[int]          # subgraph position -> parent bus index
    provenance: dict


def _full_flow_at(br: Branch, v_s: float, v_r: float, theta_sr: float,
                  at_from_side: bool) -> complex:
    """Total power leaving the sending bus into the branch (series + charging)."""
    return (branch_flow(v_s, v_r, theta_sr, br, at_from_side)
            + branch_charging(v_s, br, at_from_side))


def slice(parent: Network, parent_sol: PowerFlowSolution, start_bus: int,
          target_n: int, rng: np.random.Generator) -> SlicedSample:
    """Grow a connected subgraph from start_bus and equivalence its boundary.

    Frontier expansion picks uniformly among frontier buses. Tie-line flows
    measured at the interior terminal become equivalent loads, which keeps the
    attached parent solution exact on the subgraph.
    """
    n = parent.n
    if not (2 <= target_n <= n):
        raise ValueError(f"target_n {target_n} outside [2, {n}]")
    adj = parent.adjacency_lists()
    chosen = {start_bus}
    frontier = sorted({w for w, _ in adj[start_bus]})
    while len(chosen) < target_n:
        if not frontier:
            break
        pick = frontier[rng.integers(len(frontier))]
        chosen.add(pick)
        frontier = sorted({w for u in chosen for w, _ in adj[u]} - chosen)
    if len(chosen) < target_n:
        raise SliceRejected("parent graph exhausted before reaching target size")

    order = sorted(chosen)
    if not any(parent.buses[i].kind in (BusKind.PV, BusKind.Slack) for i in order):
        raise SliceRejected("no generator bus inside the slice")

    live = parent.live_branches()
    interior_branches: list[int] = []
    tie_load = np.zeros(n, dtype=complex)   # extra load at interior terminals
    for idx, (k, br) in enumerate(live):
        i, j = parent.index_of(br.from_bus), parent.index_of(br.to_bus)
        ins_i, ins_j = i in chosen, j in chosen
        if ins_i and ins_j:
            interior_branches.append(idx)
        elif ins_i:
            tie_load[i] += parent_sol.s_branch[2 * idx] + branch_charging(
                parent_sol.v[i], br, at_from_side=True)
        elif ins_j:
            tie_load[j] += parent_sol.s_branch[2 * idx + 1] + branch_charging(
                parent_sol.v[j], br, at_from_side=False)

    # injections net of tie-line equivalent loads, taken from the solved state
    new_index = {old: new for new, old in enumerate(order)}
    slack_inside = parent.slack_index in chosen
    if slack_inside:
        slack_old = parent.slack_index
    else:
        pv = [i for i in order if parent.buses[i].kind == BusKind.PV]
        if not pv:
            raise SliceRejected("no generator bus to redesignate as slack")
        slack_old = max(pv, key=lambda i: (parent.buses[i].v_set, -i))

    buses = []
    for i in order:
        b = parent.buses[i]
        kind = b.kind
        if i == slack_old:
            kind = BusKind.Slack
        p_net = parent_sol.p[i] - tie_load[i].real
        q_net = parent_sol.q[i] - tie_load[i].imag
        v_set = parent_sol.v[i] if kind in (BusKind.PV, BusKind.Slack) else b.v_set
        buses.append(replace(b, kind=kind, p_set=p_net, q_set=q_net, v_set=v_set))

    branches = tuple(live[idx][1] for idx in interior_branches)
    sub = Network(base_mva=parent.base_mva, buses=tuple(buses), branches=branches)

    v = parent_sol.v[order]
    theta = parent_sol.theta[order]
    flows = np.concatenate([parent_sol.s_branch[2 * idx:2 * idx + 2]
                            for idx in interior_branches]) \
        if interior_branches else np.zeros(0, dtype=complex)
    p = np.array([b.p_set for b in buses])
    q = np.array([b.q_set for b in buses])
    sol = PowerFlowSolution(v=v, theta=theta, p=p, q=q, s_branch=flows)
    prov = {"parent_id": f"n{parent.n}s{parent.buses[parent.slack_index].id}",
            "start_bus": int(start_bus),
            "seed": None, "perturbed": False, "outages": []}
    return SlicedSample(sub_network=sub, solution=sol,
                        bus_map=list(order), provenance=prov)


def _bridges(net: Network) -> set[int]:
    """Branch indices whose removal disconnects the in-service graph."""
    adj = net.adjacency_lists()
    n = net.n
    disc = [-1] * n
    low = [0] * n
    out: set[int] = set()
    timer = [0]

    def dfs(u: int, parent_edge: int):
        disc[u] = low[u] = timer[0]
        timer[0] += 1
        for w, k in adj[u]:
            if k == parent_edge:
                continue
            if disc[w] == -1:
                dfs(w, k)
                low[u] = min(low[u], low[w])
                if low[w] > disc[u]:
                    out.add(k)
            else:
                low[u] = min(low[u], disc[w])

    import sys
    old = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old, 10 * n + 100))
    try:
        for u in range(n):
            if disc[u] == -1:
                dfs(u, -1)
    finally:
        sys.setrecursionlimit(old)
    return out


def perturb_and_resolve(sample: SlicedSample, spec: DatasetSpec,
                        rng: np.random.Generator) -> SlicedSample:
    """Scale loads, rescale PV generation, open non-bridge branches, re-solve."""
    net = sample.sub_network
    m = spec.perturbation
    pq = [i for i, b in enumerate(net.buses) if b.kind == BusKind.PQ]
    factors_p = rng.uniform(1 - m, 1 + m, size=len(pq))
    factors_q = rng.uniform(1 - m, 1 + m, size=len(pq))

    buses = list(net.buses)
    load_old = -sum(net.buses[i].p_set for i in pq)
    for t, i in enumerate(pq):
        b = buses[i]
        buses[i] = replace(b, p_set=b.p_set * factors_p[t], q_set=b.q_set * factors_q[t])
    load_new = -sum(buses[i].p_set for i in pq)
    pv = [i for i, b in enumerate(net.buses) if b.kind == BusKind.PV]
    if load_old > 1e-9 and pv:
        scale = load_new / load_old
        for i in pv:
            buses[i] = replace(buses[i], p_set=buses[i].p_set * scale)

    n_out = int(rng.integers(0, spec.max_outages + 1))
    outages: list[int] = []
    branches = list(net.branches)
    for _ in range(n_out):
        trial = Network(base_mva=net.base_mva, buses=tuple(buses), branches=tuple(branches))
        bridges = _bridges(trial)
        candidates = [k for k, br in enumerate(branches)
                      if br.status and k not in bridges]
        if not candidates:
            break
        k = candidates[rng.integers(len(candidates))]
        branches[k] = replace(branches[k], status=False)
        outages.append(k)

    new_net = Network(base_mva=net.base_mva, buses=tuple(buses), branches=tuple(branches))
    opts = SolverOptions(slack_angle=float(sample.solution.theta[new_net.slack_index]))
    sol, rep = solve(new_net, init=(sample.solution.v.copy(),
                                    sample.solution.theta.copy()), opts=opts)
    if not rep.converged:
        raise NonConvergenceError("perturbed slice did not converge")
    prov = dict(sample.provenance)
    prov.update({"perturbed": True, "outages": outages})
    return SlicedSample(sub_network=new_net, solution=sol,
                        bus_map=sample.bus_map, provenance=prov)


def sample_mismatch(sample: SlicedSample) -> float:
    """Max |dP|,|dQ| of the attached solution over all buses of the slice.

    Evaluated against the solution's own injections, so it measures whether
    (v, theta, p, q) are mutually consistent through the slice admittances.
    """
    sol = sample.solution
    dp, dq = mismatch(sample.sub_network, sol.v, sol.theta, p_set=sol.p, q_set=sol.q)
    return float(max(np.abs(dp).max(), np.abs(dq).max()))


def sample_inputs(net: Network) -> np.ndarray:
    """Per-bus model input features [p, q, v, qmin, qmax, g_self, b_self]."""
    ybus = build_ybus(net)
    rows = []
    for i, b in enumerate(net.buses):
        if b.kind == BusKind.Slack:
            p, q, v = 0.0, 0.0, b.v_set
        elif b.kind == BusKind.PV:
            p, q, v = b.p_set, 0.0, b.v_set
        else:
            p, q, v = b.p_set, b.q_set, 1.0
        rows.append([p, q, v, b.q_min, b.q_max, ybus[i, i].real, ybus[i, i].imag])
    return np.array(rows)


def sample_to_record(sample: SlicedSample, sample_index: int) -> dict:
    net = sample.sub_network
    sol = sample.solution
    prov = dict(sample.provenance)
    prov["parent_id"] = str(prov.get("parent_id", ""))
    prov["sample_index"] = sample_index
    return {
        "provenance": prov,
        "network": network_to_dict(net),
        "inputs": sample_inputs(net).tolist(),
        "bus_targets": [[p, q, v] for p, q, v in zip(sol.p.tolist(), sol.q.tolist(),
                                                     sol.v.tolist())],
        "branch_targets": [[s.real, s.imag] for s in sol.s_branch],
        "theta": sol.theta.tolist(),
        "slack": net.slack_index,
    }


def record_to_sample(rec: dict) -> SlicedSample:
    from .grid import network_from_dict
    net = network_from_dict(rec["network"])
    bt = np.array(rec["bus_targets"])
    sb = np.array([complex(a, b) for a, b in rec["branch_targets"]], dtype=complex)
    sol = PowerFlowSolution(v=bt[:, 2], theta=np.asarray(rec["theta"], float),
                            p=bt[:, 0], q=bt[:, 1], s_branch=sb)
    return SlicedSample(sub_network=net, solution=sol,
                        bus_map=list(range(net.n)), provenance=rec["provenance"])


def _make_one(parent: Network, parent_sol: PowerFlowSolution, spec: DatasetSpec,
              size: int, sample_index: int) -> tuple[dict | None, int]:
    """One dataset record; returns (record or None, discard count)."""
    rng = np.random.default_rng([spec.seed, sample_index])
    discards = 0
    for _ in range(50):
        start = int(rng.integers(parent.n))
        try:
            base = slice(parent, parent_sol, start, size, rng)
            base.provenance["seed"] = spec.seed
            sample = perturb_and_resolve(base, spec, rng)
        except (SliceRejected, NonConvergenceError, SingularJacobianError):
            discards += 1
            continue
        return sample_to_record(sample, sample_index), discards
    return None, discards


def generate_dataset(parents: list[tuple[Network, PowerFlowSolution]],
                     spec: DatasetSpec, path, workers: int = 1) -> dict:
    """Write a JSON-Lines dataset; deterministic given (parents, spec, seed)."""
    if not spec.sizes or spec.samples_per_size <= 0:
        raise ValueError("empty dataset spec")
    tasks = []
    idx = 0
    for size in spec.sizes:
        for _ in range(spec.samples_per_size):
            parent, psol = parents[idx % len(parents)]
            tasks.append((parent, psol, size, idx))
            idx += 1

    results: list[tuple[int, dict | None, int]] = []
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(_make_one, p, s, spec, size, i)
                    for p, s, size, i in tasks]
            for (_, _, _, i), fut in zip(tasks, futs):
                rec, disc = fut.result()
                results.append((i, rec, disc))
    else:
        for p, s, size, i in tasks:
            rec, disc = _make_one(p, s, spec, size, i)
            results.append((i, rec, disc))
    results.sort(key=lambda t: t[0])

    per_size: dict[int, int] = {}
    stats_per_size: dict[int, list] = {}
    discards = 0
    with open(path, "w") as fh:
        for _, rec, disc in results:
            discards += disc
            if rec is None:
                continue
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            n = len(rec["network"]["buses"])
            per_size[n] = per_size.get(n, 0) + 1
            from .grid import network_from_dict
            st = graph_stats(network_from_dict(rec["network"]))
            stats_per_size.setdefault(n, []).append(
                (st["avg_degree"], st["algebraic_connectivity"]))
    report = {
        "samples": sum(per_size.values()),
        "discards": discards,
        "per_size": {str(k): v for k, v in sorted(per_size.items())},
        "graph_stats": {
            str(k): {"avg_degree_mean": float(np.mean([a for a, _ in v])),
                     "algebraic_connectivity_mean": float(np.mean([c for _, c in v]))}
            for k, v in sorted(stats_per_size.items())},
    }
    return report


def load_dataset(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
