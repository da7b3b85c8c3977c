import numpy as np
import pytest

from helpers import make_random_net, two_bus_line
from sampfa.grid import Branch, Bus, BusKind, Network, build_ybus
from sampfa.newton import (NonConvergenceError, PowerFlowSolution,
                           SolverOptions, all_branch_flows, branch_charging,
                           branch_flow, flat_start, mismatch, solve)


def test_branch_flow_lossless():
    br = Branch(1, 2, 0.0, 0.1)
    s = branch_flow(1.0, 1.0, 0.1, br)
    assert np.isclose(s.real, 0.9983341664682815, atol=1e-12)
    assert np.isclose(s.imag, 0.049958347219741794, atol=1e-12)


def test_branch_flow_tap_and_resistance():
    br = Branch(1, 2, 0.01, 0.1, tap=1.02)
    s = branch_flow(1.05, 0.98, 0.07, br)
    assert np.isclose(s, 0.75142134807199 + 0.4582144699040935j, atol=1e-12)
    # to side sees the raw voltage; the tap applies to the other end
    s_rev = branch_flow(0.98, 1.05, -0.07, br, at_from_side=False)
    assert s_rev != s


def test_branch_charging_sign():
    br = Branch(1, 2, 0.0, 0.1, b_m=0.05)
    s = branch_charging(1.02, br)
    assert np.isclose(s, -1j * 0.05 * 1.02 ** 2)


def test_flat_solve_ieee39(net39):
    sol, rep = solve(net39)
    assert rep.converged
    assert rep.iterations == 5
    assert rep.max_mismatch < 1e-8
    assert rep.pv_to_pq_switches == 3
    # voltages stay within a sane band at the solution
    assert np.all(sol.v > 0.9) and np.all(sol.v < 1.15)


def test_mismatch_zero_at_solution(net39, sol39):
    dp, dq = mismatch(net39, sol39.v, sol39.theta,
                      p_set=sol39.p, q_set=sol39.q)
    assert np.max(np.abs(dp)) < 1e-10
    assert np.max(np.abs(dq)) < 1e-10


def test_power_balance(net39, sol39):
    # injections sum to total network loss
    ybus = build_ybus(net39)
    vc = sol39.v * np.exp(1j * sol39.theta)
    s = vc * np.conj(ybus @ vc)
    assert np.isclose(sum(sol39.p), s.real.sum(), atol=1e-9)


def test_exact_init_takes_zero_iterations(net39, sol39):
    sol, rep = solve(net39, init=(sol39.v.copy(), sol39.theta.copy()))
    assert rep.converged
    assert rep.iterations == 0


def test_jacobian_matches_finite_differences():
    # compare one NR step direction against numeric differentiation of the
    # mismatch; random small cases
    from sampfa.newton import _jacobian

    rng = np.random.default_rng(3)
    for _ in range(5):
        net = make_random_net(rng, int(rng.integers(4, 12)))
        ybus = build_ybus(net)
        n = net.n
        v = 1.0 + 0.05 * rng.normal(size=n)
        theta = 0.05 * rng.normal(size=n)
        pq = np.array([i for i, b in enumerate(net.buses)
                       if b.kind == BusKind.PQ], dtype=int)
        ang_idx = np.array([i for i in range(n) if i != net.slack_index])
        jac = _jacobian(ybus, v, theta, ang_idx, pq)

        def f(x):
            th = theta.copy()
            vm = v.copy()
            th[ang_idx] = x[: ang_idx.size]
            vm[pq] = x[ang_idx.size:]
            dp, dq = mismatch(net, vm, th, ybus=ybus)
            return np.concatenate([dp[ang_idx], dq[pq]])

        x0 = np.concatenate([theta[ang_idx], v[pq]])
        eps = 1e-7
        num = np.zeros((ang_idx.size + pq.size, x0.size))
        for k in range(x0.size):
            xp = x0.copy(); xp[k] += eps
            xm = x0.copy(); xm[k] -= eps
            num[:, k] = (f(xp) - f(xm)) / (2 * eps)
        # the analytic matrix is d(-mismatch)/dx
        denom = max(1.0, np.max(np.abs(jac)))
        assert np.max(np.abs(jac + num)) / denom < 1e-6


def test_q_limit_switching():
    # tiny q_max forces the generator off its setpoint
    net = Network(100.0,
                  (Bus(1, BusKind.Slack, v_set=1.0),
                   Bus(2, BusKind.PV, p_set=0.1, v_set=1.08,
                       q_min=-0.02, q_max=0.02),
                   Bus(3, BusKind.PQ, p_set=-0.6, q_set=-0.3)),
                  (Branch(1, 2, 0.01, 0.1), Branch(2, 3, 0.01, 0.1),
                   Branch(1, 3, 0.01, 0.08)))
    sol, rep = solve(net)
    assert rep.converged
    assert rep.pv_to_pq_switches >= 1
    i = net.index_of(2)
    assert np.isclose(sol.q[i], 0.02, atol=1e-9)
    assert sol.v[i] < 1.08


def test_q_limits_can_be_disabled():
    net = Network(100.0,
                  (Bus(1, BusKind.Slack, v_set=1.0),
                   Bus(2, BusKind.PV, p_set=0.1, v_set=1.08,
                       q_min=-0.02, q_max=0.02),
                   Bus(3, BusKind.PQ, p_set=-0.6, q_set=-0.3)),
                  (Branch(1, 2, 0.01, 0.1), Branch(2, 3, 0.01, 0.1),
                   Branch(1, 3, 0.01, 0.08)))
    sol, rep = solve(net, opts=SolverOptions(enforce_q_limits=False))
    i = net.index_of(2)
    assert np.isclose(sol.v[i], 1.08, atol=1e-9)
    assert sol.q[i] > 0.02


def test_random_cases_converge():
    rng = np.random.default_rng(11)
    for _ in range(20):
        net = make_random_net(rng, int(rng.integers(5, 25)))
        sol, rep = solve(net)
        assert rep.converged
        dp, dq = mismatch(net, sol.v, sol.theta, p_set=sol.p, q_set=sol.q)
        assert max(np.max(np.abs(dp)), np.max(np.abs(dq))) < 1e-8


def test_branch_flow_ordering(net39, sol39):
    flows = all_branch_flows(net39, sol39.v, sol39.theta)
    live = net39.live_branches()
    assert flows.shape == (2 * len(live),)
    pos = {b.id: i for i, b in enumerate(net39.buses)}
    k, br = live[0]
    i, j = pos[br.from_bus], pos[br.to_bus]
    fwd = branch_flow(sol39.v[i], sol39.v[j], sol39.theta[i] - sol39.theta[j], br)
    rev = branch_flow(sol39.v[j], sol39.v[i], sol39.theta[j] - sol39.theta[i],
                      br, at_from_side=False)
    assert np.isclose(flows[0], fwd)
    assert np.isclose(flows[1], rev)


def test_solution_dict_roundtrip(sol39):
    back = PowerFlowSolution.from_dict(sol39.to_dict())
    assert np.array_equal(back.v, sol39.v)
    assert np.array_equal(back.theta, sol39.theta)
    assert np.array_equal(back.s_branch, sol39.s_branch)


def test_nonconvergence_reported():
    # loading beyond the line transfer limit cannot be solved
    net = Network(100.0,
                  (Bus(1, BusKind.Slack), Bus(2, BusKind.PQ, p_set=-80.0)),
                  (Branch(1, 2, 0.0, 0.1),))
    try:
        _, rep = solve(net, opts=SolverOptions(max_iterations=30))
        assert not rep.converged
    except Exception:
        pass   # a singular Jacobian on the way down is also acceptable


def test_disconnected_network_raises():
    net = Network(100.0,
                  (Bus(1, BusKind.Slack), Bus(2, BusKind.PQ),
                   Bus(3, BusKind.PQ, p_set=-0.1)),
                  (Branch(1, 2, 0.0, 0.1), Branch(2, 3, 0.0, 0.1, status=False)))
    with pytest.raises(NonConvergenceError):
        solve(net)


def test_flat_start_values(net39):
    v, theta = flat_start(net39)
    assert np.all(theta == 0.0)
    for i, b in enumerate(net39.buses):
        if b.kind in (BusKind.PV, BusKind.Slack):
            assert v[i] == b.v_set
        else:
            assert v[i] == 1.0
