import numpy as np
import pytest

from helpers import make_random_net
import sampfa.autodiff as ad
from sampfa.losses import (BranchArrays, LossWeights, StageSchedule,
                           angle_diffs_from_predictions, angle_loss,
                           branch_loss_constraint, data_loss, hybrid_loss,
                           hybrid_loss_batch, kcl_loss, kcl_residuals)
from sampfa.newton import all_branch_flows, solve


def _truth(net, sol):
    bus = np.column_stack([sol.p, sol.q, sol.v])
    flows = all_branch_flows(net, sol.v, sol.theta)
    branch = np.column_stack([flows.real, flows.imag])
    return bus, branch


def test_weights_validation_and_stages():
    with pytest.raises(ValueError, match="eps_kcl"):
        LossWeights(eps_kcl=-1.0)
    w1 = LossWeights.stage1()
    assert w1.eps_loss == 0.0 and w1.eps_angle == 0.0
    w2 = LossWeights.stage2()
    assert w2.eps_loss == 0.1 and w2.eps_angle == 3.0
    assert w2.eps_e == 5.0 and w2.eps_kcl == 0.5


def test_schedule_epoch_mapping():
    sched = StageSchedule(stage1_epochs=3, stage2_epochs=2)
    assert sched.weights_for_epoch(0) == (1, sched.stage1)
    assert sched.weights_for_epoch(2) == (1, sched.stage1)
    assert sched.weights_for_epoch(3) == (2, sched.stage2)
    assert sched.weights_for_epoch(4) == (2, sched.stage2)


def test_branch_arrays_layout(net39):
    arr = BranchArrays(net39)
    live = net39.live_branches()
    assert arr.e2 == 2 * len(live)
    pos = {b.id: i for i, b in enumerate(net39.buses)}
    k, br = live[3]
    assert arr.send[2 * k] == pos[br.from_bus]
    assert arr.recv[2 * k] == pos[br.to_bus]
    assert arr.send[2 * k + 1] == pos[br.to_bus]
    assert arr.tap_send[2 * k] == br.tap
    assert arr.tap_send[2 * k + 1] == 1.0
    assert np.array_equal(arr.reverse, np.arange(arr.e2) ^ 1)
    assert np.array_equal(arr.send[arr.reverse], arr.recv)


def test_physics_terms_vanish_at_solution(net39, sol39):
    bus, branch = _truth(net39, sol39)
    arr = BranchArrays(net39)
    dp, dq = kcl_residuals(bus, branch, arr)
    assert float(np.max(dp.data)) < 1e-6
    assert float(np.max(dq.data)) < 1e-6
    assert float(kcl_loss(bus, branch, arr).data) < 1e-6
    assert float(branch_loss_constraint(bus, branch, arr).data) < 1e-6
    assert float(angle_loss(bus, branch, arr, sol39.theta).data) < 1e-6


def test_physics_terms_vanish_on_random_networks():
    rng = np.random.default_rng(0)
    for _ in range(10):
        net = make_random_net(rng, int(rng.integers(5, 20)))
        sol, rep = solve(net)
        assert rep.converged
        bus, branch = _truth(net, sol)
        arr = BranchArrays(net)
        assert float(kcl_loss(bus, branch, arr).data) < 1e-6
        assert float(branch_loss_constraint(bus, branch, arr).data) < 1e-6
        assert float(angle_loss(bus, branch, arr, sol.theta).data) < 1e-6


def test_angle_diffs_match_solution(net39, sol39):
    bus, branch = _truth(net39, sol39)
    arr = BranchArrays(net39)
    pred, valid = angle_diffs_from_predictions(bus, branch, arr)
    want = sol39.theta[arr.send] - sol39.theta[arr.recv]
    assert np.max(np.abs(pred.data[valid, 0] - want[valid])) < 1e-9
    assert valid.mean() > 0.9


def test_data_loss_oracle():
    tb = np.array([[1.0, 0.0, 1.0]])
    th = np.array([[0.5, 0.2], [0.1, 0.0]])
    pb = tb + 0.1
    ph = th + 0.2
    w = LossWeights(eps_n=1.0, eps_e=5.0)
    got = float(data_loss(pb, ph, tb, th, w).data)
    assert np.isclose(got, 0.1 ** 2 + 5.0 * 0.2 ** 2)


def test_hybrid_loss_total_composition(net39, sol39):
    bus, branch = _truth(net39, sol39)
    # perturb predictions so every term is active
    rng = np.random.default_rng(1)
    pb = bus + 0.01 * rng.normal(size=bus.shape)
    ph = branch + 0.01 * rng.normal(size=branch.shape)
    w = LossWeights.stage2()
    total, terms = hybrid_loss(pb, ph, bus, branch, sol39.theta, net39, w)
    want = (w.eps_data * terms["data"]
            + w.eps_phy * w.eps_kcl * terms["kcl"]
            + w.eps_phy * w.eps_loss * terms["loss_term"]
            + w.eps_phy * w.eps_angle * terms["angle_term"])
    assert np.isclose(float(total.data), want, rtol=1e-12)
    assert terms["total"] == float(total.data)
    # stage 1 skips the stage-2 terms
    _, t1 = hybrid_loss(pb, ph, bus, branch, sol39.theta, net39,
                        LossWeights.stage1())
    assert t1["loss_term"] == 0.0 and t1["angle_term"] == 0.0


def test_hybrid_loss_batch_is_mean(net39, sol39):
    bus, branch = _truth(net39, sol39)
    arr = BranchArrays(net39)
    rng = np.random.default_rng(2)
    w = LossWeights.stage2()
    items = []
    singles = []
    for _ in range(3):
        pb = bus + 0.02 * rng.normal(size=bus.shape)
        ph = branch + 0.02 * rng.normal(size=branch.shape)
        items.append((pb, ph, bus, branch, sol39.theta, arr))
        total, _ = hybrid_loss(pb, ph, bus, branch, sol39.theta, arr, w)
        singles.append(float(total.data))
    batch_total, breakdown = hybrid_loss_batch(items, w)
    assert np.isclose(float(batch_total.data), np.mean(singles), rtol=1e-12)
    assert np.isclose(breakdown["total"], np.mean(singles), rtol=1e-12)


def test_hybrid_loss_gradients_flow(net39, sol39):
    bus, branch = _truth(net39, sol39)
    pb = ad.parameter(bus + 0.01)
    ph = ad.parameter(branch + 0.01)
    total, _ = hybrid_loss(pb, ph, bus, branch, sol39.theta, net39,
                           LossWeights.stage2())
    ad.backward(total)
    assert pb.grad is not None and np.all(np.isfinite(pb.grad))
    assert ph.grad is not None and np.all(np.isfinite(ph.grad))
    assert np.any(pb.grad != 0.0) and np.any(ph.grad != 0.0)
