"""Data-physics hybrid training loss and the two-stage weight schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .grid import BusKind, Network


@dataclass
class LossWeights:
    eps_data: float = 1.0
    eps_phy: float = 0.3
    eps_n: float = 1.0
    eps_e: float = 5.0
    eps_kcl: float = 0.5
    eps_loss: float = 0.0
    eps_angle: float = 0.0

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def stage1(cls) -> "LossWeights":
        return cls()

    @classmethod
    def stage2(cls) -> "LossWeights":
        return cls(eps_loss=0.1, eps_angle=3.0)


@dataclass
class StageSchedule:
    stage1_epochs: int
    stage2_epochs: int
    stage1: LossWeights = field(default_factory=LossWeights.stage1)
    stage2: LossWeights = field(default_factory=LossWeights.stage2)

    def weights_for_epoch(self, epoch: int) -> tuple[int, LossWeights]:
        """(stage number, weights) for a 0-based epoch index."""
        if epoch < self.stage1_epochs:
            return 1, self.stage1
        return 2, self.stage2


class BranchArrays:
    """Constant per-directed-branch arrays of a network, for loss evaluation.

    Directed order matches the flow convention: [2k] from->to, [2k+1] to->from.
    """

    def __init__(self, net: Network):
        live = [br for _, br in net.live_branches()]
        pos = {b.id: i for i, b in enumerate(net.buses)}
        e = len(live)
        self.n = net.n
        self.e2 = 2 * e
        self.send = np.empty(self.e2, dtype=np.intp)
        self.recv = np.empty(self.e2, dtype=np.intp)
        self.tap_send = np.ones(self.e2)      # tap dividing the sending voltage
        self.g = np.empty(self.e2)
        self.b = np.empty(self.e2)
        self.r = np.empty(self.e2)
        self.x = np.empty(self.e2)
        self.g_m = np.empty(self.e2)
        self.b_m = np.empty(self.e2)
        for k, br in enumerate(live):
            i, j = pos[br.from_bus], pos[br.to_bus]
            ys = br.y_series
            for d, (s, t) in enumerate(((i, j), (j, i))):
                idx = 2 * k + d
                self.send[idx] = s
                self.recv[idx] = t
                self.tap_send[idx] = br.tap if d == 0 else 1.0
                self.g[idx], self.b[idx] = ys.real, ys.imag
                self.r[idx], self.x[idx] = br.r, br.x
                self.g_m[idx], self.b_m[idx] = br.g_m, br.b_m
        self.reverse = np.arange(self.e2) ^ 1   # index of the opposite direction
        self.g_sh = np.array([bb.g_sh for bb in net.buses])
        self.b_sh = np.array([bb.b_sh for bb in net.buses])


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else ad.Tensor(x)


def data_loss(pred_bus, pred_branch, target_bus: np.ndarray,
              target_branch: np.ndarray, weights: LossWeights,
              bus_scale: np.ndarray | None = None,
              branch_scale: np.ndarray | None = None) -> Tensor:
    """Weighted MSE over bus and branch outputs for one sample.

    Optional per-column scales divide the residuals, so the error is measured
    in standardized units; otherwise small-magnitude columns (voltage) would
    be drowned out by the injection columns.
    """
    bus_res = _t(pred_bus) - ad.Tensor(target_bus)
    if bus_scale is not None:
        bus_res = bus_res / ad.Tensor(bus_scale)
    out = ad.tmean(ad.square(bus_res)) * ad.Tensor(weights.eps_n)
    if target_branch.size:
        br_res = _t(pred_branch) - ad.Tensor(target_branch)
        if branch_scale is not None:
            br_res = br_res / ad.Tensor(branch_scale)
        out = out + ad.tmean(ad.square(br_res)) * ad.Tensor(weights.eps_e)
    return out


def kcl_residuals(pred_bus, pred_branch, arr: BranchArrays) -> tuple[Tensor, Tensor]:
    """Per-bus |dP|, |dQ| from predicted injections, voltages, and flows.

    Branch charging enters through the per-end shunt terms evaluated at the
    tap-corrected sending voltage; bus shunts use the bus voltage directly.
    """
    bus = _t(pred_bus)
    br = _t(pred_branch)
    v = bus[:, 2:3]
    v_send = ad.gather(v, arr.send) / ad.Tensor(arr.tap_send[:, None])
    v2 = ad.square(v_send)
    p_leave = br[:, 0:1] + v2 * ad.Tensor(arr.g_m[:, None])
    q_leave = br[:, 1:2] - v2 * ad.Tensor(arr.b_m[:, None])
    sum_p = ad.scatter_add(p_leave, arr.send, arr.n)
    sum_q = ad.scatter_add(q_leave, arr.send, arr.n)
    v_bus2 = ad.square(v)
    dp = bus[:, 0:1] - sum_p - v_bus2 * ad.Tensor(arr.g_sh[:, None])
    dq = bus[:, 1:2] - sum_q + v_bus2 * ad.Tensor(arr.b_sh[:, None])
    return ad.tabs(dp), ad.tabs(dq)


def kcl_loss(pred_bus, pred_branch, arr: BranchArrays) -> Tensor:
    dp, dq = kcl_residuals(pred_bus, pred_branch, arr)
    return ad.tmean(dp + dq)


def branch_loss_constraint(pred_bus, pred_branch, arr: BranchArrays) -> Tensor:
    """L1 gap between current-based and flow-sum branch losses, per direction."""
    if arr.e2 == 0:
        return ad.Tensor(0.0)
    bus = _t(pred_bus)
    br = _t(pred_branch)
    v = bus[:, 2:3]
    v_send = ad.gather(v, arr.send) / ad.Tensor(arr.tap_send[:, None])
    if np.any(v_send.data < 1e-6):
        # degenerate predicted voltage; floor it and log (impossible at a solution)
        import logging
        logging.getLogger(__name__).warning("sending voltage below 1e-6 floored")
        v_send = v_send + ad.Tensor(np.where(v_send.data < 1e-6,
                                             1e-6 - v_send.data, 0.0))
    p = br[:, 0:1]
    q = br[:, 1:2]
    i2 = ad.div(ad.square(p) + ad.square(q), ad.square(v_send))
    p_loss_phys = ad.tabs(i2 * ad.Tensor(arr.r[:, None]))
    q_loss_phys = ad.tabs(i2 * ad.Tensor(arr.x[:, None]))
    p_loss_pred = ad.tabs(p + ad.gather(p, arr.reverse))
    q_loss_pred = ad.tabs(q + ad.gather(q, arr.reverse))
    return (ad.tmean(ad.tabs(p_loss_phys - p_loss_pred))
            + ad.tmean(ad.tabs(q_loss_phys - q_loss_pred)))


def angle_diffs_from_predictions(pred_bus, pred_branch,
                                 arr: BranchArrays) -> tuple[Tensor, np.ndarray]:
    """Per-direction angle differences via the branch-power arctangent.

    Returns (angles, valid mask); directions with a near-singular denominator
    are flagged invalid and carry zero value and zero gradient.
    """
    bus = _t(pred_bus)
    br = _t(pred_branch)
    v = bus[:, 2:3]
    v_send = ad.gather(v, arr.send) / ad.Tensor(arr.tap_send[:, None])
    p = br[:, 0:1]
    q = br[:, 1:2]
    gv = ad.Tensor(arr.g[:, None])
    bv = ad.Tensor(arr.b[:, None])
    y2 = ad.Tensor((arr.g ** 2 + arr.b ** 2)[:, None])
    num = bv * p + gv * q
    den = gv * p - bv * q - ad.square(v_send) * y2
    valid = np.abs(den.data) > 1e-12
    sel = ad.Tensor(valid.astype(float))
    safe_den = den + ad.Tensor(np.where(valid, 0.0, 1.0))
    return ad.arctan(ad.div(num, safe_den)) * sel, valid[:, 0]


def angle_loss(pred_bus, pred_branch, arr: BranchArrays,
               target_theta: np.ndarray) -> Tensor:
    """Mean absolute angle-difference error against the solved angles."""
    if arr.e2 == 0:
        return ad.Tensor(0.0)
    pred, valid = angle_diffs_from_predictions(pred_bus, pred_branch, arr)
    target = (target_theta[arr.send] - target_theta[arr.recv])[:, None]
    target = np.where(valid[:, None], target, 0.0)
    return ad.tmean(ad.tabs(pred - ad.Tensor(target)))


def hybrid_loss(pred_bus, pred_branch, target_bus: np.ndarray,
                target_branch: np.ndarray, target_theta: np.ndarray,
                net_or_arrays, weights: LossWeights,
                bus_scale: np.ndarray | None = None,
                branch_scale: np.ndarray | None = None) -> tuple[Tensor, dict]:
    """Full loss for one sample plus its per-term breakdown."""
    arr = net_or_arrays if isinstance(net_or_arrays, BranchArrays) \
        else BranchArrays(net_or_arrays)
    terms = {}
    ldata = data_loss(pred_bus, pred_branch, target_bus, target_branch, weights,
                      bus_scale=bus_scale, branch_scale=branch_scale)
    lkcl = kcl_loss(pred_bus, pred_branch, arr)
    total = ldata * ad.Tensor(weights.eps_data) \
        + lkcl * ad.Tensor(weights.eps_phy * weights.eps_kcl)
    terms["data"] = float(ldata.data)
    terms["kcl"] = float(lkcl.data)
    if weights.eps_loss > 0:
        lbr = branch_loss_constraint(pred_bus, pred_branch, arr)
        total = total + lbr * ad.Tensor(weights.eps_phy * weights.eps_loss)
        terms["loss_term"] = float(lbr.data)
    else:
        terms["loss_term"] = 0.0
    if weights.eps_angle > 0:
        lang = angle_loss(pred_bus, pred_branch, arr, target_theta)
        total = total + lang * ad.Tensor(weights.eps_phy * weights.eps_angle)
        terms["angle_term"] = float(lang.data)
    else:
        terms["angle_term"] = 0.0
    terms["total"] = float(total.data)
    return total, terms


def hybrid_loss_batch(samples, weights: LossWeights) -> tuple[Tensor, dict]:
    """Batch mean of per-sample hybrid losses.

    `samples` yields (pred_bus, pred_branch, target_bus, target_branch,
    target_theta, BranchArrays) tuples.
    """
    totals = []
    agg = {"data": 0.0, "kcl": 0.0, "loss_term": 0.0, "angle_term": 0.0}
    for pred_bus, pred_branch, tb, th, tt, arr in samples:
        total, terms = hybrid_loss(pred_bus, pred_branch, tb, th, tt, arr, weights)
        totals.append(ad.reshape(total, (1,)))
        for k in agg:
            agg[k] += terms[k]
    n = len(totals)
    batch_total = ad.tmean(ad.concat(totals, axis=0))
    breakdown = {k: v / n for k, v in agg.items()}
    breakdown["total"] = float(batch_total.data)
    return batch_total, breakdown
