"""Extreme-error metrics, error-amplification analysis, and the warm-start benchmark."""
from __future__ import annotations

import cmath
import time
from dataclasses import dataclass

import numpy as np

from .grid import Network
from .losses import BranchArrays, kcl_residuals
from .newton import (NonConvergenceError, PowerFlowSolution, SingularJacobianError,
                     SolverOptions, solve)


@dataclass
class SampleErrors:
    e_v: float                  # p.u.
    e_theta: float | None       # degrees; None when angles were not recovered
    e_sl: float                 # MVA
    e_ds: float                 # MVA


@dataclass
class Thresholds:
    mu_v: float = 0.01          # p.u.
    mu_sl: float = 10.0         # MVA
    mu_ds: float = 10.0         # MVA

    def __post_init__(self):
        if min(self.mu_v, self.mu_sl, self.mu_ds) <= 0:
            raise ValueError("thresholds must be positive")


def sample_errors(pred_bus: np.ndarray, pred_branch: np.ndarray,
                  truth: PowerFlowSolution, net: Network,
                  pred_theta: np.ndarray | None = None) -> SampleErrors:
    """Per-sample maxima of the four error classes.

    Branch-power error is the magnitude of the complex flow error; unbalanced
    power evaluates the KCL residual of the predictions. MVA via base_mva.
    """
    e_v = float(np.max(np.abs(pred_bus[:, 2] - truth.v)))
    if pred_theta is not None:
        e_theta = float(np.degrees(np.max(np.abs(pred_theta - truth.theta))))
    else:
        e_theta = None
    if truth.s_branch.size:
        pred_flow = pred_branch[:, 0] + 1j * pred_branch[:, 1]
        e_sl = float(np.max(np.abs(pred_flow - truth.s_branch))) * net.base_mva
    else:
        e_sl = 0.0
    arr = BranchArrays(net)
    dp, dq = kcl_residuals(pred_bus, pred_branch, arr)
    ds = np.abs(dp.data[:, 0] + 1j * dq.data[:, 0])
    e_ds = float(np.max(ds)) * net.base_mva
    return SampleErrors(e_v=e_v, e_theta=e_theta, e_sl=e_sl, e_ds=e_ds)


def accuracy(errors: list[SampleErrors], thr: Thresholds | None = None) -> float:
    """Fraction of samples whose V, branch-flow, and KCL errors are all in bounds."""
    if not errors:
        raise ValueError("empty error list")
    thr = thr or Thresholds()
    ok = sum(1 for e in errors
             if e.e_v <= thr.mu_v and e.e_sl <= thr.mu_sl and e.e_ds <= thr.mu_ds)
    return ok / len(errors)


def amplification_report(net: Network, sol: PowerFlowSolution,
                         dv_i: float = 0.0, dv_j: float = 0.0,
                         dtheta: float = 0.0) -> list[dict]:
    """Per-branch first-order flow sensitivity versus exact re-evaluation.

    Uses the plain series-flow relation S = y*(Vi^2 - Vi Vj e^{j theta}) at the
    operating point; coefficients K1 = 2Vi - Vj e^{j th}, K2 = Vi e^{j th},
    K3 = Vi Vj e^{j th}.
    """
    pos = {b.id: i for i, b in enumerate(net.buses)}
    rows = []
    for _, br in net.live_branches():
        i, j = pos[br.from_bus], pos[br.to_bus]
        vi, vj = sol.v[i], sol.v[j]
        th = sol.theta[i] - sol.theta[j]
        y = br.y_series
        yc = y.conjugate()
        e = cmath.exp(1j * th)
        k1 = 2 * vi - vj * e
        k2 = vi * e
        k3 = vi * vj * e
        lin = k1 * yc * dv_i - k2 * yc * dv_j - 1j * k3 * yc * dtheta

        def s(a, b, t):
            return yc * (a * a - a * b * cmath.exp(1j * t))

        exact = s(vi + dv_i, vj + dv_j, th + dtheta) - s(vi, vj, th)
        rows.append({"from": br.from_bus, "to": br.to_bus, "y_abs": abs(y),
                     "k1": abs(k1), "k2": abs(k2), "k3": abs(k3),
                     "linearized_ds": abs(lin), "exact_ds": abs(exact)})
    rows.sort(key=lambda r: -r["y_abs"])
    return rows


def warmstart_bench(cases: list[Network],
                    inits: list[tuple[np.ndarray, np.ndarray]] | None,
                    opts: SolverOptions | None = None) -> dict:
    """Flat-start versus provided-init NR statistics over a case set."""
    opts = opts or SolverOptions()
    out = {"cases": len(cases), "failures": 0}
    for label, use_init in (("flat", False), ("init", True)):
        if use_init and inits is None:
            continue
        conv = 0
        iters = []
        t_nr = 0.0
        for k, net in enumerate(cases):
            init = inits[k] if use_init else None
            case_opts = SolverOptions(tol=opts.tol, max_iterations=opts.max_iterations,
                                      slack_angle=(float(init[1][net.slack_index])
                                                   if init is not None else 0.0),
                                      enforce_q_limits=opts.enforce_q_limits)
            try:
                t0 = time.perf_counter()
                _, rep = solve(net, init=init, opts=case_opts)
                t_nr += time.perf_counter() - t0
            except (NonConvergenceError, SingularJacobianError):
                out["failures"] += 1
                continue
            if rep.converged:
                conv += 1
                iters.append(rep.iterations)
            else:
                iters.append(opts.max_iterations)
        out[label] = {
            "convergence_rate": conv / len(cases) if cases else 0.0,
            "mean_iterations": float(np.mean(iters)) if iters else float("nan"),
            "nr_time": t_nr,
        }
    return out
