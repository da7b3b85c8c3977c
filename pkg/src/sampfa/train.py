"""Training loop: stacked-batch forward and loss evaluation, two-stage schedule."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .grid import Network
from .losses import BranchArrays, LossWeights, StageSchedule
from .lts import record_to_sample
from .model import (ModelConfig, ModelInput, Normalization, build_model_input,
                    embed, forward, init_params, _gat_flat, _layer_norm, _mha)


@dataclass
class TrainSample:
    net: Network
    inp: ModelInput
    arr: BranchArrays
    bus_target: np.ndarray      # N x 3
    branch_target: np.ndarray   # 2E x 2
    theta: np.ndarray


def prepare_samples(records: list[dict], n_max: int) -> list[TrainSample]:
    out = []
    for rec in records:
        s = record_to_sample(rec)
        net = s.sub_network
        inp = build_model_input(net, n_max, x_in=np.asarray(rec["inputs"], float))
        bus_t = np.asarray(rec["bus_targets"], float)
        br_t = np.asarray(rec["branch_targets"], float).reshape(-1, 2)
        out.append(TrainSample(net=net, inp=inp, arr=BranchArrays(net),
                               bus_target=bus_t, branch_target=br_t,
                               theta=np.asarray(rec["theta"], float)))
    return out


def fit_normalization(samples: list[TrainSample]) -> Normalization:
    x_rows = np.concatenate([s.inp.x_in[: s.inp.real_n] for s in samples])
    edge_rows = np.concatenate([np.array([e[2] for e in s.inp.edges])
                                for s in samples if s.inp.edges])
    bus_t = np.concatenate([s.bus_target for s in samples])
    br_t = np.concatenate([s.branch_target for s in samples if s.branch_target.size])
    return Normalization.fit(x_rows, edge_rows, bus_t, br_t)


class Batch:
    """Samples stacked to a fixed n_max with flattened branch index arrays.

    Per-sample means become weighted sums over the flat arrays; the result
    matches averaging the per-sample losses exactly (see the equivalence test).
    """

    def __init__(self, samples: list[TrainSample], norm: Normalization,
                 n_max: int | None = None):
        b = len(samples)
        # outputs at real buses do not depend on padding, so pad only as far
        # as the largest sample in this batch
        if n_max is None:
            n_max = max(s.inp.real_n for s in samples)
        self.b = b
        self.n_max = n_max
        self.x = np.stack([(s.inp.x_in[:n_max] - norm.x_mean) / norm.x_std
                           for s in samples])
        self.t = np.stack([s.inp.t[:n_max] for s in samples])
        self.mask = np.stack([s.inp.attention_mask()[:n_max, :n_max]
                              for s in samples])

        src, dst, feats = [], [], []
        s_idx, r_idx, rev, dir_w = [], [], [], []
        bus_w = np.zeros((b * n_max, 1))
        kcl_w = np.zeros((b * n_max, 1))
        bus_target = np.zeros((b * n_max, 3))
        g_sh = np.zeros((b * n_max, 1))
        b_sh = np.zeros((b * n_max, 1))
        cols = {k: [] for k in ("tap", "g", "b", "r", "x", "g_m", "b_m", "th")}
        br_targets = []
        self.branch_slices = []
        offset_dir = 0
        for k, s in enumerate(samples):
            off = k * n_max
            n = s.inp.real_n
            bus_w[off:off + n] = 1.0 / (3.0 * n * b)
            kcl_w[off:off + n] = 1.0 / (n * b)
            bus_target[off:off + n] = s.bus_target
            g_sh[off:off + n, 0] = s.arr.g_sh
            b_sh[off:off + n, 0] = s.arr.b_sh
            for i, j, f in s.inp.edges:
                src.append(off + i)
                dst.append(off + j)
                feats.append((f - norm.edge_mean) / norm.edge_std)
            e2 = s.arr.e2
            s_idx.extend(off + s.arr.send)
            r_idx.extend(off + s.arr.recv)
            rev.extend(offset_dir + s.arr.reverse)
            dir_w.extend([1.0 / (e2 * b)] * e2)
            cols["tap"].extend(s.arr.tap_send)
            cols["g"].extend(s.arr.g)
            cols["b"].extend(s.arr.b)
            cols["r"].extend(s.arr.r)
            cols["x"].extend(s.arr.x)
            cols["g_m"].extend(s.arr.g_m)
            cols["b_m"].extend(s.arr.b_m)
            cols["th"].extend(s.theta[s.arr.send] - s.theta[s.arr.recv])
            br_targets.append(s.branch_target)
            self.branch_slices.append((offset_dir, offset_dir + e2))
            offset_dir += e2
        self.src = np.array(src, dtype=np.intp)
        self.dst = np.array(dst, dtype=np.intp)
        self.s_idx = np.array(s_idx, dtype=np.intp)
        self.r_idx = np.array(r_idx, dtype=np.intp)
        self.reverse = np.array(rev, dtype=np.intp)
        # directed entries [2k], [2k+1] share the undirected edge feature
        self.dir_feats = np.repeat(np.array(feats), 2, axis=0) if feats \
            else np.zeros((0, 3))
        self.bus_w = bus_w
        self.kcl_w = kcl_w
        self.bus_target = bus_target
        self.g_sh = g_sh
        self.b_sh = b_sh
        self.dir_w = np.array(dir_w)[:, None]
        self.tap = np.array(cols["tap"])[:, None]
        self.g = np.array(cols["g"])[:, None]
        self.bs = np.array(cols["b"])[:, None]
        self.r = np.array(cols["r"])[:, None]
        self.x_ser = np.array(cols["x"])[:, None]
        self.g_m = np.array(cols["g_m"])[:, None]
        self.b_m = np.array(cols["b_m"])[:, None]
        self.theta_diff = np.array(cols["th"])[:, None]
        self.branch_target = np.concatenate(br_targets) if br_targets \
            else np.zeros((0, 2))

    def embeddings(self, params, cfg: ModelConfig) -> Tensor:
        """Flattened (b*n_max, d_d) bus embeddings after all layers."""
        x = embed(ad.Tensor(self.x), ad.Tensor(self.t), params)
        for layer in range(cfg.m_layers):
            x = _batched_mgt_layer(x, self.mask, self.src, self.dst,
                                   self.b * self.n_max, params, f"l{layer}.", cfg)
        return ad.reshape(x, (self.b * self.n_max, cfg.d_d))

    def predictions(self, params, cfg: ModelConfig, norm: Normalization):
        x_flat = self.embeddings(params, cfg)
        bus = (x_flat @ params["w_bus"]) * ad.Tensor(norm.bus_out_std) \
            + ad.Tensor(norm.bus_out_mean)
        if self.s_idx.size:
            xi = ad.gather(x_flat, self.s_idx)
            xj = ad.gather(x_flat, self.r_idx)
            emb = ad.Tensor(self.dir_feats) @ params["w_a"]
            h = ad.concat([xi, xj, xi - xj, emb], axis=-1) @ params["w_h"]
            br = (ad.leaky_relu(h) @ params["w_branch"]) \
                * ad.Tensor(norm.branch_out_std) + ad.Tensor(norm.branch_out_mean)
        else:
            br = ad.Tensor(np.zeros((0, 2)))
        return bus, br

    def loss(self, params, cfg: ModelConfig, norm: Normalization,
             weights: LossWeights) -> tuple[Tensor, dict]:
        bus, br = self.predictions(params, cfg, norm)
        terms = {}
        # data term in standardized output units; see losses.data_loss
        bus_res = (bus - ad.Tensor(self.bus_target)) / ad.Tensor(norm.bus_out_std)
        ldata = ad.tsum(ad.square(bus_res) * ad.Tensor(self.bus_w)) \
            * ad.Tensor(weights.eps_n)
        if self.branch_target.size:
            br_res = (br - ad.Tensor(self.branch_target)) \
                / ad.Tensor(norm.branch_out_std)
            ldata = ldata + ad.tsum(ad.square(br_res) * ad.Tensor(self.dir_w / 2.0)) \
                * ad.Tensor(weights.eps_e)
        terms["data"] = float(ldata.data)
        total = ldata * ad.Tensor(weights.eps_data)

        v = bus[:, 2:3]
        if self.s_idx.size:
            v_send = ad.gather(v, self.s_idx) / ad.Tensor(self.tap)
            v2 = ad.square(v_send)
            p_leave = br[:, 0:1] + v2 * ad.Tensor(self.g_m)
            q_leave = br[:, 1:2] - v2 * ad.Tensor(self.b_m)
            sum_p = ad.scatter_add(p_leave, self.s_idx, self.b * self.n_max)
            sum_q = ad.scatter_add(q_leave, self.s_idx, self.b * self.n_max)
        else:
            sum_p = ad.Tensor(np.zeros((self.b * self.n_max, 1)))
            sum_q = sum_p
        v_bus2 = ad.square(v)
        dp = ad.tabs(bus[:, 0:1] - sum_p - v_bus2 * ad.Tensor(self.g_sh))
        dq = ad.tabs(bus[:, 1:2] - sum_q + v_bus2 * ad.Tensor(self.b_sh))
        lkcl = ad.tsum((dp + dq) * ad.Tensor(self.kcl_w))
        terms["kcl"] = float(lkcl.data)
        total = total + lkcl * ad.Tensor(weights.eps_phy * weights.eps_kcl)

        terms["loss_term"] = 0.0
        terms["angle_term"] = 0.0
        if self.s_idx.size and weights.eps_loss > 0:
            p, q = br[:, 0:1], br[:, 1:2]
            v_s = ad.gather(v, self.s_idx) / ad.Tensor(self.tap)
            if np.any(v_s.data < 1e-6):
                v_s = v_s + ad.Tensor(np.where(v_s.data < 1e-6,
                                               1e-6 - v_s.data, 0.0))
            i2 = ad.div(ad.square(p) + ad.square(q), ad.square(v_s))
            gap_p = ad.tabs(ad.tabs(i2 * ad.Tensor(self.r))
                            - ad.tabs(p + ad.gather(p, self.reverse)))
            gap_q = ad.tabs(ad.tabs(i2 * ad.Tensor(self.x_ser))
                            - ad.tabs(q + ad.gather(q, self.reverse)))
            lbr = ad.tsum((gap_p + gap_q) * ad.Tensor(self.dir_w))
            terms["loss_term"] = float(lbr.data)
            total = total + lbr * ad.Tensor(weights.eps_phy * weights.eps_loss)
        if self.s_idx.size and weights.eps_angle > 0:
            p, q = br[:, 0:1], br[:, 1:2]
            v_s = ad.gather(v, self.s_idx) / ad.Tensor(self.tap)
            y2 = self.g ** 2 + self.bs ** 2
            num = ad.Tensor(self.bs) * p + ad.Tensor(self.g) * q
            den = ad.Tensor(self.g) * p - ad.Tensor(self.bs) * q \
                - ad.square(v_s) * ad.Tensor(y2)
            valid = np.abs(den.data) > 1e-12
            sel = ad.Tensor(valid.astype(float))
            safe = den + ad.Tensor(np.where(valid, 0.0, 1.0))
            pred_th = ad.arctan(ad.div(num, safe)) * sel
            target = np.where(valid, self.theta_diff, 0.0)
            lang = ad.tsum(ad.tabs(pred_th - ad.Tensor(target))
                           * ad.Tensor(self.dir_w))
            terms["angle_term"] = float(lang.data)
            total = total + lang * ad.Tensor(weights.eps_phy * weights.eps_angle)
        terms["total"] = float(total.data)
        return total, terms


def _batched_mgt_layer(x, mask, src, dst, n_flat, params, pre, cfg):
    y = _layer_norm(x, params[pre + "ln1_g"], params[pre + "ln1_b"])
    agg = _mha(y, mask, params, pre, cfg)
    if src.size:
        y_flat = ad.reshape(y, (n_flat, cfg.d_d))
        src2 = np.concatenate([src, dst])
        dst2 = np.concatenate([dst, src])
        gat = _gat_flat(y_flat, src2, dst2, n_flat, params, pre, cfg)
        x = x + agg + ad.reshape(gat, x.shape)
    else:
        x = x + agg
    z = _layer_norm(x, params[pre + "ln2_g"], params[pre + "ln2_b"])
    ffn = ad.leaky_relu(z @ params[pre + "ffn_w1"] + params[pre + "ffn_b1"]) \
        @ params[pre + "ffn_w2"] + params[pre + "ffn_b2"]
    return x + ffn


@dataclass
class TrainResult:
    params: dict
    norm: Normalization
    history: list[dict]


def train(samples: list[TrainSample], cfg: ModelConfig, schedule: StageSchedule,
          seed: int = 0, lr: float = 1e-3, batch_size: int = 128,
          final_lr_fraction: float = 1.0, log_path=None,
          norm: Normalization | None = None, progress=None) -> TrainResult:
    params = init_params(cfg, seed=seed)
    norm = norm or fit_normalization(samples)
    plist = list(params.values())
    opt = Adam(plist, lr=lr)
    n_epochs = schedule.stage1_epochs + schedule.stage2_epochs
    history = []
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "stage", "total", "data", "kcl", "loss_term",
                         "angle_term", "grad_norm", "wall_time"])
    try:
        for epoch in range(n_epochs):
            t0 = time.perf_counter()
            if final_lr_fraction < 1.0 and n_epochs > 1:
                # cosine decay from lr to lr * final_lr_fraction
                frac = 0.5 * (1.0 + np.cos(np.pi * epoch / (n_epochs - 1)))
                opt.lr = lr * (final_lr_fraction + (1.0 - final_lr_fraction) * frac)
            stage, weights = schedule.weights_for_epoch(epoch)
            rng = np.random.default_rng([seed, epoch])
            order = rng.permutation(len(samples))
            agg = {"total": 0.0, "data": 0.0, "kcl": 0.0, "loss_term": 0.0,
                   "angle_term": 0.0}
            grad_norm = 0.0
            n_batches = 0
            for start in range(0, len(order), batch_size):
                chunk = [samples[i] for i in order[start:start + batch_size]]
                batch = Batch(chunk, norm)
                ad.zero_grads(plist)
                loss, terms = batch.loss(params, cfg, norm, weights)
                ad.backward(loss)
                gn = np.sqrt(sum(float(np.sum(p.grad ** 2)) for p in plist
                                 if p.grad is not None))
                opt.step()
                grad_norm += gn
                for k in agg:
                    agg[k] += terms[k]
                n_batches += 1
            row = {k: v / n_batches for k, v in agg.items()}
            row.update({"epoch": epoch, "stage": stage,
                        "grad_norm": grad_norm / n_batches,
                        "wall_time": time.perf_counter() - t0})
            history.append(row)
            if writer:
                writer.writerow([row["epoch"], row["stage"], row["total"],
                                 row["data"], row["kcl"], row["loss_term"],
                                 row["angle_term"], row["grad_norm"],
                                 row["wall_time"]])
                fh.flush()
            if progress:
                progress(row)
    finally:
        if fh:
            fh.close()
    return TrainResult(params=params, norm=norm, history=history)


def predict_sample(sample: TrainSample, params, cfg: ModelConfig,
                   norm: Normalization):
    """Single-sample inference through the reference forward path."""
    _, out = forward(sample.inp, params, cfg, norm)
    return out
