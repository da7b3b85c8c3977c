"""Reference-free multi-task graph learning model: masked graph transformer
with bus- and branch-level output heads."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .grid import BusKind, Network, weighted_adjacency
from .lts import sample_inputs

TYPE_CODES = {
    BusKind.PQ: (1.0, 1.0, 0.0),
    BusKind.PV: (1.0, 0.0, 2.0),
    BusKind.Slack: (0.0, 0.0, 1.0),
    BusKind.Virtual: (0.0, 0.0, 0.0),
}


@dataclass
class ModelConfig:
    n_max: int = 48
    d_d: int = 64
    m_layers: int = 3
    k_heads: int = 4
    gat_heads: int = 2
    ffn_width: int = 128

    def __post_init__(self):
        if self.d_d % self.k_heads:
            raise ValueError(f"d_d {self.d_d} not divisible by k_heads {self.k_heads}")
        if self.d_d % self.gat_heads:
            raise ValueError(f"d_d {self.d_d} not divisible by gat_heads {self.gat_heads}")


@dataclass
class Normalization:
    """Feature standardization statistics, stored with the checkpoint."""
    x_mean: np.ndarray
    x_std: np.ndarray
    edge_mean: np.ndarray
    edge_std: np.ndarray
    bus_out_mean: np.ndarray
    bus_out_std: np.ndarray
    branch_out_mean: np.ndarray
    branch_out_std: np.ndarray

    @classmethod
    def identity(cls) -> "Normalization":
        return cls(np.zeros(7), np.ones(7), np.zeros(3), np.ones(3),
                   np.zeros(3), np.ones(3), np.zeros(2), np.ones(2))

    @classmethod
    def fit(cls, x_rows: np.ndarray, edge_rows: np.ndarray,
            bus_targets: np.ndarray, branch_targets: np.ndarray) -> "Normalization":
        def stats(a, width):
            if a.size == 0:
                return np.zeros(width), np.ones(width)
            return a.mean(axis=0), np.maximum(a.std(axis=0), 1e-6)

        xm, xs = stats(x_rows, 7)
        em, es = stats(edge_rows, 3)
        bm, bs = stats(bus_targets, 3)
        hm, hs = stats(branch_targets, 2)
        return cls(xm, xs, em, es, bm, bs, hm, hs)

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, doc: dict) -> "Normalization":
        return cls(**{k: np.asarray(v, float) for k, v in doc.items()})


@dataclass
class ModelInput:
    x_in: np.ndarray            # n_max x 7
    t: np.ndarray               # n_max x 3 bus type rows
    a: np.ndarray               # n_max x n_max weighted adjacency
    edges: list                 # (i, j, feature 3-vector) per in-service branch
    real_n: int

    def attention_mask(self) -> np.ndarray:
        n = self.x_in.shape[0]
        mask = np.zeros((n, n))
        mask[self.real_n:, :] = -np.inf
        mask[:, self.real_n:] = -np.inf
        return mask


def build_model_input(net: Network, n_max: int,
                      rng: np.random.Generator | None = None,
                      x_in: np.ndarray | None = None) -> ModelInput:
    """Pad a network to n_max rows. Virtual rows are zero-filled in production;
    pass an rng to fill them with arbitrary values (mask-sufficiency tests)."""
    n = net.n
    if n > n_max:
        raise ValueError(f"network has {n} buses > n_max {n_max}")
    if x_in is None:
        x_in = sample_inputs(net)
    x = np.zeros((n_max, 7))
    x[:n] = x_in
    t = np.zeros((n_max, 3))
    for i, b in enumerate(net.buses):
        t[i] = TYPE_CODES[b.kind]
    a_full = np.zeros((n_max, n_max))
    a_real, edges = weighted_adjacency(net)
    a_full[:n, :n] = a_real
    if rng is not None:
        x[n:] = rng.normal(size=(n_max - n, 7))
    return ModelInput(x_in=x, t=t, a=a_full, edges=edges, real_n=n)


@dataclass
class ModelOutput:
    x_out: np.ndarray           # real_n x 3 (P, Q, V)
    h_out: np.ndarray           # 2E x 2 (P_L, Q_L), [2k] from->to, [2k+1] to->from


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d = cfg.d_d

    def glorot(n_in, n_out):
        s = np.sqrt(6.0 / (n_in + n_out))
        return ad.parameter(rng.uniform(-s, s, size=(n_in, n_out)))

    params: dict[str, Tensor] = {
        "w_in": glorot(7, d),
        "w_t": glorot(3, d),
    }
    for layer in range(cfg.m_layers):
        pre = f"l{layer}."
        params[pre + "ln1_g"] = ad.parameter(np.ones(d))
        params[pre + "ln1_b"] = ad.parameter(np.zeros(d))
        params[pre + "ln2_g"] = ad.parameter(np.ones(d))
        params[pre + "ln2_b"] = ad.parameter(np.zeros(d))
        dk = d // cfg.k_heads
        for h in range(cfg.k_heads):
            params[pre + f"wq{h}"] = glorot(d, dk)
            params[pre + f"wk{h}"] = glorot(d, dk)
            params[pre + f"wv{h}"] = glorot(d, dk)
        dg = d // cfg.gat_heads
        for h in range(cfg.gat_heads):
            params[pre + f"gat_w{h}"] = glorot(d, dg)
            params[pre + f"gat_src{h}"] = ad.parameter(
                rng.uniform(-0.1, 0.1, size=(dg, 1)))
            params[pre + f"gat_dst{h}"] = ad.parameter(
                rng.uniform(-0.1, 0.1, size=(dg, 1)))
        params[pre + "ffn_w1"] = glorot(d, cfg.ffn_width)
        params[pre + "ffn_b1"] = ad.parameter(np.zeros(cfg.ffn_width))
        params[pre + "ffn_w2"] = glorot(cfg.ffn_width, d)
        params[pre + "ffn_b2"] = ad.parameter(np.zeros(d))
    params["w_bus"] = glorot(d, 3)
    params["w_a"] = glorot(3, d)
    params["w_h"] = glorot(4 * d, d)
    params["w_branch"] = glorot(d, 2)
    return params


def _layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    mu = ad.tmean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = ad.tmean(ad.square(centered), axis=-1, keepdims=True)
    return ad.div(centered, ad.sqrt(var + ad.Tensor(1e-8))) * gain + bias


def embed(x_in: Tensor, t: Tensor, params: dict[str, Tensor]) -> Tensor:
    return ad.leaky_relu(x_in @ params["w_in"] + t @ params["w_t"])


def _swap_head_axis(t: Tensor) -> Tensor:
    """(..., N, K, dk) <-> (..., K, N, dk)."""
    nd = len(t.shape)
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return ad.permute(t, axes)


def _mha(x: Tensor, mask: np.ndarray, params, pre: str, cfg: ModelConfig) -> Tensor:
    """All heads projected in one matmul; identical to the per-head layout."""
    k_h = cfg.k_heads
    dk = cfg.d_d // k_h
    scale = 1.0 / np.sqrt(dk)
    lead = x.shape[:-1]
    wq = ad.concat([params[pre + f"wq{h}"] for h in range(k_h)], axis=-1)
    wk = ad.concat([params[pre + f"wk{h}"] for h in range(k_h)], axis=-1)
    wv = ad.concat([params[pre + f"wv{h}"] for h in range(k_h)], axis=-1)

    def split(t):
        return _swap_head_axis(ad.reshape(t, lead + (k_h, dk)))

    q, k, v = split(x @ wq), split(x @ wk), split(x @ wv)
    logits = (q @ ad.transpose(k)) * ad.Tensor(scale)    # (..., K, N, N)
    att = ad.masked_softmax(logits, np.expand_dims(mask, -3))
    out = _swap_head_axis(att @ v)                       # (..., N, K, dk)
    return ad.reshape(out, lead + (cfg.d_d,))


def _gat_flat(x_flat: Tensor, src2: np.ndarray, dst2: np.ndarray, n_rows: int,
              params, pre: str, cfg: ModelConfig) -> Tensor:
    """Graph attention over directed (src, dst) pairs on 2-d rows."""
    dg = cfg.d_d // cfg.gat_heads
    wg = ad.concat([params[pre + f"gat_w{h}"] for h in range(cfg.gat_heads)],
                   axis=-1)
    u = x_flat @ wg
    u_src = ad.gather(u, src2)
    u_dst = ad.gather(u, dst2)
    w_cols = []
    for h in range(cfg.gat_heads):
        s_src = u_src[:, h * dg:(h + 1) * dg] @ params[pre + f"gat_src{h}"]
        s_dst = u_dst[:, h * dg:(h + 1) * dg] @ params[pre + f"gat_dst{h}"]
        logits = ad.leaky_relu(s_src + s_dst)
        # neighborhood softmax at the destination bus
        lmax = np.zeros((n_rows, 1))
        np.maximum.at(lmax, dst2, logits.data)
        e = _exp(logits - ad.Tensor(lmax[dst2]))
        denom = ad.scatter_add(e, dst2, n_rows)
        w = ad.div(e, ad.gather(denom, dst2) + ad.Tensor(1e-300))
        w_cols.append(ad.broadcast_to(w, (len(src2), dg)))
    return ad.scatter_add(u_src * ad.concat(w_cols, axis=-1), dst2, n_rows)


def _gat(x: Tensor, edges, n_rows: int, params, pre: str, cfg: ModelConfig) -> Tensor:
    """Structure-driven graph attention over in-service edges (both directions)."""
    if not edges:
        return ad.Tensor(np.zeros((1,)))   # caller handles the no-edge case
    src = np.array([e[0] for e in edges] + [e[1] for e in edges], dtype=np.intp)
    dst = np.array([e[1] for e in edges] + [e[0] for e in edges], dtype=np.intp)
    return _gat_flat(x, src, dst, n_rows, params, pre, cfg)


def _exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor(out, parents=(a,), op="exp", vjp=lambda g: (g * out,))


def mgt_layer(x: Tensor, mask: np.ndarray, edges, params, pre: str,
              cfg: ModelConfig) -> Tensor:
    """One masked graph transformer layer with pre-normalized sublayers."""
    n_rows = x.shape[-2]
    y = _layer_norm(x, params[pre + "ln1_g"], params[pre + "ln1_b"])
    agg = _mha(y, mask, params, pre, cfg)
    gat = _gat(y, edges, n_rows, params, pre, cfg)
    if edges:
        x = x + agg + gat
    else:
        x = x + agg
    z = _layer_norm(x, params[pre + "ln2_g"], params[pre + "ln2_b"])
    ffn = ad.leaky_relu(z @ params[pre + "ffn_w1"] + params[pre + "ffn_b1"]) \
        @ params[pre + "ffn_w2"] + params[pre + "ffn_b2"]
    return x + ffn


def forward(inp: ModelInput, params: dict[str, Tensor], cfg: ModelConfig,
            norm: Normalization | None = None,
            return_tensors: bool = False):
    """Full forward pass: (bus embeddings, ModelOutput).

    With return_tensors=True the outputs stay on the tape for training.
    """
    norm = norm or Normalization.identity()
    for i, j, _ in inp.edges:
        if i >= inp.real_n or j >= inp.real_n:
            raise ValueError(f"edge ({i},{j}) references a virtual bus")
    x_std = (inp.x_in - norm.x_mean) / norm.x_std
    x = embed(ad.Tensor(x_std), ad.Tensor(inp.t), params)
    mask = inp.attention_mask()
    for layer in range(cfg.m_layers):
        x = mgt_layer(x, mask, inp.edges, params, f"l{layer}.", cfg)
    x_d = x

    bus_std = x_d @ params["w_bus"]
    bus_out = bus_std * ad.Tensor(norm.bus_out_std) + ad.Tensor(norm.bus_out_mean)
    bus_out = bus_out[: inp.real_n]

    if inp.edges:
        src = np.array([e[0] for e in inp.edges], dtype=np.intp)
        dst = np.array([e[1] for e in inp.edges], dtype=np.intp)
        feats = np.array([e[2] for e in inp.edges])
        feats = (feats - norm.edge_mean) / norm.edge_std
        # directed branches: [2k] = from->to, [2k+1] = to->from
        e2 = len(inp.edges) * 2
        s_idx = np.empty(e2, dtype=np.intp)
        r_idx = np.empty(e2, dtype=np.intp)
        s_idx[0::2], s_idx[1::2] = src, dst
        r_idx[0::2], r_idx[1::2] = dst, src
        feat2 = np.repeat(feats, 2, axis=0)
        xi = ad.gather(x_d, s_idx)
        xj = ad.gather(x_d, r_idx)
        edge_emb = ad.Tensor(feat2) @ params["w_a"]
        h_l = ad.concat([xi, xj, xi - xj, edge_emb], axis=-1) @ params["w_h"]
        br_std = ad.leaky_relu(h_l) @ params["w_branch"]
        br_out = br_std * ad.Tensor(norm.branch_out_std) + ad.Tensor(norm.branch_out_mean)
    else:
        br_out = ad.Tensor(np.zeros((0, 2)))

    if return_tensors:
        return x_d, bus_out, br_out
    return x_d.data, ModelOutput(x_out=bus_out.data, h_out=br_out.data)


# --- checkpoints --------------------------------------------------------------

def save_checkpoint(path, params: dict[str, Tensor], cfg: ModelConfig,
                    norm: Normalization) -> None:
    ad.save_params(params, path)
    sidecar = {"format_version": 1, "config": asdict(cfg), "normalization": norm.to_dict()}
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=1)


def load_checkpoint(path) -> tuple[dict[str, Tensor], ModelConfig, Normalization]:
    params = ad.load_params(path)
    with open(str(path) + ".json") as fh:
        sidecar = json.load(fh)
    cfg = ModelConfig(**sidecar["config"])
    norm = Normalization.from_dict(sidecar["normalization"])
    return params, cfg, norm
