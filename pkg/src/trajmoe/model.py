"""Spatially-aware mixture-of-experts transformer.

Four token streams (POI, position, popularity, fused trajectory) run through
per-stream masked attention, then a block of residual expert FFNs. A
spatial-temporal router picks, per position, either the trajectory gate's or
the time gate's weights to mix the three specialised experts into the fused
stream, which also passes through an always-on shared expert.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import core, features, geo
from .config import STREAMS, ModelConfig
from .core import ShapeError, Tensor
from .features import PaddedBatch, StreamEmbeddings

FOUNDATIONAL = STREAMS[:3]


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """All learnable arrays of the model, drawn from one seeded generator."""
    rng = np.random.default_rng(seed)
    params = geo.init_params(cfg, rng)
    params.update(features.init_params(cfg, rng))
    d, h, s = cfg.d, cfg.expert_dim, cfg.init_std
    n_attn = 1 if cfg.share_attention else len(STREAMS)
    n_exp = len(cfg.experts())
    for layer in range(cfg.layers):
        p = f"layer{layer}"
        for name in ("wq", "wk", "wv", "wo"):
            params[f"{p}.attn.{name}"] = rng.normal(0.0, s, (n_attn, d, d))
            params[f"{p}.attn.b{name[1]}"] = np.zeros((n_attn, d))
        params[f"{p}.attn.ln_g"] = np.ones((n_attn, d))
        params[f"{p}.attn.ln_b"] = np.zeros((n_attn, d))
        params[f"{p}.expert.w1"] = rng.normal(0.0, s, (n_exp, d, h))
        params[f"{p}.expert.b1"] = np.zeros((n_exp, h))
        params[f"{p}.expert.w2"] = rng.normal(0.0, s, (n_exp, h, d))
        params[f"{p}.expert.b2"] = np.zeros((n_exp, d))
        if cfg.uses_traj_gate:
            params[f"{p}.gate.traj.w"] = rng.normal(0.0, s, (d, 3))
            params[f"{p}.gate.traj.b"] = np.zeros(3)
        if cfg.uses_time_gate:
            params[f"{p}.gate.time.w"] = rng.normal(0.0, s, (d, 3))
            params[f"{p}.gate.time.b"] = np.zeros(3)
        if cfg.uses_router:
            params[f"{p}.gate.router.w"] = rng.normal(0.0, s, (2 * d, 2))
            params[f"{p}.gate.router.b"] = np.zeros(2)
    return params


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count, independent of any city or dataset."""
    d, c, B = cfg.d, cfg.poi_categories, cfg.rank_buckets
    hd, he = cfg.deep_dim, cfg.expert_dim
    cross_w = d if cfg.cross_mode == "vector" else d * d
    geo_n = (2 * c + 1) * d + 3 * d + B * d + cfg.cross_layers * (cross_w + d)
    geo_n += d * hd + hd + hd * d + d + 2 * d * d + d
    emb_n = (2 * c + 1) * d + 3 * d + B * d + (48 + 7 + 49) * d
    n_attn = 1 if cfg.share_attention else 4
    per_layer = n_attn * (4 * d * d + 4 * d + 2 * d)
    per_layer += len(cfg.experts()) * (d * he + he + he * d + d)
    per_layer += (d * 3 + 3) * (int(cfg.uses_traj_gate) + int(cfg.uses_time_gate))
    per_layer += (2 * d * 2 + 2) * int(cfg.uses_router)
    return geo_n + emb_n + cfg.layers * per_layer


# ------------------------------------------------------------------ pieces


def stacked_linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-group affine map: x (G, ..., din), w (G|1, din, dout), b (G|1, dout)."""
    G, din = x.shape[0], x.shape[-1]
    if w.ndim != 3 or w.shape[1] != din or w.shape[0] not in (1, G):
        raise ShapeError(f"stacked linear mismatch: x {x.shape}, w {w.shape}")
    x3 = x.data.reshape(G, -1, din)
    ws = [w.data[0]] * G if w.shape[0] == 1 else list(w.data)
    # per-group 2-D products stay on the BLAS path; batched matmul on strided views does not
    out = np.stack([x3[i] @ ws[i] for i in range(G)]) + b.data[:, None, :]
    out_shape = x.shape[:-1] + (w.shape[2],)

    def vjp(g):
        g3 = g.reshape(G, -1, w.shape[2])
        gx = np.stack([g3[i] @ ws[i].T for i in range(G)]).reshape(x.shape)
        gw = np.stack([x3[i].T @ g3[i] for i in range(G)])
        gb = g3.sum(axis=1)
        if w.shape[0] == 1 and G != 1:
            gw = gw.sum(axis=0, keepdims=True)
            gb = gb.sum(axis=0, keepdims=True)
        return gx, gw, gb

    return core.record(out.reshape(out_shape), (x, w, b), vjp)


def _attention_params(params, prefix: str, streams: slice | None):
    names = ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo", "ln_g", "ln_b")
    out = {}
    for n in names:
        t = params[f"{prefix}.attn.{n}"]
        out[n] = t if streams is None or t.shape[0] == 1 else core.getitem(t, streams)
    return out


def attention_allow(batch_mask: np.ndarray) -> np.ndarray:
    """Combined causal and key-padding mask, (B, T, T)."""
    T = batch_mask.shape[1]
    return features.causal_mask(T)[None] & batch_mask[:, None, :]


def masked_attention(x: Tensor, allow: np.ndarray, p: dict, heads: int, eps: float = 1e-5) -> Tensor:
    """Multi-head attention over stacked streams x (S, B, T, d), then residual + layer norm.

    ``allow`` is a boolean (B, T, T) mask; disallowed scores are -inf before the softmax.
    """
    S, B, T, d = x.shape
    if d % heads:
        raise ShapeError(f"head count {heads} does not divide model dim {d}")
    dk = d // heads

    def split(t):
        return core.transpose(core.reshape(t, (S, B, T, heads, dk)), (0, 1, 3, 2, 4))

    q = split(stacked_linear(x, p["wq"], p["bq"]))
    k = split(stacked_linear(x, p["wk"], p["bk"]))
    v = split(stacked_linear(x, p["wv"], p["bv"]))
    scores = core.mul(core.matmul(q, core.transpose(k, (0, 1, 2, 4, 3))), 1.0 / np.sqrt(dk))
    probs = core.softmax(scores, axis=-1, mask=allow[None, :, None, :, :])
    ctx = core.reshape(core.transpose(core.matmul(probs, v), (0, 1, 3, 2, 4)), (S, B, T, d))
    out = stacked_linear(ctx, p["wo"], p["bo"])
    return core.layer_norm(core.add(x, out), p["ln_g"], p["ln_b"], eps)


@dataclass
class RouterDecision:
    w_traj: np.ndarray | None  # (..., 3)
    w_time: np.ndarray | None  # (..., 3)
    s: np.ndarray | None  # (..., 2)
    g: np.ndarray | None  # (...,) 1.0 selects w_traj
    W: np.ndarray  # (..., 3)


def star_select(w_traj: Tensor, w_time: Tensor, s: Tensor, routing: str = "hard") -> tuple[Tensor, np.ndarray]:
    """Final expert weights ``g * w_traj + (1 - g) * w_time``.

    Hard routing sets ``g = [s1 >= s2]`` in the forward pass and backpropagates
    through ``sigmoid(s1 - s2)`` (straight-through). Soft routing uses the
    sigmoid in both passes.
    """
    diff = s.data[..., 0] - s.data[..., 1]
    soft = expit(diff)
    hard = (s.data[..., 0] >= s.data[..., 1]).astype(np.float64)
    g = hard if routing == "hard" else soft
    g1 = g[..., None]
    W = g1 * w_traj.data + (1.0 - g1) * w_time.data

    def vjp(gW):
        dg = (gW * (w_traj.data - w_time.data)).sum(axis=-1)
        ds = dg * soft * (1.0 - soft)
        return g1 * gW, (1.0 - g1) * gW, np.stack([ds, -ds], axis=-1)

    return core.record(W, (w_traj, w_time, s), vjp), g


def star_route(h_traj: Tensor, e_ts: Tensor, params, cfg: ModelConfig, prefix: str):
    """Router for one layer. Returns the weight tensor and the decision record."""
    w_traj = w_time = s = None
    g = None
    if h_traj.shape != e_ts.shape:
        raise ShapeError(f"router inputs differ in shape: {h_traj.shape} vs {e_ts.shape}")
    if cfg.uses_traj_gate:
        w_traj = core.softmax(core.linear(h_traj, params[f"{prefix}.gate.traj.w"], params[f"{prefix}.gate.traj.b"]))
    if cfg.uses_time_gate:
        w_time = core.softmax(core.linear(e_ts, params[f"{prefix}.gate.time.w"], params[f"{prefix}.gate.time.b"]))
    if cfg.uses_router:
        s = core.linear(
            core.concat([h_traj, e_ts], axis=-1),
            params[f"{prefix}.gate.router.w"],
            params[f"{prefix}.gate.router.b"],
        )
        W, g = star_select(w_traj, w_time, s, cfg.routing)
    elif cfg.uses_traj_gate:
        W = w_traj
    else:
        W = w_time
    decision = RouterDecision(
        None if w_traj is None else w_traj.data,
        None if w_time is None else w_time.data,
        None if s is None else s.data,
        g,
        W.data,
    )
    return W, decision


def mix_experts(W: Tensor, Y: Tensor) -> Tensor:
    """``sum_i W[..., i] * Y[i]`` for W (B, T, k) and Y (k, B, T, d)."""
    k = Y.shape[0]
    if W.shape[-1] != k or W.shape[:-1] != Y.shape[1:-1]:
        raise ShapeError(f"mix shapes: weights {W.shape}, experts {Y.shape}")
    out = W.data[..., 0, None] * Y.data[0]
    for i in range(1, k):
        out = out + W.data[..., i, None] * Y.data[i]

    def vjp(g):
        gW = np.stack([(g * Y.data[i]).sum(axis=-1) for i in range(k)], axis=-1)
        gY = np.stack([W.data[..., i, None] * g for i in range(k)])
        return gW, gY

    return core.record(out, (W, Y), vjp)


def experts_forward(h: Tensor, params, prefix: str) -> Tensor:
    """Residual two-layer GELU FFNs, one per leading slot of ``h``."""
    hidden = core.gelu(stacked_linear(h, params[f"{prefix}.expert.w1"], params[f"{prefix}.expert.b1"]))
    return core.add(h, stacked_linear(hidden, params[f"{prefix}.expert.w2"], params[f"{prefix}.expert.b2"]))


def samoe_block(h: Tensor, e_ts: Tensor, params, cfg: ModelConfig, prefix: str):
    """Experts, routing and fusion for one layer.

    ``h`` stacks the attention outputs of the computed streams: (4, B, T, d) with
    the MoE, (1, B, T, d) holding only the fused stream without it. Returns the
    next layer's stacked streams and the router decision (None without MoE).
    """
    if not cfg.uses_moe:
        return experts_forward(h, params, prefix), None
    h_traj = core.getitem(h, 3)
    W, decision = star_route(h_traj, e_ts, params, cfg, prefix)
    if cfg.uses_fused_expert:
        y = experts_forward(h, params, prefix)
        y_found = core.getitem(y, slice(0, 3))
        fused = core.add(core.getitem(y, 3), mix_experts(W, y_found))
    else:
        y_found = experts_forward(core.getitem(h, slice(0, 3)), params, prefix)
        fused = mix_experts(W, y_found)
    nxt = core.concat([y_found, core.reshape(fused, (1,) + fused.shape)], axis=0)
    return nxt, decision


# ------------------------------------------------------------------- trace


@dataclass
class LayerGates:
    w_traj: np.ndarray | None
    w_time: np.ndarray | None
    s: np.ndarray | None
    g: np.ndarray | None
    W: np.ndarray | None


@dataclass
class GateTrace:
    """Router records for every real position of every layer."""

    layers: list[LayerGates] = field(default_factory=list)
    tod: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def num_positions(self) -> int:
        return len(self.tod)

    def record_count(self) -> int:
        return sum(self.num_positions for lg in self.layers if lg.W is not None)

    @classmethod
    def from_decisions(cls, decisions, batch: PaddedBatch) -> "GateTrace":
        m = batch.padding_mask

        def pick(a):
            return None if a is None else a[m]

        layers = []
        for dec in decisions:
            if dec is None:
                layers.append(LayerGates(None, None, None, None, None))
            else:
                layers.append(LayerGates(pick(dec.w_traj), pick(dec.w_time), pick(dec.s), pick(dec.g), pick(dec.W)))
        return cls(layers, batch.tod[m])

    def extend(self, other: "GateTrace") -> "GateTrace":
        if not self.layers:
            return other
        merged = []
        for a, b in zip(self.layers, other.layers):
            vals = {}
            for f in ("w_traj", "w_time", "s", "g", "W"):
                x, y = getattr(a, f), getattr(b, f)
                vals[f] = None if x is None else np.concatenate([x, y])
            merged.append(LayerGates(**vals))
        return GateTrace(merged, np.concatenate([self.tod, other.tod]))


# ----------------------------------------------------------------- forward


def forward(params, batch: PaddedBatch, cfg: ModelConfig, embeddings: StreamEmbeddings | None = None,
            trace: bool = False):
    """Final fused representation (B, T, d) and, optionally, the gate trace."""
    emb = embeddings if embeddings is not None else features.embed_streams(batch, params)
    allow = attention_allow(batch.padding_mask)
    if cfg.uses_moe:
        x = core.stack([core.add(getattr(emb, s), emb.ts) for s in STREAMS])
        attn_streams = None
    else:
        x = core.reshape(core.add(emb.traj, emb.ts), (1,) + emb.traj.shape)
        attn_streams = slice(3, 4)
    decisions = []
    for layer in range(cfg.layers):
        prefix = f"layer{layer}"
        h = masked_attention(x, allow, _attention_params(params, prefix, attn_streams), cfg.heads, cfg.ln_eps)
        x, dec = samoe_block(h, emb.ts, params, cfg, prefix)
        decisions.append(dec)
    out = core.getitem(x, x.shape[0] - 1)
    if trace:
        return out, GateTrace.from_decisions(decisions, batch)
    return out, None
