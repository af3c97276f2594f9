"""Learnable components around the kernel, with manual analytic gradients.

Depth head (per-pixel softmax over depth bins), occupancy head (per-cell
MLP squashed into [0, 1]), FFN with residual, a learned convex temporal
fusion gate, and the iterative encoder stack. Every forward returns a
cache consumed by the matching backward; parameter gradients come back as
(gW, gb) lists mirroring the layer lists.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch
from .kernel import dva_backward, dva_forward

RELU_SLOPE_AT_ZERO = 0.0  # subgradient convention


@dataclass
class LinearLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int, dtype=np.float32) -> "LinearLayer":
        bound = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-bound, bound, size=(n_out, n_in)).astype(dtype)
        b = np.zeros(n_out, dtype=dtype)
        return cls(weight=w, bias=b)


@dataclass
class MlpHead:
    """Stack of linear layers with ReLU between (not after) them."""

    layers: list

    @classmethod
    def init(cls, rng: np.random.Generator, dims: list, dtype=np.float32) -> "MlpHead":
        layers = [LinearLayer.init(rng, dims[i], dims[i + 1], dtype) for i in range(len(dims) - 1)]
        return cls(layers=layers)


def mlp_forward(head: MlpHead, x: np.ndarray):
    """x: (M, in) -> (y: (M, out), cache)."""
    acts = [x]
    h = x
    for i, layer in enumerate(head.layers):
        z = h @ layer.weight.T + layer.bias
        if i < len(head.layers) - 1:
            h = np.maximum(z, 0)
        else:
            h = z
        acts.append(h)
    return h, acts


def mlp_backward(head: MlpHead, acts: list, gy: np.ndarray):
    """Returns (gx, [(gW, gb) per layer])."""
    grads = [None] * len(head.layers)
    g = gy
    for i in range(len(head.layers) - 1, -1, -1):
        layer = head.layers[i]
        h_in = acts[i]
        if i < len(head.layers) - 1:
            g = g * (acts[i + 1] > 0)
        grads[i] = (g.T @ h_in, g.sum(axis=0))
        g = g @ layer.weight
    return g, grads


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_vjp(y: np.ndarray, gy: np.ndarray, axis: int = -1) -> np.ndarray:
    """Gradient w.r.t. logits given softmax output y and upstream gy."""
    dot = (gy * y).sum(axis=axis, keepdims=True)
    return y * (gy - dot)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z)))


def depth_head(f: np.ndarray, params: MlpHead):
    """Per-pixel depth distribution over D bins.

    f: (N, H, W, L) -> (D_pred (N, H, W, D), cache). Rows sum to 1.
    """
    n, h, w, l = f.shape
    if params.layers[0].weight.shape[1] != l:
        raise ShapeMismatch(f"depth head expects {params.layers[0].weight.shape[1]} channels, got {l}")
    x = f.reshape(n * h * w, l)
    logits, acts = mlp_forward(params, x)
    d = softmax(logits, axis=1)
    cache = {"acts": acts, "softmax": d, "shape": f.shape}
    return d.reshape(n, h, w, -1), cache


def depth_head_backward(params: MlpHead, cache: dict, g_dpred: np.ndarray, g_logits_extra=None):
    """Backward through softmax and the head.

    g_dpred is the gradient w.r.t. the softmax output (may be None);
    g_logits_extra is an optional gradient landing directly on the logits
    (the cross-entropy term). Returns (gF, param grads).
    """
    d = cache["softmax"]
    n, h, w, l = cache["shape"]
    g_logits = np.zeros_like(d)
    if g_dpred is not None:
        g_logits += softmax_vjp(d, g_dpred.reshape(d.shape), axis=1)
    if g_logits_extra is not None:
        g_logits += g_logits_extra.reshape(d.shape)
    gx, grads = mlp_backward(params, cache["acts"], g_logits)
    return gx.reshape(n, h, w, l), grads


def occupancy_head(q: np.ndarray, params: MlpHead, squash: str = "logistic"):
    """Per-BEV-cell occupancy confidence over the Z height slots.

    q: (nx, ny, L) -> (P_o (nx, ny, Z), cache). "logistic" squashes each
    slot independently; "softmax" normalizes across the height slots.
    """
    nx, ny, l = q.shape
    x = q.reshape(nx * ny, l)
    z, acts = mlp_forward(params, x)
    if squash == "logistic":
        p = sigmoid(z)
    elif squash == "softmax":
        p = softmax(z, axis=1)
    else:
        raise ValueError(f"unknown squash {squash!r}")
    cache = {"acts": acts, "out": p, "squash": squash, "shape": q.shape}
    return p.reshape(nx, ny, -1), cache


def occupancy_head_backward(params: MlpHead, cache: dict, g_po: np.ndarray,
                            g_logits_extra=None):
    """Returns (gQ, param grads).

    g_logits_extra is an additional cotangent applied directly at the
    pre-squash logits (used by the auxiliary occupancy supervision term).
    It is treated as detached at the head input: it contributes to this
    head's parameter gradients but not to gQ, so the auxiliary signal
    trains the head without perturbing the shared trunk.
    """
    p = cache["out"]
    g = g_po.reshape(p.shape)
    if cache["squash"] == "logistic":
        g_logits = g * p * (1.0 - p)
    else:
        g_logits = softmax_vjp(p, g, axis=1)
    gx, grads = mlp_backward(params, cache["acts"], g_logits)
    if g_logits_extra is not None:
        _, extra = mlp_backward(params, cache["acts"],
                                g_logits_extra.reshape(g_logits.shape))
        grads = [(gw + ew, gb + eb)
                 for (gw, gb), (ew, eb) in zip(grads, extra)]
    nx, ny, l = cache["shape"]
    return gx.reshape(nx, ny, l), grads


def temporal_fuse(q_curr: np.ndarray, q_hist: np.ndarray, gate):
    """Learned convex blend: sigma(gate) * Q_curr + (1 - sigma(gate)) * Q_hist."""
    if q_curr.shape != q_hist.shape:
        raise ShapeMismatch(f"fusion shapes differ: {q_curr.shape} vs {q_hist.shape}")
    s = float(sigmoid(np.asarray(gate).reshape(())))
    out = s * q_curr + (1.0 - s) * q_hist
    cache = {"s": s, "q_curr": q_curr, "q_hist": q_hist}
    return out, cache


def temporal_fuse_backward(cache: dict, g_out: np.ndarray):
    """Returns (gQ_curr, gQ_hist, g_gate)."""
    s = cache["s"]
    g_gate = s * (1.0 - s) * float(np.sum(g_out * (cache["q_curr"] - cache["q_hist"])))
    return s * g_out, (1.0 - s) * g_out, g_gate


@dataclass
class EncoderParams:
    occupancy_head: MlpHead   # L -> ... -> Z
    ffn: MlpHead              # L -> ... -> L, applied residually
    fusion_gate: np.ndarray   # shape (1,)

    @classmethod
    def init(cls, rng: np.random.Generator, l: int, nz: int, hidden: int | None = None,
             dtype=np.float32) -> "EncoderParams":
        hidden = hidden if hidden is not None else l
        occupancy_head = MlpHead.init(rng, [l, hidden, nz], dtype)
        # Start with the gate nearly open (sigmoid(4) ~ 0.98) so early
        # training matches ungated lifting; the head learns to close gates
        # only where suppression pays off. The shift is softmax-invariant.
        occupancy_head.layers[-1].bias += 4.0
        return cls(
            occupancy_head=occupancy_head,
            ffn=MlpHead.init(rng, [l, hidden, l], dtype),
            fusion_gate=np.zeros(1, dtype=dtype),
        )


def encoder_step(q, q_hist, f, d, cv, params: EncoderParams, squash: str = "logistic",
                 strategy: str = "deterministic", po_override=None):
    """One encoder: dual-view attention, temporal fusion, residual FFN.

    po_override, when given, replaces the occupancy head's output (the
    baselines use a constant); gradients then skip the head.
    """
    if po_override is None:
        po, occ_cache = occupancy_head(q, params.occupancy_head, squash)
    else:
        po, occ_cache = po_override, None
    q1, kctx = dva_forward(f, d, cv, po, strategy=strategy)
    if q_hist is not None:
        q2, fuse_cache = temporal_fuse(q1, q_hist, params.fusion_gate)
    else:
        q2, fuse_cache = q1, None
    nx, ny, l = q2.shape
    y, ffn_acts = mlp_forward(params.ffn, q2.reshape(nx * ny, l))
    q_out = q2 + y.reshape(nx, ny, l)
    cache = {"occ": occ_cache, "kctx": kctx, "fuse": fuse_cache, "ffn_acts": ffn_acts,
             "shape": q2.shape}
    return q_out, cache


def encoder_step_backward(params: EncoderParams, cache: dict, g_out: np.ndarray,
                          g_occ_logits_extra=None):
    """Returns (gQ_in, gF, gD, grads dict with occ/ffn/gate entries).

    gQ_in is None when the occupancy head was overridden.
    g_occ_logits_extra feeds an extra cotangent into the occupancy head's
    pre-squash logits (the occupancy supervision loss).
    """
    nx, ny, l = cache["shape"]
    gx, ffn_grads = mlp_backward(params.ffn, cache["ffn_acts"], g_out.reshape(nx * ny, l))
    g_q2 = g_out + gx.reshape(nx, ny, l)
    if cache["fuse"] is not None:
        g_q1, _g_hist, g_gate = temporal_fuse_backward(cache["fuse"], g_q2)
    else:
        g_q1, g_gate = g_q2, 0.0
    gf, gd, g_po = dva_backward(g_q1, cache["kctx"])
    if cache["occ"] is not None:
        g_q_in, occ_grads = occupancy_head_backward(
            params.occupancy_head, cache["occ"], g_po,
            g_logits_extra=g_occ_logits_extra)
    else:
        g_q_in, occ_grads = None, None
    return g_q_in, gf, gd, {"occ": occ_grads, "ffn": ffn_grads, "gate": g_gate, "g_po": g_po}


def encoder_stack(q0, q_hist, f, d, cv, params_list, squash: str = "logistic",
                  strategy: str = "deterministic", po_override=None):
    """Iterated encoder steps; the same historical feature feeds each one.

    The historical feature also seeds the running query (q0 + q_hist) so
    the first occupancy prediction is scene-dependent rather than a
    function of the learned initial query alone. The seed addition is an
    identity for gradients w.r.t. q0; the historical branch carries no
    gradient by design.
    """
    if len(params_list) < 1:
        raise ValueError("need at least one encoder")
    q = q0 if q_hist is None else q0 + q_hist
    caches = []
    for params in params_list:
        q, cache = encoder_step(q, q_hist, f, d, cv, params, squash=squash,
                                strategy=strategy, po_override=po_override)
        caches.append(cache)
    return q, caches


def encoder_stack_backward(params_list, caches, g_out, g_occ_logits_extras=None):
    """Backward through the whole stack.

    Returns (gQ0, gF, gD, per-encoder grads list). gF/gD accumulate over
    encoders since every step reads the same inputs. g_occ_logits_extras
    is an optional per-encoder list of extra occupancy-logit cotangents.
    """
    g_q = g_out
    gf_total = None
    gd_total = None
    enc_grads = [None] * len(params_list)
    for i in range(len(params_list) - 1, -1, -1):
        extra = g_occ_logits_extras[i] if g_occ_logits_extras is not None else None
        g_q_in, gf, gd, grads = encoder_step_backward(params_list[i], caches[i], g_q,
                                                      g_occ_logits_extra=extra)
        enc_grads[i] = grads
        gf_total = gf if gf_total is None else gf_total + gf
        gd_total = gd if gd_total is None else gd_total + gd
        if g_q_in is None:
            g_q = np.zeros_like(g_q)
        else:
            g_q = g_q_in
    return g_q, gf_total, gd_total, enc_grads
