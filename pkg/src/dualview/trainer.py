"""Training and evaluation of the fixed pipeline on synthetic scenes.

Pipeline: depth head -> encoder stack (dual-view attention + temporal
fusion + FFN) -> linear occupancy probe. All gradients are analytic and
hand-derived; the optimizer is plain gradient descent with decoupled
weight decay (momentum optional).

The historical branch is computed without gradient tracking and its
fusion input is stop-gradient: the backward pass simply never propagates
into it.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .baselines import uniform_depth
from .errors import (
    DivergenceDetected,
    EmptyMask,
    IoError,
    ShapeMismatch,
    VersionMismatch,
)
from .geometry import FrustumSpec, VoxelGridSpec, build_voxel_coords
from .heads import (
    EncoderParams,
    LinearLayer,
    MlpHead,
    depth_head,
    depth_head_backward,
    encoder_stack,
    encoder_stack_backward,
    sigmoid,
)
from .synth import Scene, bin_depth, make_sample

CHECKPOINT_MAGIC = b"DVAP"
CHECKPOINT_VERSION = 1

METHODS = ("dva", "lss", "bev-only")


@dataclass
class TrainConfig:
    method: str = "dva"
    n_encoders: int = 1
    learning_rate: float = 1e-2
    weight_decay: float = 1e-4
    momentum: float = 0.0
    epochs: int = 200
    seed: int = 0
    lambda_depth: float = 1.0
    lambda_bev: float = 1.0
    lambda_occ: float = 0.03
    bev_pos_weight: float = 1.0
    occ_pos_weight: float = 10.0
    n_channels: int = 8
    hidden: int | None = None
    occupancy_squash: str = "logistic"
    use_history: bool = True
    eval_fraction: float = 0.2
    strategy: str = "deterministic"
    dtype: str = "float32"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.n_encoders < 1:
            raise ValueError("n_encoders must be >= 1")
        if self.learning_rate <= 0 or self.epochs < 1:
            raise ValueError("learning rate and epochs must be positive")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


@dataclass
class PipelineParams:
    depth_head: MlpHead        # L -> D, single layer
    q0: np.ndarray             # (nx, ny, L) learned BEV embedding
    encoders: list             # list[EncoderParams]
    probe: LinearLayer         # L -> 1 + n_class BEV target channels


def init_pipeline(seed: int, n_channels: int, n_depth_bins: int, grid: VoxelGridSpec,
                  n_encoders: int, hidden: int | None = None, dtype=np.float32) -> PipelineParams:
    rng = np.random.default_rng(seed)
    l = n_channels
    bound = 1.0 / np.sqrt(l)
    return PipelineParams(
        depth_head=MlpHead.init(rng, [l, n_depth_bins], dtype),
        q0=rng.uniform(-bound, bound, size=(grid.nx, grid.ny, l)).astype(dtype),
        encoders=[EncoderParams.init(rng, l, grid.nz, hidden, dtype) for _ in range(n_encoders)],
        probe=LinearLayer.init(rng, l, l - 1, dtype),
    )


def named_params(params: PipelineParams) -> dict:
    """Flat name -> array views; mutating the arrays mutates the pipeline."""
    out = {"q0": params.q0, "probe.weight": params.probe.weight, "probe.bias": params.probe.bias}
    for i, layer in enumerate(params.depth_head.layers):
        out[f"depth_head.{i}.weight"] = layer.weight
        out[f"depth_head.{i}.bias"] = layer.bias
    for e, enc in enumerate(params.encoders):
        for i, layer in enumerate(enc.occupancy_head.layers):
            out[f"enc{e}.occ.{i}.weight"] = layer.weight
            out[f"enc{e}.occ.{i}.bias"] = layer.bias
        for i, layer in enumerate(enc.ffn.layers):
            out[f"enc{e}.ffn.{i}.weight"] = layer.weight
            out[f"enc{e}.ffn.{i}.bias"] = layer.bias
        out[f"enc{e}.gate"] = enc.fusion_gate
    return out


def params_from_named(named: dict) -> PipelineParams:
    """Rebuild the parameter tree from a checkpoint's tensor dict."""
    def head(prefix):
        layers = []
        i = 0
        while f"{prefix}.{i}.weight" in named:
            layers.append(LinearLayer(named[f"{prefix}.{i}.weight"], named[f"{prefix}.{i}.bias"]))
            i += 1
        return MlpHead(layers)

    encoders = []
    e = 0
    while f"enc{e}.gate" in named:
        encoders.append(EncoderParams(
            occupancy_head=head(f"enc{e}.occ"),
            ffn=head(f"enc{e}.ffn"),
            fusion_gate=named[f"enc{e}.gate"],
        ))
        e += 1
    return PipelineParams(
        depth_head=head("depth_head"),
        q0=named["q0"],
        encoders=encoders,
        probe=LinearLayer(named["probe.weight"], named["probe.bias"]),
    )


# ---------------------------------------------------------------------------
# Losses

def depth_loss(d_pred: np.ndarray, depth_gt_binned: np.ndarray, mask: np.ndarray):
    """Mean cross-entropy over supervised pixels; gradient lands on logits.

    d_pred is the softmax output (N, H, W, D); the returned gradient is
    (d_pred - onehot) / M on masked pixels, which is exactly the
    cross-entropy gradient w.r.t. the pre-softmax logits.
    """
    if d_pred.shape[:3] != depth_gt_binned.shape or mask.shape != depth_gt_binned.shape:
        raise ShapeMismatch("depth prediction, targets, and mask shapes disagree")
    m = int(mask.sum())
    if m == 0:
        raise EmptyMask("no pixel with finite depth to supervise")
    picked = np.take_along_axis(d_pred, depth_gt_binned[..., None], axis=-1)[..., 0]
    loss = float(-np.log(np.maximum(picked[mask], 1e-30)).mean())
    onehot = np.zeros_like(d_pred)
    np.put_along_axis(onehot, depth_gt_binned[..., None], 1.0, axis=-1)
    g_logits = np.where(mask[..., None], (d_pred - onehot) / m, 0.0).astype(d_pred.dtype)
    return loss, g_logits


def bev_loss(q: np.ndarray, probe: LinearLayer, bev_target: np.ndarray,
             pos_weight: float = 1.0):
    """Mean binary cross-entropy of the linear probe against the BEV target.

    The target stacks the footprint-occupancy mask (channel 0) with the
    per-class footprint masks, so the loss is sensitive to the *content*
    scattered into each cell, not just the amount. pos_weight scales the
    positive-cell terms: occupied cells are a small fraction of the grid
    and would otherwise be dominated by background calibration. Returns
    (loss, gQ, (gW, gb)).
    """
    nx, ny, l = q.shape
    c = probe.weight.shape[0]
    if bev_target.shape != (nx, ny, c):
        raise ShapeMismatch(
            f"BEV target {bev_target.shape} does not match expected {(nx, ny, c)}")
    if probe.weight.shape[1] != l:
        raise ShapeMismatch(f"probe must map {l} channels, got {probe.weight.shape}")
    z = (q.reshape(-1, l) @ probe.weight.T + probe.bias).reshape(nx, ny, c)
    y = bev_target.astype(z.dtype)
    w = 1.0 + (pos_weight - 1.0) * y
    # numerically stable BCE-with-logits
    loss = float(np.mean(w * (np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z))))))
    p = sigmoid(z)
    gz = w * (p - y) / (nx * ny * c)
    gq = (gz.reshape(-1, c) @ probe.weight).reshape(nx, ny, l).astype(q.dtype)
    gw = (gz.reshape(-1, c).T @ q.reshape(-1, l)).astype(probe.weight.dtype)
    gb = gz.sum(axis=(0, 1)).astype(probe.bias.dtype)
    return loss, gq, (gw, gb)


def probe_logits(q: np.ndarray, probe: LinearLayer) -> np.ndarray:
    """Footprint-occupancy logits (target channel 0)."""
    nx, ny, l = q.shape
    return (q.reshape(-1, l) @ probe.weight[0] + probe.bias[0]).reshape(nx, ny)


# ---------------------------------------------------------------------------
# Per-sample forward/backward

@dataclass
class PreparedSample:
    features_curr: np.ndarray
    features_prev: np.ndarray
    depth_target: np.ndarray   # (N, H, W) int64 nearest-bin index
    depth_mask: np.ndarray     # (N, H, W) bool
    occupancy_gt: np.ndarray   # (nx, ny) uint8
    occupancy_gt_3d: np.ndarray  # (nx, ny, nz) uint8
    bev_target: np.ndarray     # (nx, ny, 1 + n_class) uint8
    cv_curr: object            # VoxelCoords
    cv_prev: object


def prepare_scene(scene: Scene, grid: VoxelGridSpec, frustum: FrustumSpec,
                  n_channels: int, cv_curr=None, dtype=np.float32) -> PreparedSample:
    sample = make_sample(scene, grid, n_channels)
    if cv_curr is None:
        cv_curr = build_voxel_coords(scene.rig, frustum, grid)
    cv_prev = build_voxel_coords(scene.rig, frustum, grid,
                                 ego_pose_prev=scene.ego_pose_prev,
                                 ego_pose_curr=scene.ego_pose_curr)
    target, mask = bin_depth(sample.depth_gt_curr, frustum)
    return PreparedSample(
        features_curr=sample.features_curr.astype(dtype),
        features_prev=sample.features_prev.astype(dtype),
        depth_target=target,
        depth_mask=mask,
        occupancy_gt=sample.bev_occupancy_gt,
        occupancy_gt_3d=sample.voxel_occupancy_gt,
        bev_target=np.concatenate(
            [sample.bev_occupancy_gt[..., None], sample.bev_class_gt], axis=-1),
        cv_curr=cv_curr,
        cv_prev=cv_prev,
    )


def _history_branch(params: PipelineParams, prep: PreparedSample, cfg: TrainConfig, po_ones):
    """Historical BEV feature; no gradients flow back through it."""
    d_prev, _ = depth_head(prep.features_prev, params.depth_head)
    if cfg.method == "bev-only":
        d_prev = uniform_depth(prep.features_prev.shape[:3], d_prev.shape[3],
                               dtype=prep.features_prev.dtype)
    q_hist, _ = encoder_stack(
        params.q0, None, prep.features_prev, d_prev, prep.cv_prev,
        params.encoders if cfg.method != "lss" else params.encoders[:1],
        squash=cfg.occupancy_squash, strategy=cfg.strategy,
        po_override=po_ones if cfg.method == "lss" else None,
    )
    return q_hist


def sample_forward(params: PipelineParams, prep: PreparedSample, cfg: TrainConfig,
                   with_caches: bool = True, q_hist_override=None):
    """Forward pass for one sample; returns losses and the caches needed
    by sample_backward.

    q_hist_override substitutes a precomputed historical BEV feature (the
    gradient-check suites freeze it; the branch is stop-gradient anyway).
    """
    g = prep.cv_curr.grid
    po_ones = np.ones((g.nx, g.ny, g.nz), dtype=prep.features_curr.dtype)

    d_curr, dcache = depth_head(prep.features_curr, params.depth_head)
    n_bins = d_curr.shape[3]
    if cfg.method == "bev-only":
        d_used = uniform_depth(prep.features_curr.shape[:3], n_bins,
                               dtype=prep.features_curr.dtype)
    else:
        d_used = d_curr

    if q_hist_override is not None:
        q_hist = q_hist_override
    else:
        q_hist = _history_branch(params, prep, cfg, po_ones) if cfg.use_history else None

    enc_params = params.encoders if cfg.method != "lss" else params.encoders[:1]
    q_final, enc_caches = encoder_stack(
        params.q0, q_hist, prep.features_curr, d_used, prep.cv_curr, enc_params,
        squash=cfg.occupancy_squash, strategy=cfg.strategy,
        po_override=po_ones if cfg.method == "lss" else None,
    )

    loss_bev, g_q_final, probe_grads = bev_loss(
        q_final, params.probe, prep.bev_target, pos_weight=cfg.bev_pos_weight)
    if cfg.method == "bev-only":
        loss_depth, g_logits_ce = 0.0, None
    else:
        loss_depth, g_logits_ce = depth_loss(d_curr, prep.depth_target, prep.depth_mask)

    loss_occ = 0.0
    if _occ_supervised(cfg):
        gt3d = prep.occupancy_gt_3d.reshape(-1, g.nz).astype(np.float64)
        w3d = 1.0 + (cfg.occ_pos_weight - 1.0) * gt3d
        per_enc = []
        for cache in enc_caches:
            z = cache["occ"]["acts"][-1].astype(np.float64)
            # numerically stable BCE with logits against {0,1} targets;
            # occupied voxels are rare and carry the recall signal, so
            # they are upweighted like the BEV positives are
            per_enc.append(float(np.mean(
                w3d * (np.maximum(z, 0.0) - z * gt3d + np.log1p(np.exp(-np.abs(z)))))))
        loss_occ = float(np.mean(per_enc))

    total = (cfg.lambda_bev * loss_bev + cfg.lambda_depth * loss_depth
             + cfg.lambda_occ * loss_occ)
    caches = None
    if with_caches:
        caches = {
            "dcache": dcache, "enc_caches": enc_caches, "enc_params": enc_params,
            "g_q_final": g_q_final, "probe_grads": probe_grads,
            "g_logits_ce": g_logits_ce, "q_final": q_final, "q_hist": q_hist,
        }
    return {"total": total, "bev": loss_bev, "depth": loss_depth,
            "occ": loss_occ, "q_final": q_final}, caches


def _occ_supervised(cfg: TrainConfig) -> bool:
    """Occupancy supervision applies when the head is in the graph and the
    squash is per-voxel (the normalized squash has no per-voxel target)."""
    return (cfg.lambda_occ > 0 and cfg.method != "lss"
            and cfg.occupancy_squash == "logistic")


def sample_backward(params: PipelineParams, prep: PreparedSample, cfg: TrainConfig,
                    caches: dict) -> dict:
    """Analytic gradients of the total loss for one sample, keyed like
    named_params."""
    grads = {name: np.zeros_like(arr) for name, arr in named_params(params).items()}

    gw, gb = caches["probe_grads"]
    grads["probe.weight"] += cfg.lambda_bev * gw
    grads["probe.bias"] += cfg.lambda_bev * gb

    g_occ_extras = None
    if _occ_supervised(cfg):
        n_enc = len(caches["enc_caches"])
        gt3d = prep.occupancy_gt_3d
        gt_flat = gt3d.reshape(-1, gt3d.shape[-1])
        w_flat = 1.0 + (cfg.occ_pos_weight - 1.0) * gt_flat
        g_occ_extras = []
        for cache in caches["enc_caches"]:
            p = cache["occ"]["out"]
            scale = cfg.lambda_occ / (p.size * n_enc)
            g_occ_extras.append((w_flat * (p - gt_flat) * scale).astype(p.dtype))

    g_q = (cfg.lambda_bev * caches["g_q_final"]).astype(caches["q_final"].dtype)
    g_q0, _gf, g_d, enc_grads = encoder_stack_backward(
        caches["enc_params"], caches["enc_caches"], g_q,
        g_occ_logits_extras=g_occ_extras)
    grads["q0"] += g_q0

    for e, eg in enumerate(enc_grads):
        if eg["occ"] is not None:
            for i, (gwl, gbl) in enumerate(eg["occ"]):
                grads[f"enc{e}.occ.{i}.weight"] += gwl
                grads[f"enc{e}.occ.{i}.bias"] += gbl
        for i, (gwl, gbl) in enumerate(eg["ffn"]):
            grads[f"enc{e}.ffn.{i}.weight"] += gwl
            grads[f"enc{e}.ffn.{i}.bias"] += gbl
        grads[f"enc{e}.gate"] += np.asarray([eg["gate"]], dtype=grads[f"enc{e}.gate"].dtype)

    g_logits_ce = caches["g_logits_ce"]
    if g_logits_ce is not None:
        g_logits_ce = cfg.lambda_depth * g_logits_ce
    g_d_soft = None if cfg.method == "bev-only" else g_d
    if g_d_soft is not None or g_logits_ce is not None:
        _gf2, dh_grads = depth_head_backward(
            params.depth_head, caches["dcache"], g_d_soft, g_logits_extra=g_logits_ce)
        for i, (gwl, gbl) in enumerate(dh_grads):
            grads[f"depth_head.{i}.weight"] += gwl
            grads[f"depth_head.{i}.bias"] += gbl
    return grads


# ---------------------------------------------------------------------------
# Training loop

@dataclass
class TrainReport:
    config: dict
    epochs: list = field(default_factory=list)  # per-epoch dicts

    @property
    def final_eval_loss(self) -> float:
        return self.epochs[-1]["eval_loss"]

    @property
    def final_eval_iou(self) -> float:
        return self.epochs[-1]["eval_iou"]

    def to_json(self) -> str:
        return json.dumps({"config": self.config, "epochs": self.epochs},
                          sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TrainReport":
        doc = json.loads(text)
        return cls(config=doc["config"], epochs=doc["epochs"])


def evaluate(params: PipelineParams, cfg: TrainConfig, preps: list) -> tuple:
    """Mean BEV loss and IoU at threshold 0.5 over all cells of all samples."""
    if not preps:
        raise ValueError("empty evaluation set")
    losses = []
    inter = 0
    union = 0
    for prep in preps:
        parts, _ = sample_forward(params, prep, cfg, with_caches=False)
        losses.append(parts["bev"])
        pred = sigmoid(probe_logits(parts["q_final"], params.probe)) >= 0.5
        gt = prep.occupancy_gt.astype(bool)
        inter += int(np.sum(pred & gt))
        union += int(np.sum(pred | gt))
    iou = inter / union if union > 0 else 1.0
    return float(np.mean(losses)), float(iou)


def train(cfg: TrainConfig, scenes: list, grid: VoxelGridSpec, frustum: FrustumSpec,
          preps: list | None = None):
    """Full-batch gradient descent; returns (params, TrainReport).

    Deterministic for a fixed config and seed in deterministic kernel mode.
    """
    if not scenes and not preps:
        raise ValueError("dataset is empty")
    dtype = TrainConfig.np_dtype.fget(cfg)
    if preps is None:
        cv_curr = build_voxel_coords(scenes[0].rig, frustum, grid)
        preps = [prepare_scene(s, grid, frustum, cfg.n_channels, cv_curr, dtype) for s in scenes]
    n_eval = max(1, int(round(len(preps) * cfg.eval_fraction))) if len(preps) > 1 else 0
    train_set = preps[:len(preps) - n_eval] if n_eval else preps
    eval_set = preps[len(preps) - n_eval:] if n_eval else preps

    params = init_pipeline(cfg.seed, cfg.n_channels, frustum.n_bins, grid,
                           cfg.n_encoders, cfg.hidden, dtype)
    named = named_params(params)
    velocity = {k: np.zeros_like(v) for k, v in named.items()} if cfg.momentum > 0 else None

    report = TrainReport(config=cfg.to_dict())
    for epoch in range(cfg.epochs):
        total = {k: np.zeros_like(v, dtype=np.float64) for k, v in named.items()}
        loss_sum = 0.0
        for prep in train_set:
            parts, caches = sample_forward(params, prep, cfg)
            grads = sample_backward(params, prep, cfg, caches)
            loss_sum += parts["total"]
            for k in total:
                total[k] += grads[k]
        n = len(train_set)
        train_loss = loss_sum / n
        if not np.isfinite(train_loss):
            raise DivergenceDetected(f"loss became {train_loss} at epoch {epoch}")
        for k, p in named.items():
            g = (total[k] / n).astype(p.dtype)
            if velocity is not None:
                velocity[k] = cfg.momentum * velocity[k] + g
                g = velocity[k]
            p -= cfg.learning_rate * g
            if cfg.weight_decay > 0:
                p -= (cfg.learning_rate * cfg.weight_decay) * p
        eval_loss, eval_iou = evaluate(params, cfg, eval_set)
        report.epochs.append({
            "epoch": epoch,
            "train_loss": float(train_loss),
            "eval_loss": eval_loss,
            "eval_iou": eval_iou,
        })
    return params, report


# ---------------------------------------------------------------------------
# Checkpoints: named float32 tensors, bit-exact round-trip.

def save_checkpoint(path, params: PipelineParams) -> None:
    named = named_params(params)
    try:
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<II", CHECKPOINT_VERSION, len(named)))
            for name in sorted(named):
                arr = np.ascontiguousarray(named[name], dtype="<f4")
                raw = name.encode("utf-8")
                f.write(struct.pack("<I", len(raw)))
                f.write(raw)
                f.write(struct.pack("<I", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                f.write(arr.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> PipelineParams:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:4] != CHECKPOINT_MAGIC:
        raise IoError("bad magic in checkpoint file")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"unsupported checkpoint version {version}")
    off = 12
    named = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        n_items = int(np.prod(shape)) if ndim else 1
        named[name] = np.frombuffer(blob, dtype="<f4", count=n_items, offset=off).reshape(shape).copy()
        off += 4 * n_items
    return params_from_named(named)
