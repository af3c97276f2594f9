"""Finite-difference verification of every analytic gradient.

Shared by the test suite and the `gradcheck` CLI subcommand. Central
differences with a configurable step; relative error per element is
|analytic - fd| / max(floor, |analytic| + |fd|).
"""

from __future__ import annotations

import numpy as np

from .geometry import FrustumSpec, VoxelCoords, VoxelGridSpec
from .heads import (
    MlpHead,
    depth_head,
    depth_head_backward,
    occupancy_head,
    occupancy_head_backward,
    temporal_fuse,
    temporal_fuse_backward,
)
from .kernel import dva_backward, dva_forward
from .trainer import (
    LinearLayer,
    TrainConfig,
    bev_loss,
    depth_loss,
    init_pipeline,
    named_params,
    sample_backward,
    sample_forward,
)

REL_FLOOR = 1e-6


def rel_err(analytic: np.ndarray, fd: np.ndarray, floor: float = REL_FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(fd, dtype=np.float64)
    denom = np.maximum(floor, np.abs(a) + np.abs(b))
    return float((np.abs(a - b) / denom).max()) if a.size else 0.0


def fd_grad(fun, arr: np.ndarray, step: float) -> np.ndarray:
    """Central-difference gradient of scalar fun() w.r.t. arr, in place."""
    out = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = fun()
        flat[i] = orig - step
        f_minus = fun()
        flat[i] = orig
        g[i] = (f_plus - f_minus) / (2.0 * step)
    return out


def random_instance(seed: int, n: int = 2, h: int = 8, w: int = 8, d: int = 4,
                    grid_counts=(16, 16, 4), l: int = 8, dtype=np.float64,
                    valid_fraction: float = 0.9):
    """Random kernel instance with synthetic voxel coords."""
    rng = np.random.default_rng(seed)
    nx, ny, nz = grid_counts
    grid = VoxelGridSpec(nx=nx, ny=ny, nz=nz,
                         min_bound=np.zeros(3), max_bound=np.array([nx, ny, nz], dtype=float))
    idx = np.stack([
        rng.integers(0, nx, size=(n, h, w, d)),
        rng.integers(0, ny, size=(n, h, w, d)),
        rng.integers(0, nz, size=(n, h, w, d)),
    ], axis=-1).astype(np.int32)
    valid = rng.random((n, h, w, d)) < valid_fraction
    cv = VoxelCoords(indices=idx, valid=valid, grid=grid)
    f = rng.standard_normal((n, h, w, l)).astype(dtype)
    depth = rng.random((n, h, w, d)).astype(dtype)
    depth /= depth.sum(axis=-1, keepdims=True)
    po = rng.random((nx, ny, nz)).astype(dtype)
    return f, depth, cv, po


def check_kernel(seed: int = 0, step: float = 1e-5, dtype=np.float64,
                 floor: float = REL_FLOOR, **sizes) -> dict:
    """dva_backward vs central differences on a random instance."""
    f, d, cv, po = random_instance(seed, dtype=dtype, **sizes)
    rng = np.random.default_rng(seed + 1)
    gq = rng.standard_normal((cv.grid.nx, cv.grid.ny, f.shape[3])).astype(dtype)

    def loss():
        q, _ = dva_forward(f, d, cv, po)
        return float(np.sum(q.astype(np.float64) * gq.astype(np.float64)))

    _, ctx = dva_forward(f, d, cv, po)
    gf, gd, gpo = dva_backward(gq, ctx)
    return {
        "kernel.gF": rel_err(gf, fd_grad(loss, f, step), floor),
        "kernel.gD": rel_err(gd, fd_grad(loss, d, step), floor),
        "kernel.gPo": rel_err(gpo, fd_grad(loss, po, step), floor),
    }


def check_depth_head(seed: int = 0, step: float = 1e-5, dtype=np.float64,
                     n: int = 1, h: int = 4, w: int = 4, l: int = 8, d: int = 4,
                     floor: float = REL_FLOOR) -> dict:
    """Cross-entropy through the depth head vs finite differences."""
    rng = np.random.default_rng(seed)
    head = MlpHead.init(rng, [l, d], dtype)
    f = rng.standard_normal((n, h, w, l)).astype(dtype)
    target = rng.integers(0, d, size=(n, h, w))
    mask = rng.random((n, h, w)) < 0.8
    mask[0, 0, 0] = True

    def loss():
        pred, _ = depth_head(f, head)
        val, _ = depth_loss(pred, target, mask)
        return val

    pred, cache = depth_head(f, head)
    _, g_logits = depth_loss(pred, target, mask)
    gf, grads = depth_head_backward(head, cache, None, g_logits_extra=g_logits)
    out = {"depth_head.gF": rel_err(gf, fd_grad(loss, f, step), floor)}
    for i, (gw, gb) in enumerate(grads):
        out[f"depth_head.{i}.weight"] = rel_err(gw, fd_grad(loss, head.layers[i].weight, step), floor)
        out[f"depth_head.{i}.bias"] = rel_err(gb, fd_grad(loss, head.layers[i].bias, step), floor)
    return out


def check_occupancy_head(seed: int = 0, step: float = 1e-5, dtype=np.float64,
                         nx: int = 4, ny: int = 4, nz: int = 3, l: int = 8,
                         squash: str = "logistic", floor: float = REL_FLOOR) -> dict:
    rng = np.random.default_rng(seed)
    head = MlpHead.init(rng, [l, l, nz], dtype)
    q = rng.standard_normal((nx, ny, l)).astype(dtype)
    gp = rng.standard_normal((nx, ny, nz))

    def loss():
        p, _ = occupancy_head(q, head, squash)
        return float(np.sum(p.astype(np.float64) * gp))

    p, cache = occupancy_head(q, head, squash)
    gq, grads = occupancy_head_backward(head, cache, gp.astype(dtype))
    out = {"occ_head.gQ": rel_err(gq, fd_grad(loss, q, step), floor)}
    for i, (gw, gb) in enumerate(grads):
        out[f"occ_head.{i}.weight"] = rel_err(gw, fd_grad(loss, head.layers[i].weight, step), floor)
        out[f"occ_head.{i}.bias"] = rel_err(gb, fd_grad(loss, head.layers[i].bias, step), floor)
    return out


def check_temporal_fuse(seed: int = 0, step: float = 1e-5, dtype=np.float64,
                        floor: float = REL_FLOOR) -> dict:
    rng = np.random.default_rng(seed)
    qc = rng.standard_normal((4, 4, 6)).astype(dtype)
    qh = rng.standard_normal((4, 4, 6)).astype(dtype)
    gate = rng.standard_normal(1).astype(dtype)
    g = rng.standard_normal((4, 4, 6))

    def loss():
        out, _ = temporal_fuse(qc, qh, gate)
        return float(np.sum(out.astype(np.float64) * g))

    out, cache = temporal_fuse(qc, qh, gate)
    gqc, gqh, ggate = temporal_fuse_backward(cache, g.astype(dtype))
    return {
        "fuse.gQ_curr": rel_err(gqc, fd_grad(loss, qc, step), floor),
        "fuse.gQ_hist": rel_err(gqh, fd_grad(loss, qh, step), floor),
        "fuse.gate": rel_err(np.array([ggate]), fd_grad(loss, gate, step), floor),
    }


def check_bev_loss(seed: int = 0, step: float = 1e-5, dtype=np.float64,
                   nx: int = 6, ny: int = 6, l: int = 8,
                   floor: float = REL_FLOOR) -> dict:
    rng = np.random.default_rng(seed)
    probe = LinearLayer.init(rng, l, l - 1, dtype)
    q = rng.standard_normal((nx, ny, l)).astype(dtype)
    y = (rng.random((nx, ny, l - 1)) < 0.4).astype(np.uint8)

    def loss():
        val, _, _ = bev_loss(q, probe, y)
        return val

    _, gq, (gw, gb) = bev_loss(q, probe, y)
    return {
        "bev_loss.gQ": rel_err(gq, fd_grad(loss, q, step), floor),
        "bev_loss.probe.weight": rel_err(gw, fd_grad(loss, probe.weight, step), floor),
        "bev_loss.probe.bias": rel_err(gb, fd_grad(loss, probe.bias, step), floor),
    }


def _tiny_prepared(seed: int, dtype, n: int = 2, h: int = 8, w: int = 8, d: int = 4,
                   grid_counts=(16, 16, 4), l: int = 8):
    """Synthetic PreparedSample for the composed-pipeline check."""
    from .trainer import PreparedSample

    rng = np.random.default_rng(seed)
    f_curr, _, cv, _ = random_instance(seed, n=n, h=h, w=w, d=d,
                                       grid_counts=grid_counts, l=l, dtype=dtype)
    f_prev, _, cv_prev, _ = random_instance(seed + 7, n=n, h=h, w=w, d=d,
                                            grid_counts=grid_counts, l=l, dtype=dtype)
    target = rng.integers(0, d, size=(n, h, w))
    mask = rng.random((n, h, w)) < 0.8
    mask[0, 0, 0] = True
    occ = (rng.random((cv.grid.nx, cv.grid.ny)) < 0.3).astype(np.uint8)
    occ3d = (rng.random((cv.grid.nx, cv.grid.ny, cv.grid.nz)) < 0.2).astype(np.uint8)
    bev_target = (rng.random((cv.grid.nx, cv.grid.ny, l - 1)) < 0.3).astype(np.uint8)
    bev_target[..., 0] = occ
    return PreparedSample(
        features_curr=f_curr, features_prev=f_prev,
        depth_target=target, depth_mask=mask, occupancy_gt=occ,
        occupancy_gt_3d=occ3d, bev_target=bev_target, cv_curr=cv, cv_prev=cv_prev,
    )


def check_pipeline(seed: int = 0, step: float = 1e-6, dtype=np.float64,
                   method: str = "dva", n_encoders: int = 1, use_history: bool = True,
                   floor: float = REL_FLOOR) -> dict:
    """Total-loss parameter gradients of the composed pipeline vs FD.

    The historical BEV input is frozen to a precomputed value so the FD
    loss surface matches the stop-gradient semantics of the analytic path.
    The step is smaller than the component suites use: with ~10k ReLU
    pre-activations in the graph, a 1e-5 step has a realistic chance of
    stepping across a kink, which corrupts the central difference.
    """
    # The occupancy supervision term is detached at the occupancy-head
    # input, so total-loss FD against trunk parameters would disagree with
    # the analytic path by construction. The composed objective is checked
    # with that term off; check_occ_supervision covers it on the parameters
    # it actually reaches.
    cfg = TrainConfig(method=method, n_encoders=n_encoders, seed=seed,
                      use_history=use_history, lambda_occ=0.0,
                      dtype="float64" if dtype == np.float64 else "float32")
    prep = _tiny_prepared(seed, dtype)
    n_bins = prep.cv_curr.valid.shape[3]
    frustum = FrustumSpec.uniform(1.0, 4.0, n_bins)
    params = init_pipeline(seed, prep.features_curr.shape[3], frustum.n_bins,
                           prep.cv_curr.grid, n_encoders, dtype=dtype)
    named = named_params(params)
    # Check at a generic point: zero biases put every empty BEV cell's ReLU
    # pre-activation exactly on the kink, where FD and the subgradient
    # convention legitimately disagree.
    jitter_rng = np.random.default_rng(seed + 1000)
    for arr in named.values():
        arr += jitter_rng.normal(0.0, 0.05, size=arr.shape).astype(arr.dtype)

    q_hist = None
    if use_history:
        from .trainer import _history_branch
        g = prep.cv_curr.grid
        po_ones = np.ones((g.nx, g.ny, g.nz), dtype=dtype)
        q_hist = _history_branch(params, prep, cfg, po_ones)

    def loss():
        parts, _ = sample_forward(params, prep, cfg, with_caches=False,
                                  q_hist_override=q_hist)
        return parts["total"]

    parts, caches = sample_forward(params, prep, cfg, q_hist_override=q_hist)
    grads = sample_backward(params, prep, cfg, caches)

    out = {}
    for name, arr in named.items():
        if method == "bev-only" and name.startswith("depth_head"):
            continue  # depth head out of the graph
        if method == "lss" and ".occ." in name:
            continue  # occupancy head bypassed
        if method == "lss" and name.startswith("enc") and not name.startswith("enc0."):
            continue  # single pass uses the first encoder only
        if not use_history and name.endswith("gate"):
            continue  # gate unused without a historical frame
        out[f"pipeline.{name}"] = rel_err(grads[name], fd_grad(loss, arr, step), floor)
    return out


def check_occ_supervision(seed: int = 0, step: float = 1e-6, dtype=np.float64,
                          n_encoders: int = 2, floor: float = REL_FLOOR) -> dict:
    """Occupancy-supervision gradients on the parameters the term reaches.

    The auxiliary occupancy loss is detached at each occupancy head's
    input, so its exact gradient support is the occupancy-head parameters.
    In a stack, an earlier head's parameters still reach a later head's
    (detached) loss through the running query, so total-loss FD agrees
    with the analytic path only for the last encoder's head; that is the
    slice checked here.
    """
    cfg = TrainConfig(method="dva", n_encoders=n_encoders, seed=seed,
                      use_history=False, lambda_occ=1.0,
                      dtype="float64" if dtype == np.float64 else "float32")
    prep = _tiny_prepared(seed, dtype)
    n_bins = prep.cv_curr.valid.shape[3]
    frustum = FrustumSpec.uniform(1.0, 4.0, n_bins)
    params = init_pipeline(seed, prep.features_curr.shape[3], frustum.n_bins,
                           prep.cv_curr.grid, n_encoders, dtype=dtype)
    named = named_params(params)
    jitter_rng = np.random.default_rng(seed + 1000)
    for arr in named.values():
        arr += jitter_rng.normal(0.0, 0.05, size=arr.shape).astype(arr.dtype)

    def loss():
        parts, _ = sample_forward(params, prep, cfg, with_caches=False)
        return parts["total"]

    _, caches = sample_forward(params, prep, cfg)
    grads = sample_backward(params, prep, cfg, caches)

    out = {}
    last = f"enc{n_encoders - 1}."
    for name, arr in named.items():
        if ".occ." not in name or not name.startswith(last):
            continue
        out[f"pipeline.occ_supervision.{name}"] = rel_err(
            grads[name], fd_grad(loss, arr, step), floor)
    return out


def run_all(seed: int = 0, step: float = 1e-5, dtype=np.float64,
            pipeline: bool = True, floor: float = REL_FLOOR) -> dict:
    """Every suite; returns name -> worst relative error.

    floor is the denominator floor of the relative error: elements where
    |analytic| + |fd| stays below it are compared absolutely against it.
    32-bit callers need a floor comparable to the finite-difference noise.
    """
    out = {}
    out.update(check_kernel(seed, step, dtype, floor))
    out.update(check_depth_head(seed, step, dtype, floor=floor))
    out.update(check_occupancy_head(seed, step, dtype, floor=floor))
    out.update(check_occupancy_head(seed, step, dtype, squash="softmax", floor=floor))
    out.update(check_temporal_fuse(seed, step, dtype, floor))
    out.update(check_bev_loss(seed, step, dtype, floor=floor))
    if pipeline:
        pstep = min(step, 1e-6) if dtype == np.float64 else step
        out.update(check_pipeline(seed, pstep, dtype, floor=floor))
        out.update(check_occ_supervision(seed, pstep, dtype, floor=floor))
    return out
