"""Dual-view attention kernel: depth-adjusted scatter-add, occupancy-weighted
splat, and the analytic backward pass.

Two backends implement the same semantics: a numba @njit path (default when
numba imports) and a pure-numpy fallback. Selection: DVA_BACKEND env var
("numba", "numpy", or "auto"), overridable at runtime with set_backend().

Two reduction strategies:
  * "deterministic" — per-voxel contributions summed sequentially in
    canonical (n, h, w, d) ray order; bitwise independent of thread count
    and bitwise equal to the naive oracle.
  * "relaxed" — per-chunk partial grids merged at the end, the CPU
    analogue of atomic adds; agrees with deterministic within float
    rounding.

Storage is the caller's dtype (float32 in training); accumulation is
always float64.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from ._plan import ScatterPlan, build_plan
from .errors import ContextMismatch, ShapeMismatch
from .geometry import VoxelCoords

_VALID_BACKENDS = ("numba", "numpy")
_backend: str | None = None


def _resolve_backend() -> str:
    env = os.environ.get("DVA_BACKEND", "auto").lower()
    if env == "numpy":
        return "numpy"
    if env == "numba":
        return "numba"
    if env != "auto":
        raise ValueError(f"DVA_BACKEND must be auto, numba, or numpy, got {env!r}")
    try:
        import numba  # noqa: F401
        return "numba"
    except ImportError:
        return "numpy"


def get_backend() -> str:
    global _backend
    if _backend is None:
        _backend = _resolve_backend()
    return _backend


def set_backend(name: str) -> None:
    if name not in _VALID_BACKENDS:
        raise ValueError(f"backend must be one of {_VALID_BACKENDS}, got {name!r}")
    global _backend
    _backend = name


def get_num_threads() -> int:
    env = int(os.environ.get("DVA_THREADS", "0"))
    if env > 0:
        return env
    if get_backend() == "numba":
        import numba
        return numba.get_num_threads()
    return 1


def set_num_threads(n: int) -> None:
    """Request a worker count; clamped to what the machine exposes."""
    n = max(1, n)
    if get_backend() == "numba":
        import numba
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    os.environ["DVA_THREADS"] = str(n)


@dataclass(frozen=True, eq=False)
class KernelContext:
    """Saved state between dva_forward and dva_backward."""

    f: np.ndarray
    d: np.ndarray
    cv: VoxelCoords
    po: np.ndarray
    w_fd: np.ndarray       # accumulated voxel feature, pre-occupancy
    plan: ScatterPlan
    strategy: str


def _check_shapes(f, d, cv, po=None):
    if f.ndim != 4:
        raise ShapeMismatch(f"feature map must be N x H x W x L, got {f.shape}")
    if d.ndim != 4:
        raise ShapeMismatch(f"depth map must be N x H x W x D, got {d.shape}")
    if f.shape[:3] != d.shape[:3]:
        raise ShapeMismatch(f"feature/depth pixel grids differ: {f.shape[:3]} vs {d.shape[:3]}")
    if cv.valid.shape != d.shape:
        raise ShapeMismatch(f"voxel coords {cv.valid.shape} do not match depth map {d.shape}")
    g = cv.grid
    if po is not None and po.shape != (g.nx, g.ny, g.nz):
        raise ShapeMismatch(f"occupancy confidence {po.shape} does not match grid {(g.nx, g.ny, g.nz)}")


def _flat_inputs(f, d):
    n, h, w, l = f.shape
    return (
        np.ascontiguousarray(f.reshape(n * h * w, l)),
        np.ascontiguousarray(d.reshape(n * h * w, d.shape[3])),
    )


def accumulate_voxels(f, d, cv: VoxelCoords, strategy: str = "deterministic", n_chunks: int | None = None):
    """Scatter-multiply-add every valid ray's feature into its target voxel.

    Returns the voxel feature (nx, ny, nz, L) in the feature dtype.
    """
    f = np.asarray(f)
    d = np.asarray(d)
    _check_shapes(f, d, cv)
    plan = build_plan(cv)
    f2d, d2d = _flat_inputs(f, d)
    g = cv.grid
    l = f.shape[3]

    if strategy not in ("deterministic", "relaxed"):
        raise ValueError(f"unknown reduction strategy {strategy!r}")
    chunks = 1
    if strategy == "relaxed":
        chunks = n_chunks if n_chunks is not None else max(1, get_num_threads())

    if get_backend() == "numba":
        from . import _kernels_numba as nbk
        dvals = d2d[plan.pix, plan.dbin].astype(np.float64)
        if strategy == "deterministic":
            w64 = nbk.accumulate_deterministic(
                f2d, dvals, plan.pix, plan.order, plan.seg_starts, plan.seg_vox, plan.n_voxels
            )
        else:
            w64 = nbk.accumulate_relaxed(f2d, dvals, plan.pix, plan.vox, plan.n_voxels, chunks)
    else:
        from . import _kernels_numpy as npk
        if strategy == "deterministic":
            w64 = npk.accumulate_deterministic(f2d, d2d, plan)
        else:
            w64 = npk.accumulate_relaxed(f2d, d2d, plan, chunks)

    return w64.reshape(g.nx, g.ny, g.nz, l).astype(f.dtype)


def splat(w_fd, po):
    """Occupancy-weighted height sum: Q[i,j,:] = sum_k P_o[i,j,k] W[i,j,k,:]."""
    w_fd = np.asarray(w_fd)
    po = np.asarray(po)
    if w_fd.ndim != 4:
        raise ShapeMismatch(f"voxel feature must be nx x ny x nz x L, got {w_fd.shape}")
    if po.shape != w_fd.shape[:3]:
        raise ShapeMismatch(f"occupancy {po.shape} does not match voxel feature {w_fd.shape[:3]}")
    nx, ny, nz, l = w_fd.shape
    if get_backend() == "numba":
        from . import _kernels_numba as nbk
        q64 = nbk.splat(
            np.ascontiguousarray(w_fd.reshape(nx * ny, nz, l)),
            np.ascontiguousarray(po.reshape(nx * ny, nz)),
            nx * ny, nz,
        ).reshape(nx, ny, l)
    else:
        from . import _kernels_numpy as npk
        q64 = npk.splat(w_fd, po)
    return q64.astype(w_fd.dtype)


def dva_forward(f, d, cv: VoxelCoords, po, strategy: str = "deterministic"):
    """Dual-view attention forward pass.

    Factored form of the per-ray update: accumulate depth-weighted features
    into voxels, then apply occupancy at splat time. Returns the updated
    BEV feature and the context for the backward pass.
    """
    f = np.asarray(f)
    d = np.asarray(d)
    po = np.asarray(po)
    _check_shapes(f, d, cv, po)
    w_fd = accumulate_voxels(f, d, cv, strategy=strategy)
    q = splat(w_fd, po)
    ctx = KernelContext(f=f, d=d, cv=cv, po=po, w_fd=w_fd, plan=build_plan(cv), strategy=strategy)
    return q, ctx


def dva_backward(gq, ctx: KernelContext):
    """Analytic gradients of dva_forward w.r.t. features, depth, occupancy."""
    gq = np.asarray(gq)
    g = ctx.cv.grid
    if gq.shape != (g.nx, g.ny, ctx.f.shape[3]):
        raise ContextMismatch(
            f"BEV gradient shape {gq.shape} does not match context {(g.nx, g.ny, ctx.f.shape[3])}"
        )
    plan = ctx.plan
    f2d, d2d = _flat_inputs(ctx.f, ctx.d)
    l = ctx.f.shape[3]
    gq_xy = np.ascontiguousarray(gq.reshape(g.nx * g.ny, l))
    po_flat = np.ascontiguousarray(ctx.po.reshape(-1))

    if get_backend() == "numba":
        from . import _kernels_numba as nbk
        gf64, gd64 = nbk.backward_features_depth(
            f2d, d2d, po_flat, gq_xy, plan.vox_pd, plan.valid_pd, plan.nz
        )
        gpo64 = nbk.backward_occupancy(
            np.ascontiguousarray(ctx.w_fd.reshape(plan.n_voxels, l)), gq_xy, plan.nz
        ).reshape(g.nx, g.ny, g.nz)
    else:
        from . import _kernels_numpy as npk
        gf64, gd64 = npk.backward_features_depth(f2d, d2d, po_flat, gq_xy, plan)
        gpo64 = npk.backward_occupancy(ctx.w_fd, gq)

    gf = gf64.reshape(ctx.f.shape).astype(ctx.f.dtype)
    gd = gd64.reshape(ctx.d.shape).astype(ctx.d.dtype)
    gpo = gpo64.astype(ctx.po.dtype)
    return gf, gd, gpo


def dva_forward_naive(f, d, cv: VoxelCoords, po):
    """Sequential reference in fixed (n, h, w, d) ray order.

    Defines the canonical summation order; float64 accumulation with the
    voxel feature rounded to storage dtype before the splat, exactly like
    the production path.
    """
    f = np.asarray(f)
    d = np.asarray(d)
    po = np.asarray(po)
    _check_shapes(f, d, cv, po)
    n, h, w, l = f.shape
    dd = d.shape[3]
    g = cv.grid
    w64 = np.zeros((g.nx, g.ny, g.nz, l), dtype=np.float64)
    f64 = f.astype(np.float64)
    d64 = d.astype(np.float64)
    for ni in range(n):
        for hi in range(h):
            for wi in range(w):
                for di in range(dd):
                    if cv.valid[ni, hi, wi, di]:
                        x, y, z = cv.indices[ni, hi, wi, di]
                        w64[x, y, z] += f64[ni, hi, wi] * d64[ni, hi, wi, di]
    w_fd = w64.astype(f.dtype)
    q64 = np.zeros((g.nx, g.ny, l), dtype=np.float64)
    po64 = po.astype(np.float64)
    wst64 = w_fd.astype(np.float64)
    for k in range(g.nz):
        q64 += po64[:, :, k, None] * wst64[:, :, k, :]
    return q64.astype(f.dtype)


def dva_forward_literal(f, d, cv: VoxelCoords, po):
    """Literal per-ray form of the accumulation: occupancy multiplied inside
    each ray's update, then a plain height sum. Algebraically identical to
    the factored path; retained as a test oracle.
    """
    f = np.asarray(f)
    d = np.asarray(d)
    po = np.asarray(po)
    _check_shapes(f, d, cv, po)
    n, h, w, l = f.shape
    dd = d.shape[3]
    g = cv.grid
    w64 = np.zeros((g.nx, g.ny, g.nz, l), dtype=np.float64)
    f64 = f.astype(np.float64)
    d64 = d.astype(np.float64)
    po64 = po.astype(np.float64)
    for ni in range(n):
        for hi in range(h):
            for wi in range(w):
                for di in range(dd):
                    if cv.valid[ni, hi, wi, di]:
                        x, y, z = cv.indices[ni, hi, wi, di]
                        w64[x, y, z] += f64[ni, hi, wi] * d64[ni, hi, wi, di] * po64[x, y, z]
    return w64.sum(axis=2).astype(f.dtype)
