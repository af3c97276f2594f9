"""Pure-numpy kernel backend.

Semantics-defining reference for the numba backend: every reduction
accumulates in float64 with per-voxel contributions applied in canonical
ray order, so deterministic-mode results are bitwise identical to the
sequential naive oracle regardless of backend.
"""

from __future__ import annotations

import numpy as np

from ._plan import ScatterPlan


def accumulate_deterministic(f2d, d2d, plan: ScatterPlan):
    """(P, L) features x (P, D) depth weights -> (V, L) float64 voxel sums.

    np.add.at applies contributions element by element in index order,
    which matches the naive (n, h, w, d) loop exactly.
    """
    out = np.zeros((plan.n_voxels, f2d.shape[1]), dtype=np.float64)
    if plan.pix.size:
        contrib = f2d[plan.pix].astype(np.float64)
        contrib *= d2d[plan.pix, plan.dbin].astype(np.float64)[:, None]
        np.add.at(out, plan.vox, contrib)
    return out


def accumulate_relaxed(f2d, d2d, plan: ScatterPlan, n_chunks: int):
    """Per-chunk float64 partial grids merged in chunk order."""
    l = f2d.shape[1]
    out = np.zeros((plan.n_voxels, l), dtype=np.float64)
    r = plan.pix.size
    if r == 0:
        return out
    step = (r + n_chunks - 1) // n_chunks
    for lo in range(0, r, step):
        hi = min(r, lo + step)
        part = np.zeros_like(out)
        contrib = f2d[plan.pix[lo:hi]].astype(np.float64)
        contrib *= d2d[plan.pix[lo:hi], plan.dbin[lo:hi]].astype(np.float64)[:, None]
        np.add.at(part, plan.vox[lo:hi], contrib)
        out += part
    return out


def splat(w, po):
    """(nx, ny, nz, L) x (nx, ny, nz) -> (nx, ny, L) float64.

    Height sum runs low-to-high sequentially, matching the naive loop.
    """
    nz = w.shape[2]
    out = np.zeros((w.shape[0], w.shape[1], w.shape[3]), dtype=np.float64)
    for k in range(nz):
        out += po[:, :, k, None].astype(np.float64) * w[:, :, k, :].astype(np.float64)
    return out


def backward_features_depth(f2d, d2d, po_flat, gq_xy, plan: ScatterPlan):
    """Gradients w.r.t. features and depth weights; pure gather, float64."""
    p, l = f2d.shape
    dd = d2d.shape[1]
    gf = np.zeros((p, l), dtype=np.float64)
    gd = np.zeros((p, dd), dtype=np.float64)
    if plan.pix.size:
        ij = plan.vox // plan.nz
        wgt = po_flat[plan.vox].astype(np.float64)[:, None] * gq_xy[ij].astype(np.float64)
        np.add.at(gf, plan.pix, d2d[plan.pix, plan.dbin].astype(np.float64)[:, None] * wgt)
        gd_vals = np.einsum("rl,rl->r", f2d[plan.pix].astype(np.float64), wgt)
        gd[plan.pix, plan.dbin] = gd_vals
    return gf, gd


def backward_occupancy(w, gq):
    """(nx, ny, nz, L) voxel feature vs (nx, ny, L) BEV gradient -> (nx, ny, nz)."""
    return np.einsum(
        "ijkl,ijl->ijk", w.astype(np.float64), gq.astype(np.float64)
    )
