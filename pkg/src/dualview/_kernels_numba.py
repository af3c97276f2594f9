"""Numba kernel backend: the hot scatter/gather loops behind @njit.

Same arithmetic as the numpy backend: float64 accumulation, per-voxel
contributions in canonical ray order (deterministic strategy), per-chunk
partial grids merged in chunk order (relaxed strategy).
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange


@njit(parallel=True, cache=True)
def accumulate_deterministic(f2d, dvals, pix, order, seg_starts, seg_vox, n_voxels):
    l = f2d.shape[1]
    out = np.zeros((n_voxels, l), dtype=np.float64)
    n_seg = seg_vox.shape[0]
    for s in prange(n_seg):
        v = seg_vox[s]
        lo = seg_starts[s]
        hi = seg_starts[s + 1]
        for c in range(l):
            acc = 0.0
            for i in range(lo, hi):
                r = order[i]
                acc += np.float64(f2d[pix[r], c]) * dvals[r]
            out[v, c] = acc
    return out


@njit(parallel=True, cache=True)
def accumulate_relaxed(f2d, dvals, pix, vox, n_voxels, n_chunks):
    l = f2d.shape[1]
    r = pix.shape[0]
    step = (r + n_chunks - 1) // n_chunks
    partial = np.zeros((n_chunks, n_voxels, l), dtype=np.float64)
    for t in prange(n_chunks):
        lo = t * step
        hi = min(r, lo + step)
        for i in range(lo, hi):
            v = vox[i]
            p = pix[i]
            dv = dvals[i]
            for c in range(l):
                partial[t, v, c] += np.float64(f2d[p, c]) * dv
    out = np.zeros((n_voxels, l), dtype=np.float64)
    for t in range(n_chunks):
        for v in range(n_voxels):
            for c in range(l):
                out[v, c] += partial[t, v, c]
    return out


@njit(parallel=True, cache=True)
def splat(w3, po2, n_cells, nz):
    # w3: (n_cells, nz, L); po2: (n_cells, nz)
    l = w3.shape[2]
    out = np.zeros((n_cells, l), dtype=np.float64)
    for ij in prange(n_cells):
        for c in range(l):
            acc = 0.0
            for k in range(nz):
                acc += np.float64(po2[ij, k]) * np.float64(w3[ij, k, c])
            out[ij, c] = acc
    return out


@njit(parallel=True, cache=True)
def backward_features_depth(f2d, d2d, po_flat, gq_xy, vox_pd, valid_pd, nz):
    p, l = f2d.shape
    dd = d2d.shape[1]
    gf = np.zeros((p, l), dtype=np.float64)
    gd = np.zeros((p, dd), dtype=np.float64)
    for px in prange(p):
        for d in range(dd):
            if valid_pd[px, d]:
                v = vox_pd[px, d]
                ij = v // nz
                wgt = np.float64(po_flat[v])
                dv = np.float64(d2d[px, d])
                acc_d = 0.0
                for c in range(l):
                    g = wgt * np.float64(gq_xy[ij, c])
                    gf[px, c] += dv * g
                    acc_d += np.float64(f2d[px, c]) * g
                gd[px, d] = acc_d
    return gf, gd


@njit(parallel=True, cache=True)
def backward_occupancy(w2, gq_xy, nz):
    # w2: (V, L) flat voxel feature; gq_xy: (nx*ny, L)
    v_total = w2.shape[0]
    l = w2.shape[1]
    out = np.zeros(v_total, dtype=np.float64)
    for v in prange(v_total):
        ij = v // nz
        acc = 0.0
        for c in range(l):
            acc += np.float64(w2[v, c]) * np.float64(gq_xy[ij, c])
        out[v] = acc
    return out
