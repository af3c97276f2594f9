"""Precomputed scatter plan shared by both kernel backends.

The plan flattens the ray lattice once per VoxelCoords: valid rays in
canonical (n, h, w, d) order, their flat pixel/voxel indices, and the
stable-sort segmentation used by the deterministic reducer. Plans are
cached weakly per VoxelCoords instance because training reuses the same
geometry every step.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np

from .geometry import VoxelCoords


@dataclass(frozen=True)
class ScatterPlan:
    n_pixels: int          # N * H * W
    n_depth: int           # D
    n_voxels: int          # nx * ny * nz
    nz: int
    pix: np.ndarray        # (R,) int64 flat pixel index per valid ray, ray order
    dbin: np.ndarray       # (R,) int64 depth-bin index per valid ray
    vox: np.ndarray        # (R,) int64 flat voxel index per valid ray
    order: np.ndarray      # (R,) int64 stable sort of vox
    seg_starts: np.ndarray  # (S+1,) int64 segment boundaries into order
    seg_vox: np.ndarray    # (S,) int64 target voxel per segment
    vox_pd: np.ndarray     # (P, D) int64 flat voxel index, -1 where invalid
    valid_pd: np.ndarray   # (P, D) bool


_plan_cache: "weakref.WeakKeyDictionary[VoxelCoords, ScatterPlan]" = weakref.WeakKeyDictionary()


def build_plan(cv: VoxelCoords) -> ScatterPlan:
    plan = _plan_cache.get(cv)
    if plan is not None:
        return plan

    n, h, w, d = cv.valid.shape
    g = cv.grid
    p = n * h * w
    idx = cv.indices.reshape(p, d, 3).astype(np.int64)
    valid_pd = np.ascontiguousarray(cv.valid.reshape(p, d))
    vox_pd = (idx[..., 0] * g.ny + idx[..., 1]) * g.nz + idx[..., 2]
    vox_pd = np.where(valid_pd, vox_pd, -1)

    rid = np.flatnonzero(valid_pd.reshape(-1))
    pix = rid // d
    dbin = rid % d
    vox = vox_pd.reshape(-1)[rid]
    order = np.argsort(vox, kind="stable")
    sorted_vox = vox[order]
    if sorted_vox.size:
        cuts = np.flatnonzero(np.diff(sorted_vox)) + 1
        seg_starts = np.concatenate(([0], cuts, [sorted_vox.size]))
        seg_vox = sorted_vox[seg_starts[:-1]]
    else:
        seg_starts = np.zeros(1, dtype=np.int64)
        seg_vox = np.zeros(0, dtype=np.int64)

    plan = ScatterPlan(
        n_pixels=p,
        n_depth=d,
        n_voxels=g.nx * g.ny * g.nz,
        nz=g.nz,
        pix=pix,
        dbin=dbin,
        vox=vox,
        order=order,
        seg_starts=seg_starts.astype(np.int64),
        seg_vox=seg_vox.astype(np.int64),
        vox_pd=np.ascontiguousarray(vox_pd),
        valid_pd=valid_pd,
    )
    _plan_cache[cv] = plan
    return plan
