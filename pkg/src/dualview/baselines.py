"""Single-view ablation paths sharing the dual-view kernel.

Both are exact specializations of dva_forward:
  * lss_forward     — camera-view weighting only (occupancy fixed to 1);
  * bev_only_forward — BEV-view weighting only (uniform depth prior in
    place of the predicted distribution).

The SC (deformable spatial cross-attention) baseline is deliberately not
implemented; see README.
"""

from __future__ import annotations

import numpy as np

from .geometry import VoxelCoords
from .kernel import dva_forward


def lss_forward(f, d, cv: VoxelCoords, strategy: str = "deterministic"):
    """Depth-weighted lift-splat with no BEV-side weighting; single pass."""
    g = cv.grid
    po = np.ones((g.nx, g.ny, g.nz), dtype=np.asarray(f).dtype)
    q, _ctx = dva_forward(f, d, cv, po, strategy=strategy)
    return q


def uniform_depth(shape, n_bins: int, dtype=np.float32) -> np.ndarray:
    """The 1/D prior used when predicted depth is ablated away."""
    n, h, w = shape
    return np.full((n, h, w, n_bins), 1.0 / n_bins, dtype=dtype)


def bev_only_forward(f, cv: VoxelCoords, po, strategy: str = "deterministic"):
    """Occupancy-weighted splat with the depth head disabled (uniform bins)."""
    f = np.asarray(f)
    d = uniform_depth(f.shape[:3], cv.valid.shape[3], dtype=f.dtype)
    q, _ctx = dva_forward(f, d, cv, po, strategy=strategy)
    return q
