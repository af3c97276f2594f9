"""Camera and voxel-grid geometry.

All coordinate-frame math lives here: lifting pixel/depth lattices into
camera frusta, unprojecting to the ego frame, aligning historical points
through the world frame, and assigning ego points to voxel indices.

Conventions (documented, nothing downstream depends on them):
  * ego frame is x-forward, y-left, z-up;
  * pixel centers sit at (w + 0.5, h + 0.5);
  * voxel cells are half-open [min, max) per axis.

Everything here runs in 64-bit floats and is computed once per rig/grid
configuration; the hot per-sample work happens in the kernel module.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, SingularIntrinsics

__all__ = [
    "Intrinsics",
    "RigidTransform",
    "CameraRig",
    "FrustumSpec",
    "FrustumPoints",
    "VoxelGridSpec",
    "VoxelCoords",
    "lift_pixels",
    "unproject_to_ego",
    "project_ego_to_pixel",
    "align_historical",
    "voxelize",
    "build_voxel_coords",
]

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics (focal lengths and principal point, in pixels)."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise SingularIntrinsics(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )

    @classmethod
    def from_matrix(cls, k: np.ndarray) -> "Intrinsics":
        k = np.asarray(k, dtype=np.float64)
        if k.shape != (3, 3):
            raise ValueError(f"intrinsics matrix must be 3x3, got {k.shape}")
        return cls(fx=float(k[0, 0]), fy=float(k[1, 1]), cx=float(k[0, 2]), cy=float(k[1, 2]))


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) transform: p_out = rotation @ p_in + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-8:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-8:
            raise ValueError("rotation must be proper (det = +1)")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"homogeneous transform must be 4x4, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Apply to an (..., 3) array of points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self ∘ other: apply `other` first, then `self`."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)


@dataclass(frozen=True)
class CameraRig:
    """N cameras sharing one feature-grid resolution.

    Each camera is (intrinsics, cam->ego extrinsics).
    """

    cameras: tuple
    image_h: int
    image_w: int

    def __post_init__(self):
        if len(self.cameras) < 1:
            raise ValueError("rig needs at least one camera")
        object.__setattr__(self, "cameras", tuple(self.cameras))

    @property
    def n_cameras(self) -> int:
        return len(self.cameras)


@dataclass(frozen=True)
class FrustumSpec:
    """Strictly increasing candidate depths swept along every pixel ray."""

    depth_bins: np.ndarray

    def __post_init__(self):
        bins = np.asarray(self.depth_bins, dtype=np.float64).reshape(-1)
        if bins.size < 1:
            raise ValueError("need at least one depth bin")
        if bins[0] <= 0:
            raise ValueError("depth bins must be positive")
        if bins.size > 1 and not np.all(np.diff(bins) > 0):
            raise ValueError("depth bins must be strictly increasing")
        object.__setattr__(self, "depth_bins", bins)

    @property
    def n_bins(self) -> int:
        return int(self.depth_bins.size)

    @classmethod
    def uniform(cls, d_min: float, d_max: float, n_bins: int) -> "FrustumSpec":
        return cls(np.linspace(d_min, d_max, n_bins))


@dataclass(frozen=True)
class FrustumPoints:
    """(u, v, d) lattice of shape N x H x W x D x 3 in pixel-depth space."""

    coords: np.ndarray


@dataclass(frozen=True)
class VoxelGridSpec:
    """Uniform axis-aligned voxel grid in the ego frame."""

    nx: int
    ny: int
    nz: int
    min_bound: np.ndarray
    max_bound: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min_bound, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max_bound, dtype=np.float64).reshape(3)
        if min(self.nx, self.ny, self.nz) < 1:
            raise ValueError("voxel counts must be >= 1")
        if not np.all(hi > lo):
            raise ValueError("max_bound must exceed min_bound componentwise")
        object.__setattr__(self, "min_bound", lo)
        object.__setattr__(self, "max_bound", hi)

    @property
    def counts(self) -> np.ndarray:
        return np.array([self.nx, self.ny, self.nz], dtype=np.int64)

    @property
    def cell_size(self) -> np.ndarray:
        return (self.max_bound - self.min_bound) / self.counts

    def cell_centers_xy(self) -> np.ndarray:
        """(nx, ny, 2) array of cell-center ego xy coordinates."""
        cs = self.cell_size
        xs = self.min_bound[0] + (np.arange(self.nx) + 0.5) * cs[0]
        ys = self.min_bound[1] + (np.arange(self.ny) + 0.5) * cs[1]
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([gx, gy], axis=-1)


@dataclass(frozen=True, eq=False)
class VoxelCoords:
    """Per-ray target voxel indices and validity mask.

    indices: int32 N x H x W x D x 3, (x, y, z) triple per ray;
    valid:   bool  N x H x W x D. Invalid entries are never read.
    """

    indices: np.ndarray
    valid: np.ndarray
    grid: VoxelGridSpec = field(compare=False)


def lift_pixels(rig: CameraRig, frustum: FrustumSpec) -> FrustumPoints:
    """Outer product of pixel centers with the candidate depth vector."""
    h, w, d = rig.image_h, rig.image_w, frustum.n_bins
    n = rig.n_cameras
    coords = np.empty((n, h, w, d, 3), dtype=np.float64)
    coords[..., 0] = (np.arange(w, dtype=np.float64) + 0.5)[None, None, :, None]
    coords[..., 1] = (np.arange(h, dtype=np.float64) + 0.5)[None, :, None, None]
    coords[..., 2] = frustum.depth_bins[None, None, None, :]
    return FrustumPoints(coords)


def unproject_to_ego(points: FrustumPoints, rig: CameraRig) -> np.ndarray:
    """Pinhole unprojection of every (u, v, d) into the ego frame.

    Camera point is K^-1 (u d, v d, d); the extrinsics then map it to ego.
    Returns an N x H x W x D x 3 float64 array.
    """
    coords = points.coords
    if coords.shape[0] != rig.n_cameras:
        raise ValueError("frustum camera count does not match rig")
    out = np.empty_like(coords)
    for i, (intr, cam_to_ego) in enumerate(rig.cameras):
        u, v, d = coords[i, ..., 0], coords[i, ..., 1], coords[i, ..., 2]
        cam = np.stack(
            [(u - intr.cx) * d / intr.fx, (v - intr.cy) * d / intr.fy, d],
            axis=-1,
        )
        out[i] = cam_to_ego.apply(cam)
    return out


def project_ego_to_pixel(p, cam: tuple) -> tuple:
    """Exact pinhole projection of ego points; inverse of unproject_to_ego.

    Accepts a single 3-vector or an (..., 3) array; returns (u, v, d) with
    matching shape. Raises BehindCamera when any camera-frame depth <= 1e-9.
    """
    intr, cam_to_ego = cam
    pc = cam_to_ego.inverse().apply(np.asarray(p, dtype=np.float64))
    d = pc[..., 2]
    if np.any(d <= 1e-9):
        raise BehindCamera("point has non-positive camera-frame depth")
    u = intr.fx * pc[..., 0] / d + intr.cx
    v = intr.fy * pc[..., 1] / d + intr.cy
    return u, v, d


def align_historical(
    points_prev_ego: np.ndarray,
    ego_pose_prev: RigidTransform,
    ego_pose_curr: RigidTransform,
) -> np.ndarray:
    """Map points from the previous ego frame into the current one.

    Both poses are ego->world; the composition routes through the world
    frame: current_ego <- world <- previous_ego.
    """
    rel = ego_pose_curr.inverse().compose(ego_pose_prev)
    return rel.apply(points_prev_ego)


def voxelize(points_ego: np.ndarray, grid: VoxelGridSpec) -> VoxelCoords:
    """Assign ego points to half-open voxel cells.

    Out-of-range points (including points exactly on max_bound) are masked
    invalid, never clamped.
    """
    p = np.asarray(points_ego, dtype=np.float64)
    idx = np.floor((p - grid.min_bound) / grid.cell_size).astype(np.int64)
    valid = np.all((idx >= 0) & (idx < grid.counts), axis=-1)
    # Guard against floor() landing on the count for points within a ulp of
    # max_bound: the range check above already rejects those.
    out = np.where(valid[..., None], idx, 0).astype(np.int32)
    return VoxelCoords(indices=out, valid=valid, grid=grid)


def build_voxel_coords(
    rig: CameraRig,
    frustum: FrustumSpec,
    grid: VoxelGridSpec,
    ego_pose_prev: RigidTransform | None = None,
    ego_pose_curr: RigidTransform | None = None,
) -> VoxelCoords:
    """Full frustum-to-voxel index map; computed once per geometry.

    When poses are given the rig is treated as the historical frame and
    every point is re-expressed in the current ego frame first.
    """
    pts = unproject_to_ego(lift_pixels(rig, frustum), rig)
    if (ego_pose_prev is None) != (ego_pose_curr is None):
        raise ValueError("supply both ego poses or neither")
    if ego_pose_prev is not None:
        pts = align_historical(pts, ego_pose_prev, ego_pose_curr)
    return voxelize(pts, grid)
