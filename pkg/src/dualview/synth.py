"""Synthetic multi-camera world: oriented boxes, two-timestamp ego motion,
analytic ray-box depth rendering (the lidar stand-in), semantic feature
rendering, and ground-truth BEV occupancy.

All rendering is a pure function of (scene, camera, timestamp). Boxes are
static in the world; only the ego moves between the two timestamps. Box
coordinates are expressed in the current ego frame, which doubles as the
world frame (ego_pose_curr maps it to the world).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np
from shapely.geometry import Polygon

from .errors import CorruptRecord, IoError, PlacementFailure, VersionMismatch
from .geometry import (
    CameraRig,
    FrustumSpec,
    Intrinsics,
    RigidTransform,
    VoxelGridSpec,
)

DATASET_MAGIC = b"DVAS"
DATASET_VERSION = 1

DEFAULT_N_CLASSES = 4


@dataclass(frozen=True)
class Box3D:
    """Yaw-oriented box in the current ego frame."""

    center: np.ndarray  # (3,) meters
    size: np.ndarray    # (3,) full extents, meters
    yaw: float          # radians, in [-pi, pi)
    class_id: int

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        s = np.asarray(self.size, dtype=np.float64).reshape(3)
        if not np.all(s > 0):
            raise ValueError("box size must be positive componentwise")
        yaw = float(self.yaw)
        if not (-np.pi <= yaw < np.pi):
            raise ValueError(f"yaw must be in [-pi, pi), got {yaw}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", s)
        object.__setattr__(self, "yaw", yaw)

    @property
    def rotation(self) -> np.ndarray:
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def footprint_corners(self) -> np.ndarray:
        """(4, 2) xy corners of the yaw-rotated footprint."""
        hx, hy = self.size[0] / 2, self.size[1] / 2
        local = np.array([[hx, hy], [hx, -hy], [-hx, -hy], [-hx, hy]])
        r = self.rotation[:2, :2]
        return local @ r.T + self.center[:2]


@dataclass(frozen=True)
class Scene:
    boxes: tuple
    ego_pose_prev: RigidTransform  # ego -> world at t-1
    ego_pose_curr: RigidTransform  # ego -> world at t
    rig: CameraRig
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))


@dataclass(frozen=True)
class Sample:
    """Rendered inputs and targets for one scene."""

    features_prev: np.ndarray   # (N, H, W, L) float32
    features_curr: np.ndarray
    depth_gt_prev: np.ndarray   # (N, H, W) float64, +inf for sky
    depth_gt_curr: np.ndarray
    bev_occupancy_gt: np.ndarray  # (nx, ny) uint8
    voxel_occupancy_gt: np.ndarray  # (nx, ny, nz) uint8
    bev_class_gt: np.ndarray    # (nx, ny, n_class_channels) uint8


def _rot_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def default_rig(n_cameras: int = 6, image_h: int = 16, image_w: int = 16,
                hfov_deg: float = 70.0, height: float = 1.5) -> CameraRig:
    """Surround rig: cameras at even yaw increments around the ego origin.

    Camera frame is x-right, y-down, z-forward (standard pinhole); ego is
    x-forward, y-left, z-up.
    """
    fx = image_w / (2.0 * np.tan(np.radians(hfov_deg) / 2.0))
    intr = Intrinsics(fx=fx, fy=fx, cx=image_w / 2.0, cy=image_h / 2.0)
    cams = []
    for i in range(n_cameras):
        theta = 2.0 * np.pi * i / n_cameras
        fwd = np.array([np.cos(theta), np.sin(theta), 0.0])
        right = np.array([np.sin(theta), -np.cos(theta), 0.0])
        down = np.array([0.0, 0.0, -1.0])
        rot = np.stack([right, down, fwd], axis=1)
        cams.append((intr, RigidTransform(rot, np.array([0.0, 0.0, height]))))
    return CameraRig(tuple(cams), image_h=image_h, image_w=image_w)


def default_grid(nx: int = 32, ny: int = 32, nz: int = 4,
                 half_extent: float = 10.0) -> VoxelGridSpec:
    return VoxelGridSpec(
        nx=nx, ny=ny, nz=nz,
        min_bound=np.array([-half_extent, -half_extent, -1.0]),
        max_bound=np.array([half_extent, half_extent, 3.0]),
    )


def default_frustum(n_bins: int = 16, d_min: float = 1.0, d_max: float = 12.0) -> FrustumSpec:
    return FrustumSpec.uniform(d_min, d_max, n_bins)


def footprint_iou(a: Box3D, b: Box3D) -> float:
    pa = Polygon(a.footprint_corners())
    pb = Polygon(b.footprint_corners())
    inter = pa.intersection(pb).area
    union = pa.area + pb.area - inter
    return inter / union if union > 0 else 0.0


def generate_scene(seed: int, n_boxes: int, rig: CameraRig, grid: VoxelGridSpec,
                   n_classes: int = DEFAULT_N_CLASSES, max_attempts: int = 1000) -> Scene:
    """Sample boxes inside the grid with footprint-overlap rejection.

    Overlap above 0.3 footprint IoU is rejected; ego motion between the
    timestamps is a planar translation <= 2 m plus a yaw <= 0.1 rad.
    """
    rng = np.random.default_rng(seed)
    ext = grid.max_bound - grid.min_bound
    boxes: list[Box3D] = []
    attempts = 0
    while len(boxes) < n_boxes:
        if attempts >= max_attempts:
            raise PlacementFailure(
                f"placed {len(boxes)}/{n_boxes} boxes in {max_attempts} attempts"
            )
        attempts += 1
        size = rng.uniform(0.08, 0.2, size=3) * ext
        yaw = float(rng.uniform(-np.pi, np.pi))
        r_xy = float(np.hypot(size[0], size[1]) / 2.0)
        margin = np.array([r_xy, r_xy, size[2] / 2.0])
        lo = grid.min_bound + margin
        hi = grid.max_bound - margin
        if np.any(hi <= lo):
            continue
        center = rng.uniform(lo, hi)
        cand = Box3D(center=center, size=size, yaw=yaw,
                     class_id=int(rng.integers(0, n_classes)))
        if any(footprint_iou(cand, other) > 0.3 for other in boxes):
            continue
        boxes.append(cand)

    angle = float(rng.uniform(-np.pi, np.pi))
    dist = float(rng.uniform(0.0, 2.0))
    dyaw = float(rng.uniform(-0.1, 0.1))
    prev = RigidTransform(_rot_z(dyaw), np.array([dist * np.cos(angle), dist * np.sin(angle), 0.0]))
    return Scene(boxes=tuple(boxes), ego_pose_prev=prev,
                 ego_pose_curr=RigidTransform.identity(), rig=rig, seed=int(seed))


def _pixel_rays(scene: Scene, camera_index: int, timestamp: str):
    """Camera center and per-pixel ray directions in the current ego frame.

    Directions are scaled so the camera-frame z component is 1: the ray
    parameter equals the camera-frame depth.
    """
    rig = scene.rig
    intr, cam_to_ego = rig.cameras[camera_index]
    h, w = rig.image_h, rig.image_w
    u = np.arange(w, dtype=np.float64) + 0.5
    v = np.arange(h, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(u, v)
    dirs_cam = np.stack(
        [(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, np.ones_like(uu)], axis=-1
    )
    if timestamp == "curr":
        to_curr = cam_to_ego
    elif timestamp == "prev":
        rel = scene.ego_pose_curr.inverse().compose(scene.ego_pose_prev)
        to_curr = rel.compose(cam_to_ego)
    else:
        raise ValueError(f"timestamp must be 'prev' or 'curr', got {timestamp!r}")
    origin = to_curr.translation
    dirs = dirs_cam @ to_curr.rotation.T
    return origin, dirs.reshape(h * w, 3)


def _ray_box_depths(origin, dirs, box: Box3D) -> np.ndarray:
    """Slab test against one oriented box; +inf where the ray misses."""
    r = box.rotation
    o = (origin - box.center) @ r
    d = dirs @ r
    half = box.size / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    tmin = np.minimum(t1, t2).max(axis=-1)
    tmax = np.maximum(t1, t2).min(axis=-1)
    hit = (tmax >= tmin) & (tmax > 1e-9)
    t = np.where(tmin > 1e-9, tmin, tmax)
    return np.where(hit, t, np.inf)


def render_depth(scene: Scene, camera_index: int, timestamp: str) -> np.ndarray:
    """Per-pixel nearest hit distance (camera-frame depth), +inf for sky."""
    rig = scene.rig
    origin, dirs = _pixel_rays(scene, camera_index, timestamp)
    depth = np.full(dirs.shape[0], np.inf)
    for box in scene.boxes:
        depth = np.minimum(depth, _ray_box_depths(origin, dirs, box))
    return depth.reshape(rig.image_h, rig.image_w)


def render_features(scene: Scene, camera_index: int, timestamp: str, n_channels: int) -> np.ndarray:
    """Semantic feature image: one-hot class of the nearest hit box in the
    first channels, normalized pixel coordinates in the last two.
    """
    rig = scene.rig
    h, w = rig.image_h, rig.image_w
    n_class_channels = n_channels - 2
    if n_class_channels < 1:
        raise ValueError("need at least 3 channels (classes + 2 coordinate channels)")
    for box in scene.boxes:
        if box.class_id >= n_class_channels:
            raise ValueError(
                f"class id {box.class_id} does not fit in {n_class_channels} class channels"
            )
    origin, dirs = _pixel_rays(scene, camera_index, timestamp)
    out = np.zeros((h * w, n_channels), dtype=np.float32)
    if scene.boxes:
        depths = np.stack([_ray_box_depths(origin, dirs, b) for b in scene.boxes], axis=-1)
        nearest = np.argmin(depths, axis=-1)
        has_hit = np.isfinite(depths.min(axis=-1))
        classes = np.array([b.class_id for b in scene.boxes])
        rows = np.flatnonzero(has_hit)
        out[rows, classes[nearest[rows]]] = 1.0
    uu, vv = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    out[:, n_channels - 2] = (uu / w).reshape(-1)
    out[:, n_channels - 1] = (vv / h).reshape(-1)
    return out.reshape(h, w, n_channels)


def bev_occupancy_gt(scene: Scene, grid: VoxelGridSpec) -> np.ndarray:
    """Cell = 1 iff the cell center lies inside any box footprint at t."""
    centers = grid.cell_centers_xy()
    occ = np.zeros((grid.nx, grid.ny), dtype=np.uint8)
    for box in scene.boxes:
        r = box.rotation[:2, :2]
        local = (centers - box.center[:2]) @ r
        inside = np.all(np.abs(local) <= box.size[:2] / 2.0, axis=-1)
        occ |= inside.astype(np.uint8)
    return occ


def bev_class_gt(scene: Scene, grid: VoxelGridSpec, n_classes: int) -> np.ndarray:
    """(nx, ny, n_classes) per-class footprint masks at t.

    Channel c = 1 iff the cell center lies inside the footprint of a box
    with class_id c. Collapsing over classes with `any` reproduces
    bev_occupancy_gt. Per-class targets make the BEV prediction task
    content-sensitive: feature mass landing in the right cell with the
    wrong class signature is penalized.
    """
    centers = grid.cell_centers_xy()
    occ = np.zeros((grid.nx, grid.ny, n_classes), dtype=np.uint8)
    for box in scene.boxes:
        if box.class_id >= n_classes:
            raise ValueError(
                f"class id {box.class_id} does not fit in {n_classes} class channels")
        r = box.rotation[:2, :2]
        local = (centers - box.center[:2]) @ r
        inside = np.all(np.abs(local) <= box.size[:2] / 2.0, axis=-1)
        occ[..., box.class_id] |= inside.astype(np.uint8)
    return occ


def voxel_occupancy_gt(scene: Scene, grid: VoxelGridSpec) -> np.ndarray:
    """(nx, ny, nz) voxel occupancy at t.

    A voxel is occupied iff its xy center lies inside a box footprint and
    its z interval overlaps the box's z extent. The interval test in z
    keeps columns consistent with bev_occupancy_gt even for boxes thinner
    than one z cell: collapsing over z reproduces the footprint mask.
    """
    centers = grid.cell_centers_xy()
    cs_z = grid.cell_size[2]
    z_lo = grid.min_bound[2] + np.arange(grid.nz) * cs_z
    z_hi = z_lo + cs_z
    occ = np.zeros((grid.nx, grid.ny, grid.nz), dtype=np.uint8)
    for box in scene.boxes:
        r = box.rotation[:2, :2]
        local = (centers - box.center[:2]) @ r
        inside_xy = np.all(np.abs(local) <= box.size[:2] / 2.0, axis=-1)
        b_lo = box.center[2] - box.size[2] / 2.0
        b_hi = box.center[2] + box.size[2] / 2.0
        overlap_z = (z_lo < b_hi) & (z_hi > b_lo)
        occ |= (inside_xy[:, :, None] & overlap_z[None, None, :]).astype(np.uint8)
    return occ


def make_sample(scene: Scene, grid: VoxelGridSpec, n_channels: int) -> Sample:
    """Render everything the trainer consumes for one scene."""
    n = scene.rig.n_cameras
    feats_p = np.stack([render_features(scene, i, "prev", n_channels) for i in range(n)])
    feats_c = np.stack([render_features(scene, i, "curr", n_channels) for i in range(n)])
    depth_p = np.stack([render_depth(scene, i, "prev") for i in range(n)])
    depth_c = np.stack([render_depth(scene, i, "curr") for i in range(n)])
    return Sample(
        features_prev=feats_p, features_curr=feats_c,
        depth_gt_prev=depth_p, depth_gt_curr=depth_c,
        bev_occupancy_gt=bev_occupancy_gt(scene, grid),
        voxel_occupancy_gt=voxel_occupancy_gt(scene, grid),
        bev_class_gt=bev_class_gt(scene, grid, n_channels - 2),
    )


def bin_depth(depth_gt: np.ndarray, frustum: FrustumSpec):
    """Nearest-bin depth targets and the finite-depth supervision mask."""
    mask = np.isfinite(depth_gt)
    safe = np.where(mask, depth_gt, frustum.depth_bins[0])
    target = np.abs(safe[..., None] - frustum.depth_bins).argmin(axis=-1)
    return target.astype(np.int64), mask


# ---------------------------------------------------------------------------
# Dataset container (DVAS): length-prefixed CRC-checked scene records.

def _pack_scene(scene: Scene) -> bytes:
    parts = [struct.pack("<QI", scene.seed, len(scene.boxes))]
    for b in scene.boxes:
        parts.append(struct.pack("<3d3ddi", *b.center, *b.size, b.yaw, b.class_id))
    parts.append(scene.ego_pose_prev.matrix.astype("<f8").tobytes())
    parts.append(scene.ego_pose_curr.matrix.astype("<f8").tobytes())
    rig = scene.rig
    parts.append(struct.pack("<3I", rig.n_cameras, rig.image_h, rig.image_w))
    for intr, ext in rig.cameras:
        parts.append(intr.matrix.astype("<f8").tobytes())
        parts.append(ext.matrix.astype("<f8").tobytes())
    return b"".join(parts)


def _unpack_scene(payload: bytes) -> Scene:
    off = 0
    seed, n_boxes = struct.unpack_from("<QI", payload, off)
    off += 12
    boxes = []
    for _ in range(n_boxes):
        vals = struct.unpack_from("<3d3ddi", payload, off)
        off += 60
        boxes.append(Box3D(center=np.array(vals[:3]), size=np.array(vals[3:6]),
                           yaw=vals[6], class_id=vals[7]))
    prev = RigidTransform.from_matrix(
        np.frombuffer(payload, dtype="<f8", count=16, offset=off).reshape(4, 4))
    off += 128
    curr = RigidTransform.from_matrix(
        np.frombuffer(payload, dtype="<f8", count=16, offset=off).reshape(4, 4))
    off += 128
    n_cams, h, w = struct.unpack_from("<3I", payload, off)
    off += 12
    cams = []
    for _ in range(n_cams):
        k = np.frombuffer(payload, dtype="<f8", count=9, offset=off).reshape(3, 3)
        off += 72
        e = np.frombuffer(payload, dtype="<f8", count=16, offset=off).reshape(4, 4)
        off += 128
        cams.append((Intrinsics.from_matrix(k), RigidTransform.from_matrix(e)))
    if off != len(payload):
        raise CorruptRecord("scene record has trailing bytes")
    return Scene(boxes=tuple(boxes), ego_pose_prev=prev, ego_pose_curr=curr,
                 rig=CameraRig(tuple(cams), image_h=h, image_w=w), seed=seed)


def write_dataset(path, scenes) -> None:
    try:
        with open(path, "wb") as f:
            f.write(DATASET_MAGIC)
            f.write(struct.pack("<II", DATASET_VERSION, len(scenes)))
            for scene in scenes:
                payload = _pack_scene(scene)
                f.write(struct.pack("<I", len(payload)))
                f.write(payload)
                f.write(struct.pack("<I", zlib.crc32(payload)))
    except OSError as exc:
        raise IoError(f"cannot write dataset {path}: {exc}") from exc


def read_dataset(path) -> list:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise IoError(f"cannot read dataset {path}: {exc}") from exc
    if blob[:4] != DATASET_MAGIC:
        raise CorruptRecord("bad magic in dataset file")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != DATASET_VERSION:
        raise VersionMismatch(f"unsupported dataset version {version}")
    off = 12
    scenes = []
    for _ in range(count):
        if off + 4 > len(blob):
            raise CorruptRecord("dataset truncated at record header")
        (length,) = struct.unpack_from("<I", blob, off)
        off += 4
        if off + length + 4 > len(blob):
            raise CorruptRecord("dataset truncated inside record")
        payload = blob[off:off + length]
        off += length
        (crc,) = struct.unpack_from("<I", blob, off)
        off += 4
        if zlib.crc32(payload) != crc:
            raise CorruptRecord("dataset record failed checksum")
        scenes.append(_unpack_scene(payload))
    return scenes
