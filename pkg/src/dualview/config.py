"""Rig/grid/frustum JSON configuration and the voxel-coordinate cache file.

JSON schema (see README for the full description):

    {
      "image_h": 16, "image_w": 16,
      "cameras": [{"intrinsics": [[...9 row-major...]],
                   "extrinsics": [[...16 row-major...]]}, ...],
      "grid": {"nx": 128, "ny": 128, "nz": 8,
               "min_bound": [x, y, z], "max_bound": [x, y, z]},
      "depth_bins": [d0, d1, ...]
    }

Cache file layout (all little-endian): magic "DVAC", version u32, six u32
dims (N, H, W, D, then nx, ny, nz as u32 x3 after bounds), grid bounds as
6 f64, int32 index triples in C order, then the validity mask packed MSB
first with numpy.packbits.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CorruptRecord, IoError, VersionMismatch
from .geometry import (
    CameraRig,
    FrustumSpec,
    Intrinsics,
    RigidTransform,
    VoxelCoords,
    VoxelGridSpec,
)

CACHE_MAGIC = b"DVAC"
CACHE_VERSION = 1


def rig_config_from_dict(doc: dict) -> tuple[CameraRig, FrustumSpec, VoxelGridSpec]:
    try:
        cams = []
        for c in doc["cameras"]:
            k = np.asarray(c["intrinsics"], dtype=np.float64).reshape(3, 3)
            e = np.asarray(c["extrinsics"], dtype=np.float64).reshape(4, 4)
            cams.append((Intrinsics.from_matrix(k), RigidTransform.from_matrix(e)))
        rig = CameraRig(tuple(cams), image_h=int(doc["image_h"]), image_w=int(doc["image_w"]))
        g = doc["grid"]
        grid = VoxelGridSpec(
            nx=int(g["nx"]), ny=int(g["ny"]), nz=int(g["nz"]),
            min_bound=np.asarray(g["min_bound"], dtype=np.float64),
            max_bound=np.asarray(g["max_bound"], dtype=np.float64),
        )
        frustum = FrustumSpec(np.asarray(doc["depth_bins"], dtype=np.float64))
    except (KeyError, TypeError, ValueError) as exc:
        raise IoError(f"malformed rig configuration: {exc}") from exc
    return rig, frustum, grid


def rig_config_to_dict(rig: CameraRig, frustum: FrustumSpec, grid: VoxelGridSpec) -> dict:
    return {
        "image_h": rig.image_h,
        "image_w": rig.image_w,
        "cameras": [
            {"intrinsics": intr.matrix.tolist(), "extrinsics": ext.matrix.tolist()}
            for intr, ext in rig.cameras
        ],
        "grid": {
            "nx": grid.nx, "ny": grid.ny, "nz": grid.nz,
            "min_bound": grid.min_bound.tolist(),
            "max_bound": grid.max_bound.tolist(),
        },
        "depth_bins": frustum.depth_bins.tolist(),
    }


def load_rig_config(path) -> tuple[CameraRig, FrustumSpec, VoxelGridSpec]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise IoError(f"cannot read rig config {path}: {exc}") from exc
    return rig_config_from_dict(doc)


def encode_voxel_coords(cv: VoxelCoords) -> bytes:
    """Serialize a VoxelCoords to the DVAC cache format."""
    n, h, w, d = cv.valid.shape
    g = cv.grid
    header = CACHE_MAGIC + struct.pack(
        "<5I", CACHE_VERSION, n, h, w, d
    ) + struct.pack("<3I", g.nx, g.ny, g.nz) + struct.pack(
        "<6d", *g.min_bound, *g.max_bound
    )
    idx = np.ascontiguousarray(cv.indices, dtype="<i4")
    bits = np.packbits(cv.valid.reshape(-1).astype(np.uint8))
    return header + idx.tobytes() + bits.tobytes()


def decode_voxel_coords(blob: bytes) -> VoxelCoords:
    if blob[:4] != CACHE_MAGIC:
        raise CorruptRecord("bad magic in voxel-coords cache")
    off = 4
    version, n, h, w, d = struct.unpack_from("<5I", blob, off)
    off += 20
    if version != CACHE_VERSION:
        raise VersionMismatch(f"unsupported cache version {version}")
    nx, ny, nz = struct.unpack_from("<3I", blob, off)
    off += 12
    bounds = struct.unpack_from("<6d", blob, off)
    off += 48
    n_rays = n * h * w * d
    idx_bytes = n_rays * 3 * 4
    mask_bytes = (n_rays + 7) // 8
    if len(blob) != off + idx_bytes + mask_bytes:
        raise CorruptRecord("voxel-coords cache has wrong length")
    indices = np.frombuffer(blob, dtype="<i4", count=n_rays * 3, offset=off)
    indices = indices.reshape(n, h, w, d, 3).copy()
    valid = np.unpackbits(
        np.frombuffer(blob, dtype=np.uint8, offset=off + idx_bytes), count=n_rays
    ).astype(bool).reshape(n, h, w, d)
    grid = VoxelGridSpec(nx=nx, ny=ny, nz=nz,
                         min_bound=np.array(bounds[:3]), max_bound=np.array(bounds[3:]))
    return VoxelCoords(indices=indices, valid=valid, grid=grid)


def save_voxel_coords(path, cv: VoxelCoords) -> None:
    try:
        with open(path, "wb") as f:
            f.write(encode_voxel_coords(cv))
    except OSError as exc:
        raise IoError(f"cannot write voxel-coords cache {path}: {exc}") from exc


def load_voxel_coords(path) -> VoxelCoords:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise IoError(f"cannot read voxel-coords cache {path}: {exc}") from exc
    return decode_voxel_coords(blob)
