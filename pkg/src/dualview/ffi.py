"""Subprocess protocol for foreign-language bindings.

Invocation: python3 -m dualview.ffi <request-dir>

The request directory contains request.json plus raw little-endian tensor
files named in the manifest. The process writes response.json (and output
tensors) into the same directory. Errors are reported *in* response.json
as {"error": {"type", "message"}} with exit code 0, so callers can
distinguish structured failures from crashes.

Operations:
  version            -> {"version": ...}
  build_voxel_coords -> indices.bin (i32) + valid.bin (u8), optional DVAC
                        cache written to "cache_path"
  dva_forward        -> q.bin + a single-use context id for the backward
  dva_backward       -> gf.bin, gd.bin, gpo.bin; consumes the context

Contexts are spilled to <ctx_dir>/<id>.npz; the backward call deletes the
file, so reusing a context id fails.
"""

from __future__ import annotations

import json
import os
import sys
import uuid

import numpy as np

from . import __version__
from .config import encode_voxel_coords, rig_config_from_dict
from .errors import DualViewError
from .geometry import VoxelCoords, VoxelGridSpec, build_voxel_coords
from .kernel import KernelContext, build_plan, dva_backward, dva_forward

_DTYPES = {"float32": "<f4", "float64": "<f8", "int32": "<i4", "uint8": "u1"}


def _read_tensor(dirpath: str, spec: dict, name: str) -> np.ndarray:
    if not isinstance(spec, dict) or "shape" not in spec or "dtype" not in spec:
        raise ValueError(f"tensor {name!r} needs shape and dtype")
    if spec["dtype"] not in _DTYPES:
        raise ValueError(f"tensor {name!r} has unsupported dtype {spec['dtype']!r}")
    shape = tuple(int(x) for x in spec["shape"])
    path = os.path.join(dirpath, spec.get("file", f"{name}.bin"))
    data = np.fromfile(path, dtype=_DTYPES[spec["dtype"]])
    expected = int(np.prod(shape)) if shape else 1
    if data.size != expected:
        raise ValueError(
            f"tensor {name!r}: file holds {data.size} elements, shape {shape} needs {expected}"
        )
    return data.reshape(shape)


def _write_tensor(dirpath: str, name: str, arr: np.ndarray) -> dict:
    dtype = {np.dtype(np.float32): "float32", np.dtype(np.float64): "float64",
             np.dtype(np.int32): "int32", np.dtype(np.uint8): "uint8"}[arr.dtype]
    fname = f"{name}.bin"
    np.ascontiguousarray(arr).astype(_DTYPES[dtype]).tofile(os.path.join(dirpath, fname))
    return {"file": fname, "shape": list(arr.shape), "dtype": dtype}


def _op_build_voxel_coords(dirpath: str, req: dict) -> dict:
    rig, frustum, grid = rig_config_from_dict(req["rig_config"])
    cv = build_voxel_coords(rig, frustum, grid)
    if req.get("cache_path"):
        with open(req["cache_path"], "wb") as f:
            f.write(encode_voxel_coords(cv))
    return {
        "indices": _write_tensor(dirpath, "indices", cv.indices.astype(np.int32)),
        "valid": _write_tensor(dirpath, "valid", cv.valid.astype(np.uint8)),
    }


def _cv_from_request(dirpath: str, req: dict) -> VoxelCoords:
    indices = _read_tensor(dirpath, req["tensors"]["indices"], "indices")
    valid = _read_tensor(dirpath, req["tensors"]["valid"], "valid").astype(bool)
    g = req["grid"]
    grid = VoxelGridSpec(nx=int(g["nx"]), ny=int(g["ny"]), nz=int(g["nz"]),
                         min_bound=np.asarray(g["min_bound"], dtype=np.float64),
                         max_bound=np.asarray(g["max_bound"], dtype=np.float64))
    return VoxelCoords(indices=indices, valid=valid, grid=grid)


def _op_dva_forward(dirpath: str, req: dict) -> dict:
    f = _read_tensor(dirpath, req["tensors"]["f"], "f")
    d = _read_tensor(dirpath, req["tensors"]["d"], "d")
    po = _read_tensor(dirpath, req["tensors"]["po"], "po")
    cv = _cv_from_request(dirpath, req)
    strategy = "deterministic" if req.get("deterministic", True) else "relaxed"
    q, ctx = dva_forward(f, d, cv, po, strategy=strategy)
    ctx_dir = req.get("ctx_dir", dirpath)
    ctx_id = uuid.uuid4().hex
    np.savez(
        os.path.join(ctx_dir, f"ctx-{ctx_id}.npz"),
        f=ctx.f, d=ctx.d, po=ctx.po, w_fd=ctx.w_fd,
        indices=cv.indices, valid=cv.valid,
        grid_counts=np.array([cv.grid.nx, cv.grid.ny, cv.grid.nz]),
        grid_bounds=np.concatenate([cv.grid.min_bound, cv.grid.max_bound]),
        strategy=np.array([strategy]),
    )
    return {"q": _write_tensor(dirpath, "q", q), "context": ctx_id}


def _op_dva_backward(dirpath: str, req: dict) -> dict:
    gq = _read_tensor(dirpath, req["tensors"]["gq"], "gq")
    ctx_dir = req.get("ctx_dir", dirpath)
    ctx_path = os.path.join(ctx_dir, f"ctx-{req['context']}.npz")
    if not os.path.exists(ctx_path):
        raise ValueError(f"context {req['context']!r} is stale or already consumed")
    with np.load(ctx_path) as z:
        counts = z["grid_counts"]
        bounds = z["grid_bounds"]
        grid = VoxelGridSpec(nx=int(counts[0]), ny=int(counts[1]), nz=int(counts[2]),
                             min_bound=bounds[:3], max_bound=bounds[3:])
        cv = VoxelCoords(indices=z["indices"], valid=z["valid"], grid=grid)
        ctx = KernelContext(f=z["f"], d=z["d"], cv=cv, po=z["po"], w_fd=z["w_fd"],
                            plan=build_plan(cv), strategy=str(z["strategy"][0]))
    os.remove(ctx_path)  # single use
    gf, gd, gpo = dva_backward(gq, ctx)
    return {
        "gf": _write_tensor(dirpath, "gf", gf),
        "gd": _write_tensor(dirpath, "gd", gd),
        "gpo": _write_tensor(dirpath, "gpo", gpo),
    }


_OPS = {
    "build_voxel_coords": _op_build_voxel_coords,
    "dva_forward": _op_dva_forward,
    "dva_backward": _op_dva_backward,
}


def handle(dirpath: str) -> dict:
    with open(os.path.join(dirpath, "request.json"), "r", encoding="utf-8") as f:
        req = json.load(f)
    op = req.get("op")
    if op == "version":
        return {"version": __version__}
    if op not in _OPS:
        raise ValueError(f"unknown op {op!r}")
    return _OPS[op](dirpath, req)


def main(argv) -> int:
    if len(argv) != 1:
        print("usage: python3 -m dualview.ffi <request-dir>", file=sys.stderr)
        return 2
    dirpath = argv[0]
    try:
        resp = handle(dirpath)
    except (DualViewError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        resp = {"error": {"type": type(exc).__name__, "message": str(exc)}}
    with open(os.path.join(dirpath, "response.json"), "w", encoding="utf-8") as f:
        json.dump(resp, f)
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
