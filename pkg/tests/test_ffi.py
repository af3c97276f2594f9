"""Subprocess protocol: request dir in, response.json + tensors out."""

import json
import subprocess
import sys

import numpy as np
import pytest

import dualview
from dualview.gradcheck import random_instance
from dualview.kernel import dva_backward, dva_forward


def call(dirpath):
    proc = subprocess.run(
        [sys.executable, "-m", "dualview.ffi", str(dirpath)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    with open(dirpath / "response.json") as f:
        return json.load(f)


def write_request(dirpath, op, tensors=None, **extra):
    manifest = {}
    for name, arr in (tensors or {}).items():
        arr.tofile(dirpath / f"{name}.bin")
        dtype = {"<f4": "float32", "<f8": "float64",
                 "<i4": "int32", "|u1": "uint8"}[arr.dtype.str]
        manifest[name] = {"file": f"{name}.bin", "shape": list(arr.shape), "dtype": dtype}
    doc = {"op": op, "tensors": manifest, **extra}
    (dirpath / "request.json").write_text(json.dumps(doc))


def read_tensor(dirpath, spec):
    dtypes = {"float32": "<f4", "float64": "<f8", "int32": "<i4", "uint8": "u1"}
    data = np.fromfile(dirpath / spec["file"], dtype=dtypes[spec["dtype"]])
    return data.reshape(spec["shape"])


def test_version_op(tmp_path):
    write_request(tmp_path, "version")
    assert call(tmp_path)["version"] == dualview.__version__


def test_unknown_op_is_a_structured_error(tmp_path):
    write_request(tmp_path, "frobnicate")
    resp = call(tmp_path)
    assert resp["error"]["type"] == "ValueError"
    assert "frobnicate" in resp["error"]["message"]


def test_forward_backward_round_trip_is_bitwise(tmp_path):
    f, d, cv, po = random_instance(3, dtype=np.float32)
    q_ref, ctx = dva_forward(f, d, cv, po)
    gq = np.random.default_rng(4).standard_normal(q_ref.shape).astype(np.float32)
    gf_ref, gd_ref, gpo_ref = dva_backward(gq, ctx)

    grid = {"nx": cv.grid.nx, "ny": cv.grid.ny, "nz": cv.grid.nz,
            "min_bound": cv.grid.min_bound.tolist(),
            "max_bound": cv.grid.max_bound.tolist()}
    fwd_dir = tmp_path / "fwd"
    fwd_dir.mkdir()
    write_request(
        fwd_dir, "dva_forward",
        tensors={"f": f.astype("<f4"), "d": d.astype("<f4"), "po": po.astype("<f4"),
                 "indices": cv.indices.astype("<i4"),
                 "valid": cv.valid.astype(np.uint8)},
        grid=grid, deterministic=True, ctx_dir=str(tmp_path),
    )
    resp = call(fwd_dir)
    assert read_tensor(fwd_dir, resp["q"]).tobytes() == q_ref.tobytes()

    bwd_dir = tmp_path / "bwd"
    bwd_dir.mkdir()
    write_request(bwd_dir, "dva_backward", tensors={"gq": gq.astype("<f4")},
                  context=resp["context"], ctx_dir=str(tmp_path))
    bresp = call(bwd_dir)
    assert read_tensor(bwd_dir, bresp["gf"]).tobytes() == gf_ref.tobytes()
    assert read_tensor(bwd_dir, bresp["gd"]).tobytes() == gd_ref.tobytes()
    assert read_tensor(bwd_dir, bresp["gpo"]).tobytes() == gpo_ref.tobytes()

    # Contexts are single use: the same backward request now fails.
    reuse = call(bwd_dir)
    assert "stale or already consumed" in reuse["error"]["message"]


def test_tensor_length_mismatch_names_the_tensor(tmp_path):
    f, d, cv, po = random_instance(0, dtype=np.float32)
    grid = {"nx": cv.grid.nx, "ny": cv.grid.ny, "nz": cv.grid.nz,
            "min_bound": cv.grid.min_bound.tolist(),
            "max_bound": cv.grid.max_bound.tolist()}
    write_request(
        tmp_path, "dva_forward",
        tensors={"f": f.astype("<f4")[:1], "d": d.astype("<f4"),
                 "po": po.astype("<f4"), "indices": cv.indices.astype("<i4"),
                 "valid": cv.valid.astype(np.uint8)},
        grid=grid, deterministic=True, ctx_dir=str(tmp_path),
    )
    # lie about the shape: manifest says [1,...], kernel expects parity with d
    req = json.loads((tmp_path / "request.json").read_text())
    req["tensors"]["f"]["shape"] = list(f.shape)
    (tmp_path / "request.json").write_text(json.dumps(req))
    resp = call(tmp_path)
    assert "'f'" in resp["error"]["message"]
