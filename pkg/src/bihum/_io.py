"""Deterministic file formats: CSV, canonical JSON, binary trajectories.

All writers emit byte-identical output for identical inputs: floats go through
repr (shortest round-trip form), JSON keys are sorted, newlines are "\n".
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TRAJ_MAGIC = b"BHTR"
TRAJ_VERSION = 1


def fmt(value) -> str:
    """Canonical scalar formatting for CSV cells."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    text = Path(path).read_text()
    lines = [ln for ln in text.split("\n") if ln != ""]
    if not lines:
        return [], []
    header = lines[0].split(",")
    return header, [ln.split(",") for ln in lines[1:]]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    return obj


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_trajectory(path, values: np.ndarray, nt: int, horizon: float) -> None:
    """Binary trajectory: magic, version, dims, N per axis, nt, T header, then
    row-major float64 little-endian slices."""
    values = np.asarray(values, dtype="<f8")
    dims = values.ndim - 1
    shape = values.shape[1:]
    with open(path, "wb") as fh:
        fh.write(TRAJ_MAGIC)
        fh.write(struct.pack("<II", TRAJ_VERSION, dims))
        fh.write(struct.pack("<" + "I" * dims, *shape))
        fh.write(struct.pack("<Id", nt, horizon))
        fh.write(np.ascontiguousarray(values).tobytes())


def read_trajectory(path) -> tuple[np.ndarray, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != TRAJ_MAGIC:
        raise ValueError(f"{path} is not a trajectory file")
    off = 4
    version, dims = struct.unpack_from("<II", raw, off)
    off += 8
    shape = struct.unpack_from("<" + "I" * dims, raw, off)
    off += 4 * dims
    nt, horizon = struct.unpack_from("<Id", raw, off)
    off += 12
    body = np.frombuffer(raw, dtype="<f8", offset=off)
    per_slice = int(np.prod(shape))
    nslices = body.size // per_slice
    values = body.reshape((nslices,) + shape).astype(float)
    meta = {"version": version, "dims": dims, "shape": tuple(shape),
            "nt": nt, "horizon": horizon}
    return values, meta


def write_field_csv(path, values: np.ndarray, axes: Sequence[np.ndarray],
                    times: np.ndarray, value_name: str = "value") -> None:
    """Long-format CSV of a time-stacked field, rows sorted time-major then
    node-major (C order)."""
    dim = len(axes)
    coord_names = ["x", "y", "z"][:dim]
    header = coord_names + ["t", value_name]
    meshes = np.meshgrid(*axes, indexing="ij")
    flat_coords = [m.ravel() for m in meshes]
    rows = []
    for ti, t in enumerate(times):
        slab = values[ti].ravel()
        for ni in range(slab.size):
            rows.append([flat_coords[a][ni] for a in range(dim)] + [t, slab[ni]])
    write_csv(path, header, rows)
