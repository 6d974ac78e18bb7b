"""Mesh interchange: ASCII OBJ (v/f records) and per-vertex CSV sidecars.

Float output uses 9 significant digits of the f32-rounded value, which both
makes files byte-deterministic and lets coordinates round-trip bit-exactly
(9 significant decimals uniquely identify a float32).
"""

from __future__ import annotations

import numpy as np

from .meshcore import TriangleMesh


def _fmt(x: float) -> str:
    return format(float(x), ".9g")


def write_obj(path, mesh: TriangleMesh) -> None:
    v32 = mesh.vertices.astype(np.float32)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for x, y, z in v32:
            fh.write(f"v {_fmt(x)} {_fmt(y)} {_fmt(z)}\n")
        for a, b, c in mesh.faces + 1:  # OBJ is 1-based
            fh.write(f"f {a} {b} {c}\n")


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                # tolerate v/vt/vn references; indices are 1-based
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    v = np.array(verts, dtype=np.float64).astype(np.float32)
    return TriangleMesh(v.astype(np.float64),
                        np.array(faces, dtype=np.int64))


def write_vertex_csv(path, values, header: str = "vertex_id,value") -> None:
    values = np.asarray(values)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        if np.issubdtype(values.dtype, np.integer):
            for i, v in enumerate(values):
                fh.write(f"{i},{int(v)}\n")
        else:
            for i, v in enumerate(values):
                fh.write(f"{i},{_fmt(v)}\n")


def read_vertex_csv(path, dtype=np.float64) -> np.ndarray:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        next(fh)  # header
        for line in fh:
            line = line.strip()
            if line:
                out.append(line.split(",")[1])
    return np.array(out, dtype=dtype)
