"""ASCII PLY and JSON helpers.

Floats are written with 17 significant digits so float64 values round-trip
bit-exactly.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from .core import PointCloud


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_ply(path, cloud: PointCloud, faces: Optional[np.ndarray] = None,
              comments: tuple = ()) -> None:
    pts = cloud.points
    has_n = cloud.normals is not None
    lines = ["ply", "format ascii 1.0"]
    lines += [f"comment {c}" for c in comments]
    lines.append(f"element vertex {len(pts)}")
    lines += [f"property double {k}" for k in ("x", "y", "z")]
    if has_n:
        lines += [f"property double {k}" for k in ("nx", "ny", "nz")]
    if faces is not None:
        lines.append(f"element face {len(faces)}")
        lines.append("property list uchar int vertex_indices")
    lines.append("end_header")
    rows = np.hstack([pts, cloud.normals]) if has_n else pts
    lines += [" ".join(_fmt(v) for v in row) for row in rows]
    if faces is not None:
        lines += [f"{len(f)} " + " ".join(str(int(i)) for i in f) for f in faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path, with_faces: bool = False):
    """Read an ASCII PLY written by :func:`write_ply` (or any x,y,z[,nx,ny,nz] file)."""
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    elements = []  # [name, count, [props]]
    i = 1
    while True:
        if i >= len(text):
            raise ValueError(f"{path}: missing end_header")
        tok = text[i].split()
        i += 1
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise ValueError(f"{path}: only ascii PLY is supported")
        elif tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            elements[-1][2].append(tok[-1])
        elif tok[0] == "end_header":
            break
    points = normals = None
    faces = []
    for name, count, props in elements:
        body = text[i:i + count]
        i += count
        if name == "vertex":
            data = np.array([[float(v) for v in row.split()] for row in body],
                            dtype=np.float64).reshape(count, len(props))
            col = {p: k for k, p in enumerate(props)}
            points = data[:, [col["x"], col["y"], col["z"]]]
            if {"nx", "ny", "nz"} <= col.keys():
                normals = data[:, [col["nx"], col["ny"], col["nz"]]]
        elif name == "face":
            faces = [[int(v) for v in row.split()[1:]] for row in body]
    if points is None:
        raise ValueError(f"{path}: no vertex element")
    cloud = PointCloud(points, normals)
    if with_faces:
        return cloud, np.array(faces, dtype=np.int64).reshape(-1, 3) if faces else np.zeros((0, 3), np.int64)
    return cloud


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_json(path):
    return json.loads(Path(path).read_text())
