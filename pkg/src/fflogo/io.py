"""ASCII readers and writers for PLY, PCD and XYZ point clouds."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from fflogo.errors import CloudFormatError
from fflogo.pointcloud import PointCloud

FORMATS = ("ply-ascii", "pcd-ascii", "xyz")


def infer_format(path: str | Path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return "ply-ascii"
    if suffix == ".pcd":
        return "pcd-ascii"
    if suffix in (".xyz", ".txt", ".pts"):
        return "xyz"
    raise CloudFormatError(f"cannot infer cloud format from suffix {suffix!r}", str(path))


def load_cloud(path: str | Path, format: str | None = None) -> PointCloud:
    """Read a cloud; normals are kept (and renormalized) when nx/ny/nz are present.

    Raises:
        FileNotFoundError: the path does not exist.
        CloudFormatError: malformed header or row (the message names the line),
            or a file without points.
    """
    path = Path(path)
    fmt = format or infer_format(path)
    if fmt not in FORMATS:
        raise CloudFormatError(f"unknown format {fmt!r}; expected one of {FORMATS}", str(path))
    lines = path.read_text().splitlines()
    if fmt == "xyz":
        pts, nrm = _parse_xyz(lines, str(path))
    elif fmt == "ply-ascii":
        pts, nrm = _parse_ply(lines, str(path))
    else:
        pts, nrm = _parse_pcd(lines, str(path))
    if len(pts) == 0:
        raise CloudFormatError("cloud is empty", str(path))
    if nrm is None:
        return PointCloud(pts)
    norms = np.linalg.norm(nrm, axis=1)
    valid = norms > 0
    nrm[valid] /= norms[valid, None]
    nrm[~valid] = (0.0, 0.0, 1.0)
    return PointCloud(pts, nrm, valid)


def _floats(tokens: list[str], path: str, lineno: int) -> list[float]:
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise CloudFormatError(f"non-numeric value in row: {' '.join(tokens)!r}", path, lineno) from None


def _rows_to_arrays(rows, names, path):
    data = np.asarray(rows, dtype=np.float64).reshape(-1, len(names))
    col = {n: i for i, n in enumerate(names)}
    missing = [c for c in ("x", "y", "z") if c not in col]
    if missing:
        raise CloudFormatError(f"missing coordinate fields {missing}", path)
    pts = data[:, [col["x"], col["y"], col["z"]]]
    if not np.all(np.isfinite(pts)):
        raise CloudFormatError("non-finite coordinates", path)
    nrm = None
    if all(c in col for c in ("nx", "ny", "nz")):
        nrm = data[:, [col["nx"], col["ny"], col["nz"]]].copy()
    return pts, nrm


def _parse_xyz(lines: list[str], path: str):
    rows = []
    width = None
    for lineno, line in enumerate(lines, start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        tokens = s.replace(",", " ").split()
        vals = _floats(tokens, path, lineno)
        if len(vals) not in (3, 6):
            raise CloudFormatError(f"expected 3 or 6 columns, got {len(vals)}", path, lineno)
        if width is None:
            width = len(vals)
        elif len(vals) != width:
            raise CloudFormatError(f"expected {width} columns, got {len(vals)}", path, lineno)
        rows.append(vals)
    names = ["x", "y", "z"] if width in (None, 3) else ["x", "y", "z", "nx", "ny", "nz"]
    return _rows_to_arrays(rows, names, path)


def _parse_ply(lines: list[str], path: str):
    if not lines or lines[0].strip() != "ply":
        raise CloudFormatError("missing 'ply' magic", path, 1)
    names: list[str] = []
    n_vertex = None
    in_vertex = False
    header_end = None
    for lineno, line in enumerate(lines[1:], start=2):
        tokens = line.split()
        if not tokens:
            continue
        key = tokens[0]
        if key == "format":
            if len(tokens) < 2 or tokens[1] != "ascii":
                raise CloudFormatError(f"only ascii PLY is supported, got {line.strip()!r}", path, lineno)
        elif key == "element":
            if len(tokens) != 3:
                raise CloudFormatError(f"malformed element line {line.strip()!r}", path, lineno)
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                try:
                    n_vertex = int(tokens[2])
                except ValueError:
                    raise CloudFormatError(f"bad vertex count {tokens[2]!r}", path, lineno) from None
        elif key == "property":
            if in_vertex:
                if tokens[1] == "list":
                    raise CloudFormatError("list properties on vertices are not supported", path, lineno)
                names.append(tokens[-1])
        elif key == "end_header":
            header_end = lineno
            break
        elif key in ("comment", "obj_info"):
            continue
        else:
            raise CloudFormatError(f"unexpected header line {line.strip()!r}", path, lineno)
    if header_end is None:
        raise CloudFormatError("missing end_header", path)
    if n_vertex is None:
        raise CloudFormatError("no vertex element declared", path)
    rows = []
    lineno = header_end
    for line in lines[header_end:]:
        lineno += 1
        if len(rows) == n_vertex:
            break
        tokens = line.split()
        if not tokens:
            continue
        vals = _floats(tokens, path, lineno)
        if len(vals) != len(names):
            raise CloudFormatError(f"expected {len(names)} values, got {len(vals)}", path, lineno)
        rows.append(vals)
    if len(rows) != n_vertex:
        raise CloudFormatError(f"header declares {n_vertex} vertices, found {len(rows)}", path)
    return _rows_to_arrays(rows, names, path)


def _parse_pcd(lines: list[str], path: str):
    fields: list[str] = []
    counts: list[int] | None = None
    n_points = None
    data_line = None
    for lineno, line in enumerate(lines, start=1):
        tokens = line.split()
        if not tokens or tokens[0].startswith("#"):
            continue
        key = tokens[0].upper()
        if key == "FIELDS":
            fields = tokens[1:]
        elif key == "COUNT":
            counts = [int(c) for c in tokens[1:]]
        elif key == "POINTS":
            try:
                n_points = int(tokens[1])
            except (IndexError, ValueError):
                raise CloudFormatError(f"bad POINTS line {line.strip()!r}", path, lineno) from None
        elif key == "DATA":
            if len(tokens) < 2 or tokens[1].lower() != "ascii":
                raise CloudFormatError(f"only ascii PCD is supported, got {line.strip()!r}", path, lineno)
            data_line = lineno
            break
        elif key in ("VERSION", "SIZE", "TYPE", "WIDTH", "HEIGHT", "VIEWPOINT"):
            continue
        else:
            raise CloudFormatError(f"unexpected header line {line.strip()!r}", path, lineno)
    if data_line is None:
        raise CloudFormatError("missing DATA line", path)
    if not fields:
        raise CloudFormatError("missing FIELDS line", path)
    names: list[str] = []
    for name, c in zip(fields, counts or [1] * len(fields)):
        names.extend([name] if c == 1 else [f"{name}_{i}" for i in range(c)])
    names = [{"normal_x": "nx", "normal_y": "ny", "normal_z": "nz"}.get(n, n) for n in names]
    rows = []
    for lineno, line in enumerate(lines[data_line:], start=data_line + 1):
        tokens = line.split()
        if not tokens:
            continue
        vals = _floats(tokens, path, lineno)
        if len(vals) != len(names):
            raise CloudFormatError(f"expected {len(names)} values, got {len(vals)}", path, lineno)
        rows.append(vals)
    if n_points is not None and len(rows) != n_points:
        raise CloudFormatError(f"header declares {n_points} points, found {len(rows)}", path)
    return _rows_to_arrays(rows, names, path)


def save_cloud(cloud: PointCloud, path: str | Path, format: str | None = None) -> None:
    """Write a cloud (with normals if present) in an ASCII format."""
    path = Path(path)
    fmt = format or infer_format(path)
    data = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    body = "\n".join(" ".join(repr(float(v)) for v in row) for row in data)
    with_normals = cloud.normals is not None
    if fmt == "xyz":
        header = ""
    elif fmt == "ply-ascii":
        props = ["x", "y", "z"] + (["nx", "ny", "nz"] if with_normals else [])
        header = "ply\nformat ascii 1.0\n"
        header += f"element vertex {len(cloud)}\n"
        header += "".join(f"property double {p}\n" for p in props)
        header += "end_header\n"
    elif fmt == "pcd-ascii":
        props = ["x", "y", "z"] + (["normal_x", "normal_y", "normal_z"] if with_normals else [])
        header = (
            "VERSION .7\n"
            f"FIELDS {' '.join(props)}\n"
            f"SIZE {' '.join('8' for _ in props)}\n"
            f"TYPE {' '.join('F' for _ in props)}\n"
            f"COUNT {' '.join('1' for _ in props)}\n"
            f"WIDTH {len(cloud)}\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\n"
            f"POINTS {len(cloud)}\nDATA ascii\n"
        )
    else:
        raise CloudFormatError(f"unknown format {fmt!r}", str(path))
    path.write_text(header + body + ("\n" if body else ""))
