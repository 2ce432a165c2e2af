"""File formats: text/PLY point clouds, the ``DGSQ`` sequence container, graph and report files.

DGSQ layout (little-endian)::

    b"DGSQ"  u32 version (=1)  u32 frame_count
    frame_count x ( u32 point_count, point_count x 3 f32 )

Graph files are JSON objects with ``format == "defgraph-graph"`` and
``version == 1``; see :func:`write_trajectories` for the keys.
"""

from __future__ import annotations

import json
import re
import struct
from pathlib import Path

import numpy as np

from .core import DefGraphError, DeformationGraph, InvalidArgument

MAGIC = b"DGSQ"
SEQ_VERSION = 1
GRAPH_FORMAT = "defgraph-graph"
GRAPH_VERSION = 1
REPORT_FORMAT = "defgraph-report"


class FormatError(DefGraphError):
    """Malformed file content."""


class BadMagic(FormatError):
    pass


class Truncated(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class SchemaError(FormatError):
    pass


class ParseError(FormatError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


# -- clouds ------------------------------------------------------------------

def parse_text_cloud(text):
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(f"expected 3 coordinates, got {len(parts)}", lineno)
        try:
            xyz = [float(p) for p in parts]
        except ValueError:
            raise ParseError(f"non-numeric coordinate in {line!r}", lineno) from None
        if not all(np.isfinite(xyz)):
            raise ParseError("non-finite coordinate", lineno)
        rows.append(xyz)
    if not rows:
        raise FormatError("cloud file contains no points")
    return np.array(rows, dtype=np.float64)


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _ply_header(data):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise FormatError("not a PLY file")
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    fmt, elements = None, []
    for line in lines[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format" and len(tok) >= 2:
            fmt = tok[1]
        elif tok[0] == "element" and len(tok) == 3:
            try:
                elements.append([tok[1], int(tok[2]), []])
            except ValueError:
                raise FormatError(f"bad element count in {line!r}") from None
            if elements[-1][1] < 0:
                raise FormatError("negative element count")
        elif tok[0] == "property" and elements:
            if len(tok) == 5 and tok[1] == "list":
                if tok[2] not in _PLY_TYPES or tok[3] not in _PLY_TYPES:
                    raise FormatError(f"unknown PLY type in {line!r}")
                elements[-1][2].append((tok[4], "list", tok[2], tok[3]))
            elif len(tok) == 3 and tok[1] in _PLY_TYPES:
                elements[-1][2].append((tok[2], tok[1]))
            else:
                raise FormatError(f"bad property line {line!r}")
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise FormatError(f"unsupported PLY format {fmt!r}")
    return fmt, elements, body_start


def parse_ply(data):
    """Vertex positions from an ASCII or binary PLY; other elements are skipped."""
    fmt, elements, pos = _ply_header(data)
    if not any(e[0] == "vertex" for e in elements):
        raise FormatError("PLY has no vertex element")
    if fmt == "ascii":
        tokens = data[pos:].split()
        cursor = 0
        for name, count, props in elements:
            values = []
            for _ in range(count):
                row = []
                for prop in props:
                    if cursor >= len(tokens):
                        raise Truncated("PLY body ends early")
                    if prop[1] == "list":
                        n = int(float(tokens[cursor]))
                        cursor += 1 + n
                        continue
                    row.append(float(tokens[cursor]))
                    cursor += 1
                values.append(row)
            if name == "vertex":
                return _vertex_xyz(props, np.array(values, dtype=np.float64).reshape(count, -1))
        raise FormatError("PLY has no vertex element")
    endian = "<" if fmt == "binary_little_endian" else ">"
    for name, count, props in elements:
        if any(p[1] == "list" for p in props):
            if name == "vertex":
                raise FormatError("list properties on vertices are not supported")
            for _ in range(count):
                for prop in props:
                    if prop[1] == "list":
                        cdt = np.dtype(endian + _PLY_TYPES[prop[2]])
                        if pos + cdt.itemsize > len(data):
                            raise Truncated("PLY body ends early")
                        n = int(np.frombuffer(data, cdt, 1, pos)[0])
                        pos += cdt.itemsize + n * np.dtype(_PLY_TYPES[prop[3]]).itemsize
                    else:
                        pos += np.dtype(_PLY_TYPES[prop[1]]).itemsize
            continue
        dt = np.dtype([(p[0], endian + _PLY_TYPES[p[1]]) for p in props])
        size = dt.itemsize * count
        if pos + size > len(data):
            raise Truncated("PLY body ends early")
        if name == "vertex":
            arr = np.frombuffer(data, dt, count, pos)
            cols = np.stack([arr[p[0]].astype(np.float64) for p in props], axis=1) if props else np.zeros((count, 0))
            return _vertex_xyz(props, cols)
        pos += size
    raise FormatError("PLY has no vertex element")


def _vertex_xyz(props, cols):
    names = [p[0] for p in props]
    try:
        sel = [names.index(a) for a in "xyz"]
    except ValueError:
        raise FormatError("PLY vertices lack x, y, z") from None
    pts = np.ascontiguousarray(cols[:, sel], dtype=np.float64)
    if pts.shape[0] == 0:
        raise FormatError("PLY has no vertices")
    if not np.isfinite(pts).all():
        raise FormatError("PLY has non-finite vertex coordinates")
    return pts


def read_cloud(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DefGraphError(f"{path}: {exc.strerror or exc}") from exc
    try:
        if data.startswith(b"ply"):
            return parse_ply(data)
        return parse_text_cloud(data.decode("utf-8", errors="replace"))
    except FormatError as exc:
        err = type(exc)(f"{path}: {exc}")
        err.line = getattr(exc, "line", None)
        raise err from None


def write_cloud(path, cloud):
    """Text ``x y z`` lines, or binary PLY when the suffix is ``.ply``; coordinates as f32."""
    path = Path(path)
    pts = np.asarray(cloud, dtype=np.float32)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
        raise InvalidArgument("cloud must be a non-empty (N, 3) array")
    if path.suffix.lower() == ".ply":
        header = (f"ply\nformat binary_little_endian 1.0\nelement vertex {len(pts)}\n"
                  "property float x\nproperty float y\nproperty float z\nend_header\n").encode("ascii")
        path.write_bytes(header + pts.astype("<f4").tobytes())
    else:
        lines = "\n".join(" ".join(repr(float(v)) for v in row) for row in pts)
        path.write_text(lines + "\n")


# -- DGSQ sequences ----------------------------------------------------------

def encode_seq(frames):
    if len(frames) == 0:
        raise InvalidArgument("a sequence needs at least one frame")
    parts = [MAGIC, struct.pack("<II", SEQ_VERSION, len(frames))]
    for f in frames:
        arr = np.asarray(f, dtype="<f4")
        if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] == 0:
            raise InvalidArgument("every frame must be a non-empty (N, 3) array")
        parts.append(struct.pack("<I", arr.shape[0]))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_seq(data):
    """Parse DGSQ bytes into a list of ``(N_i, 3)`` float64 arrays."""
    if len(data) < 4:
        raise Truncated("file shorter than the magic number")
    if data[:4] != MAGIC:
        raise BadMagic(f"bad magic {data[:4]!r}")
    if len(data) < 12:
        raise Truncated("header truncated")
    version, count = struct.unpack_from("<II", data, 4)
    if version != SEQ_VERSION:
        raise VersionMismatch(f"unsupported DGSQ version {version}")
    if count == 0:
        raise FormatError("sequence has no frames")
    pos = 12
    frames = []
    for i in range(count):
        if pos + 4 > len(data):
            raise Truncated(f"frame {i} header truncated")
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if n == 0:
            raise FormatError(f"frame {i} has no points")
        size = 12 * n
        if pos + size > len(data):
            raise Truncated(f"frame {i} payload truncated")
        raw = np.frombuffer(data, "<f4", 3 * n, pos).reshape(n, 3)
        if not np.isfinite(raw).all():
            raise FormatError(f"frame {i} has non-finite coordinates")
        frames.append(raw.astype(np.float64))
        pos += size
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after last frame")
    return frames


def read_seq(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DefGraphError(f"{path}: {exc.strerror or exc}") from exc
    try:
        return decode_seq(data)
    except FormatError as exc:
        raise type(exc)(f"{path}: {exc}") from None


def write_seq(path, frames):
    Path(path).write_bytes(encode_seq(frames))


# -- graphs ------------------------------------------------------------------

def graph_to_dict(graph: DeformationGraph):
    def opt(a):
        return None if a is None else np.asarray(a).tolist()
    return {
        "format": GRAPH_FORMAT,
        "version": GRAPH_VERSION,
        "num_frames": graph.num_frames,
        "num_nodes": graph.num_nodes,
        "rest_nodes": graph.rest_nodes.tolist(),
        "radii": graph.radii.tolist(),
        "node_traj": graph.node_traj.tolist(),
        "node_index": opt(graph.node_index),
        "rotations": opt(graph.rotations),
        "translations": opt(graph.translations),
    }


_GRAPH_KEYS = ("format", "version", "num_frames", "num_nodes", "rest_nodes", "radii", "node_traj",
               "node_index", "rotations", "translations")


def graph_from_dict(d):
    if not isinstance(d, dict):
        raise SchemaError("graph file must hold a JSON object")
    missing = [k for k in _GRAPH_KEYS if k not in d]
    if missing:
        raise SchemaError(f"graph file is missing {missing}")
    if d["format"] != GRAPH_FORMAT:
        raise SchemaError(f"unexpected format {d['format']!r}")
    if d["version"] != GRAPH_VERSION:
        raise VersionMismatch(f"unsupported graph version {d['version']!r}")
    T, B = d["num_frames"], d["num_nodes"]
    try:
        rest = np.array(d["rest_nodes"], dtype=np.float64).reshape(B, 3)
        radii = np.array(d["radii"], dtype=np.float64).reshape(B)
        traj = np.array(d["node_traj"], dtype=np.float64).reshape(T, B, 3)
        index = None if d["node_index"] is None else np.array(d["node_index"], dtype=np.int64).reshape(B)
        rot = None if d["rotations"] is None else np.array(d["rotations"], dtype=np.float64).reshape(T, B, 3, 3)
        trans = None if d["translations"] is None else np.array(d["translations"], dtype=np.float64).reshape(T, B, 3)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"graph arrays do not match declared sizes: {exc}") from None
    if (rot is None) != (trans is None):
        raise SchemaError("rotations and translations must be both present or both null")
    try:
        return DeformationGraph(rest, radii, traj, node_index=index, rotations=rot, translations=trans)
    except InvalidArgument as exc:
        raise SchemaError(str(exc)) from None


def write_trajectories(path, graph: DeformationGraph):
    """Write every DeformationGraph field as JSON (floats kept at full precision)."""
    path = Path(path)
    try:
        path.write_text(json.dumps(graph_to_dict(graph)))
    except OSError as exc:
        raise DefGraphError(f"{path}: {exc.strerror or exc}") from exc


def read_trajectories(path) -> DeformationGraph:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except OSError as exc:
        raise DefGraphError(f"{path}: {exc.strerror or exc}") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from None
    try:
        return graph_from_dict(d)
    except FormatError as exc:
        raise type(exc)(f"{path}: {exc}") from None


# -- reports -----------------------------------------------------------------

def write_report(path, report, extra=None):
    d = {"format": REPORT_FORMAT, **report.to_dict(), **(extra or {})}
    Path(path).write_text(json.dumps(d, indent=2))


def read_report_dict(path):
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except OSError as exc:
        raise DefGraphError(f"{path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(d, dict) or d.get("format") != REPORT_FORMAT:
        raise SchemaError(f"{path}: not a {REPORT_FORMAT} file")
    return d


_SAFE_NAME = re.compile(r"[^A-Za-z0-9_.-]+")


def safe_name(name):
    return _SAFE_NAME.sub("_", name) or "method"
