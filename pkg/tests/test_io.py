import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from defgraph import io as dio
from defgraph.core import DefGraphError, DeformationGraph, InvalidArgument
from defgraph.evaluation import MetricsReport

f32 = st.floats(-1e3, 1e3, allow_nan=False, width=32)


def small_seqs():
    frame = st.integers(1, 20).flatmap(lambda n: arrays(np.float64, (n, 3), elements=f32))
    return st.lists(frame, min_size=1, max_size=4)


def test_cloud_round_trip(tmp_path, rng):
    pts = rng.normal(size=(100, 3))
    for name in ("c.xyz", "c.ply"):
        dio.write_cloud(tmp_path / name, pts)
        back = dio.read_cloud(tmp_path / name)
        assert np.array_equal(back, pts.astype(np.float32).astype(np.float64))


def test_cloud_errors(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# only a comment\n\n")
    with pytest.raises(dio.FormatError):
        dio.read_cloud(p)
    p.write_text("0 0 0\n1 2\n")
    with pytest.raises(dio.ParseError) as info:
        dio.read_cloud(p)
    assert info.value.line == 2 and "line 2" in str(info.value)
    with pytest.raises(DefGraphError):
        dio.read_cloud(tmp_path / "missing.txt")


def test_ascii_ply_ignores_other_elements(tmp_path):
    text = ("ply\nformat ascii 1.0\ncomment test\nelement vertex 3\nproperty float y\nproperty float x\n"
            "property float z\nproperty uchar red\nelement face 1\nproperty list uchar int vertex_indices\n"
            "end_header\n1 2 3 255\n4 5 6 0\n7 8 9 9\n3 0 1 2\n")
    (tmp_path / "a.ply").write_text(text)
    pts = dio.read_cloud(tmp_path / "a.ply")
    assert np.array_equal(pts, [[2, 1, 3], [5, 4, 6], [8, 7, 9]])


@given(small_seqs())
@settings(max_examples=50)
def test_seq_round_trip_bitwise(frames):
    data = dio.encode_seq(frames)
    back = dio.decode_seq(data)
    assert dio.encode_seq(back) == data
    for a, b in zip(frames, back):
        assert np.array_equal(a.astype(np.float32), b.astype(np.float32))


def test_seq_layout():
    data = dio.encode_seq([np.array([[1.0, 2.0, 3.0]])])
    assert data[:4] == b"DGSQ"
    assert struct.unpack("<III", data[4:16]) == (1, 1, 1)
    assert struct.unpack("<3f", data[16:]) == (1.0, 2.0, 3.0)


def test_seq_errors():
    good = dio.encode_seq([np.ones((2, 3))])
    with pytest.raises(dio.BadMagic):
        dio.decode_seq(b"XGSQ" + good[4:])
    with pytest.raises(dio.VersionMismatch):
        dio.decode_seq(good[:4] + struct.pack("<I", 2) + good[8:])
    with pytest.raises(dio.Truncated):
        dio.decode_seq(good[:-1])
    with pytest.raises(dio.FormatError):
        dio.decode_seq(b"DGSQ" + struct.pack("<II", 1, 0))
    with pytest.raises(InvalidArgument):
        dio.encode_seq([])


@given(st.binary(max_size=200))
@settings(max_examples=300)
def test_seq_reader_never_crashes(data):
    try:
        dio.decode_seq(data)
    except dio.FormatError:
        pass


@given(st.integers(0, 10**6))
@settings(max_examples=200)
def test_seq_mutations_structured(seed):
    rng = np.random.default_rng(seed)
    data = bytearray(dio.encode_seq([rng.normal(size=(3, 3)), rng.normal(size=(2, 3))]))
    for _ in range(rng.integers(1, 4)):
        op = rng.integers(3)
        if op == 0 and data:
            data[rng.integers(len(data))] = rng.integers(256)
        elif op == 1 and data:
            del data[rng.integers(len(data)):]
        else:
            data[rng.integers(len(data) + 1):0] = rng.bytes(int(rng.integers(1, 9)))
    try:
        dio.decode_seq(bytes(data))
    except dio.FormatError:
        pass


def _graph(rng, with_transforms=True):
    B, T = 6, 2
    rest = rng.random((B, 3))
    g = DeformationGraph(rest, rng.random(B) + 0.1, rng.random((T, B, 3)), node_index=np.arange(B))
    if with_transforms:
        g.rotations = np.tile(np.eye(3), (T, B, 1, 1))
        g.translations = rng.random((T, B, 3))
    return g


@pytest.mark.parametrize("with_transforms", [True, False])
def test_graph_round_trip(tmp_path, rng, with_transforms):
    g = _graph(rng, with_transforms)
    dio.write_trajectories(tmp_path / "g.json", g)
    back = dio.read_trajectories(tmp_path / "g.json")
    for name in ("rest_nodes", "radii", "node_traj", "node_index", "rotations", "translations"):
        a, b = getattr(g, name), getattr(back, name)
        assert (a is None and b is None) or np.array_equal(a, b)


def test_graph_schema_errors(tmp_path, rng):
    d = dio.graph_to_dict(_graph(rng))
    p = tmp_path / "g.json"
    for key in ("radii", "version"):
        bad = dict(d)
        del bad[key]
        p.write_text(json.dumps(bad))
        with pytest.raises(dio.SchemaError):
            dio.read_trajectories(p)
    p.write_text(json.dumps(dict(d, version=99)))
    with pytest.raises(dio.VersionMismatch):
        dio.read_trajectories(p)
    p.write_text(json.dumps(dict(d, num_nodes=7)))
    with pytest.raises(dio.SchemaError):
        dio.read_trajectories(p)
    p.write_text("{not json")
    with pytest.raises(dio.SchemaError):
        dio.read_trajectories(p)
    with pytest.raises(DefGraphError) as info:
        dio.write_trajectories(tmp_path / "no" / "dir" / "g.json", _graph(rng))
    assert "g.json" in str(info.value)


def test_report_round_trip(tmp_path):
    r = MetricsReport(0.01, 0.4, 0.9, 0.5, [0.01, 0.02])
    dio.write_report(tmp_path / "r.json", r, {"note": "x"})
    d = dio.read_report_dict(tmp_path / "r.json")
    assert MetricsReport.from_dict(d) == r and d["note"] == "x"
    (tmp_path / "bad.json").write_text("{}")
    with pytest.raises(dio.SchemaError):
        dio.read_report_dict(tmp_path / "bad.json")
