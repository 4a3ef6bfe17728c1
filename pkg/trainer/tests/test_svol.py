import json

import numpy as np
import pytest

from fcntrainer.svol import read_svol, write_svol


def test_roundtrip_f32(tmp_path):
    rng = np.random.default_rng(0)
    data = rng.random((5, 4, 3)).astype(np.float32)
    path = tmp_path / "a.svol"
    write_svol(path, data, spacing=(1.0, 1.0, 1.5))
    back, spacing = read_svol(path)
    assert np.array_equal(back, data)
    assert spacing == (1.0, 1.0, 1.5)


def test_roundtrip_u8(tmp_path):
    data = (np.arange(24) % 2).astype(np.uint8).reshape(2, 3, 4)
    path = tmp_path / "b.svol"
    write_svol(path, data)
    back, _ = read_svol(path)
    assert np.array_equal(back, data)


def test_x_fastest_payload_order(tmp_path):
    # element k of the payload is voxel (x + nx*(y + ny*z))
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4, order="F")
    path = tmp_path / "c.svol"
    write_svol(path, data)
    header, payload = path.read_bytes().split(b"\n", 1)
    assert json.loads(header)["magic"] == "SVOL1"
    assert np.array_equal(np.frombuffer(payload, "<f4"), np.arange(24, dtype=np.float32))


def test_reads_handcrafted_file(tmp_path):
    header = b'{"magic":"SVOL1","dims":[2,1,1],"spacing":[1.0,1.0,1.0],"dtype":"u8"}\n'
    path = tmp_path / "d.svol"
    path.write_bytes(header + bytes([7, 9]))
    data, spacing = read_svol(path)
    assert data.shape == (2, 1, 1)
    assert data[0, 0, 0] == 7 and data[1, 0, 0] == 9


def test_truncated_rejected(tmp_path):
    data = np.zeros((4, 4, 4), dtype=np.float32)
    path = tmp_path / "e.svol"
    write_svol(path, data)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ValueError, match="truncated"):
        read_svol(path)
