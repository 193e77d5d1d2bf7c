import json
import struct

import numpy as np
import pytest

from dynedit.archive import MAGIC, list_entries, read_archive, write_archive


def test_round_trip(tmp_path):
    path = tmp_path / "data.naa"
    arrays = {
        "a": np.arange(12, dtype=np.float64).reshape(3, 4),
        "nested/b": np.ones((2, 2, 2)),
        "scalar-ish": np.array([3.5]),
    }
    write_archive(path, arrays)
    loaded = read_archive(path)
    assert list(loaded) == list(arrays)
    for name, arr in arrays.items():
        assert loaded[name].dtype == np.float32
        np.testing.assert_array_equal(loaded[name], arr.astype(np.float32))


def test_header_is_json_text_with_names_and_shapes(tmp_path):
    path = tmp_path / "data.naa"
    write_archive(path, {"x": np.zeros((4, 5))})
    raw = path.read_bytes()
    assert raw[: len(MAGIC)] == MAGIC
    (header_len,) = struct.unpack("<I", raw[len(MAGIC): len(MAGIC) + 4])
    header = json.loads(raw[len(MAGIC) + 4: len(MAGIC) + 4 + header_len].decode("utf-8"))
    assert header["names"] == ["x"]
    assert header["shapes"]["x"] == [4, 5]
    payload = raw[len(MAGIC) + 4 + header_len:]
    assert len(payload) == 4 * 5 * 4  # little-endian float32
    np.testing.assert_array_equal(np.frombuffer(payload, dtype="<f4"), np.zeros(20))


def test_payload_is_little_endian_float32(tmp_path):
    path = tmp_path / "data.naa"
    write_archive(path, {"v": np.array([1.0, -2.0, 0.5])})
    raw = path.read_bytes()
    assert raw[-12:] == struct.pack("<3f", 1.0, -2.0, 0.5)


def test_list_entries(tmp_path):
    path = tmp_path / "data.naa"
    write_archive(path, {"b": np.zeros(2), "a": np.zeros(3)})
    assert list_entries(path) == ["b", "a"]


def test_rejects_non_archive(tmp_path):
    path = tmp_path / "not.naa"
    path.write_bytes(b"garbage!")
    with pytest.raises(ValueError, match="not a named-array archive"):
        read_archive(path)


def test_rejects_empty_and_nonfinite(tmp_path):
    with pytest.raises(ValueError):
        write_archive(tmp_path / "e.naa", {})
    with pytest.raises(ValueError, match="non-finite"):
        write_archive(tmp_path / "n.naa", {"x": np.array([np.nan])})


def test_truncated_archive_detected(tmp_path):
    path = tmp_path / "data.naa"
    write_archive(path, {"x": np.zeros(10)})
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError, match="truncated"):
        read_archive(path)
