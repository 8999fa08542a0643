import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from expansionnet.checkpoint import load_tensors, save_tensors
from expansionnet.errors import FormatError


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {
            "w": rng.normal(size=(3, 4)),
            "bias": rng.normal(size=5),
            "scalar": np.array(2.5),
            "tiny": np.array([5e-324, -0.0, np.nextafter(1.0, 2.0)]),
            "ünïcode": np.zeros((0, 2)),
        }
        save_tensors(tmp_path / "c.bin", tensors)
        loaded = load_tensors(tmp_path / "c.bin")
        assert list(loaded) == list(tensors)
        for k, v in tensors.items():
            assert loaded[k].shape == v.shape
            assert loaded[k].tobytes() == v.tobytes()

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=4), elements=st.floats(allow_nan=False)))
    def test_any_array(self, tmp_path_factory, arr):
        path = tmp_path_factory.mktemp("ck") / "a.bin"
        save_tensors(path, {"x": arr})
        assert load_tensors(path)["x"].tobytes() == arr.tobytes()

    def test_header_layout(self, tmp_path):
        save_tensors(tmp_path / "h.bin", {"ab": np.array([[1.0, 2.0]])})
        raw = (tmp_path / "h.bin").read_bytes()
        expected = (
            b"EXPN"
            + struct.pack("<II", 1, 1)
            + struct.pack("<I", 2)
            + b"ab"
            + struct.pack("<I", 2)
            + struct.pack("<2Q", 1, 2)
            + struct.pack("<2d", 1.0, 2.0)
        )
        assert raw == expected

    def test_bad_magic(self, tmp_path):
        (tmp_path / "b.bin").write_bytes(b"XXXX" + bytes(8))
        with pytest.raises(FormatError) as info:
            load_tensors(tmp_path / "b.bin")
        assert info.value.offset == 0

    def test_bad_version(self, tmp_path):
        (tmp_path / "v.bin").write_bytes(b"EXPN" + struct.pack("<II", 2, 0))
        with pytest.raises(FormatError) as info:
            load_tensors(tmp_path / "v.bin")
        assert info.value.offset == 4

    def test_truncated(self, tmp_path):
        save_tensors(tmp_path / "t.bin", {"w": np.ones(4)})
        raw = (tmp_path / "t.bin").read_bytes()
        (tmp_path / "t.bin").write_bytes(raw[:-1])
        with pytest.raises(FormatError, match="truncated"):
            load_tensors(tmp_path / "t.bin")

    def test_trailing_bytes(self, tmp_path):
        save_tensors(tmp_path / "x.bin", {"w": np.ones(2)})
        with open(tmp_path / "x.bin", "ab") as fh:
            fh.write(b"\0")
        with pytest.raises(FormatError, match="trailing"):
            load_tensors(tmp_path / "x.bin")
