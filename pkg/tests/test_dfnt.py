import struct

import numpy as np
import pytest

from deepfusion import dfnt


@pytest.mark.parametrize("shape", [(3,), (4, 5), (2, 3, 4), (2, 1, 1, 3)])
def test_round_trip(tmp_path, rng, shape):
    x = rng.normal(size=shape).astype(np.float32)
    dfnt.write(tmp_path / "x.dfnt", x)
    y = dfnt.read(tmp_path / "x.dfnt")
    assert y.dtype == np.float32 and y.shape == shape
    np.testing.assert_array_equal(x, y)


def test_layout(tmp_path):
    dfnt.write(tmp_path / "x.dfnt", np.arange(6).reshape(2, 3))
    raw = (tmp_path / "x.dfnt").read_bytes()
    assert raw[:4] == b"DFNT"
    assert struct.unpack("<4I", raw[4:20]) == (1, 2, 2, 3)
    assert np.frombuffer(raw[20:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


def test_rejects_bad_files(tmp_path):
    p = tmp_path / "bad.dfnt"
    p.write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(dfnt.DFNTError):
        dfnt.read(p)
    dfnt.write(p, np.zeros((2, 2)))
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(dfnt.DFNTError):
        dfnt.read(p)
