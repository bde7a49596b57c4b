import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from drapenet import tensorfile
from drapenet.tensorfile import FormatError

arrays = st.one_of(
    hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, min_side=0, max_side=4)),
    hnp.arrays(np.int64, hnp.array_shapes(min_dims=0, max_dims=3, min_side=0, max_side=4)),
)


@given(st.dictionaries(st.text(min_size=1, max_size=8), arrays, max_size=4))
def test_round_trip(tensors):
    got, meta = tensorfile.loads(tensorfile.dumps(tensors, {"k": [1, 2]}))
    assert meta == {"k": [1, 2]} and list(got) == list(tensors)
    for name, arr in tensors.items():
        assert got[name].dtype == arr.dtype and got[name].shape == arr.shape
        assert got[name].tobytes() == arr.tobytes()  # NaN payloads included


def test_deterministic_bytes_and_file(tmp_path):
    t = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([1, 2], dtype=np.int32)}
    assert tensorfile.dumps(t, {"z": 1, "a": 2}) == tensorfile.dumps(t, {"a": 2, "z": 1})
    tensorfile.save(tmp_path / "x.drp", t)
    got, _ = tensorfile.load(tmp_path / "x.drp")
    assert got["b"].dtype == np.int64 and got["b"].tolist() == [1, 2]


def test_corrupt_inputs_raise():
    buf = tensorfile.dumps({"a": np.ones(4)}, {})
    with pytest.raises(FormatError):
        tensorfile.loads(b"NOTATENS" + buf[8:])
    with pytest.raises(FormatError):
        tensorfile.loads(buf[:-8])
    with pytest.raises(FormatError):
        tensorfile.loads(buf[:14])
    bad_version = buf[:8] + (2).to_bytes(4, "little") + buf[12:]
    with pytest.raises(FormatError):
        tensorfile.loads(bad_version)
    with pytest.raises(FormatError):
        tensorfile.dumps({"s": np.array(["x"])})
