import numpy as np
import pytest

from lidarplace import container, errors
from lidarplace.errors import FormatError, LidarPlaceError


def test_round_trip_all_dtypes(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "a": rng.normal(size=(3, 4)), "b": rng.normal(size=5).astype(np.float32),
        "c": rng.normal(size=2).astype(np.float16), "d": rng.integers(-128, 128, 7).astype(np.int8),
        "e": rng.integers(-9, 9, (2, 2)).astype(np.int32), "f": np.arange(3, dtype=np.int64),
        "g": np.arange(4, dtype=np.uint8), "empty": np.zeros((0, 3), np.float32),
    }
    container.save(tmp_path / "x.bin", b"TEST", {"k": [1, "two"]}, tensors)
    meta, back = container.load(tmp_path / "x.bin", b"TEST")
    assert meta == {"k": [1, "two"]}
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape and back[k].tobytes() == v.tobytes()


def test_big_endian_input_stored_little(tmp_path):
    v = np.arange(3, dtype=">f4")
    blob = container.dumps(b"TEST", {}, {"v": v})
    _, back = container.loads(b"TEST", blob)
    assert back["v"].tolist() == [0, 1, 2]


def test_bad_files():
    blob = container.dumps(b"TEST", {}, {"v": np.ones(4)})
    with pytest.raises(FormatError):
        container.loads(b"OTHR", blob)
    with pytest.raises(FormatError):
        container.loads(b"TEST", blob[:-3])
    with pytest.raises(FormatError):
        container.loads(b"TEST", blob[:6])
    with pytest.raises(FormatError):
        container.dumps(b"TEST", {}, {"s": np.array(["x"])})


def test_exit_codes_distinct():
    classes = [c for c in vars(errors).values()
               if isinstance(c, type) and issubclass(c, LidarPlaceError)]
    codes = [c.exit_code for c in classes]
    assert len(codes) == len(set(codes))
    assert all(c not in (0, 2, 3) for c in codes)
