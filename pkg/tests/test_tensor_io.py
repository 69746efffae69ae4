import json
import struct

import numpy as np
import pytest

from l2c.distribution import TargetStats
from l2c.tensor_io import (
    BadMagicError,
    StatsConfig,
    TensorFormatError,
    TruncatedPayloadError,
    UnknownDtypeError,
    encode_tensor,
    read_stats_config,
    read_tensor,
    write_stats_config,
    write_tensor,
)


def test_2x2_f32_layout_and_roundtrip(tmp_path):
    x = np.array([[1, 2], [3, 4]], dtype=np.float32)
    p = tmp_path / "a.l2c"
    write_tensor(p, x)
    raw = p.read_bytes()
    assert len(raw) == 8 + 1 + 4 + 16 + 16
    assert raw[:8] == b"L2CTENS0"
    assert raw[8] == 0
    assert struct.unpack("<I", raw[9:13]) == (2,)
    assert struct.unpack("<2Q", raw[13:29]) == (2, 2)
    assert np.frombuffer(raw[29:], "<f4").tolist() == [1, 2, 3, 4]
    back = read_tensor(p)
    assert back.dtype == np.float64
    np.testing.assert_array_equal(back, [[1, 2], [3, 4]])


def test_zero_scalar_tensor(tmp_path):
    p = tmp_path / "z.l2c"
    write_tensor(p, np.zeros((1, 1)))
    np.testing.assert_array_equal(read_tensor(p), [[0.0]])


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_random_grid_bytewise_roundtrip(tmp_path, rng, dtype):
    x = rng.standard_normal((24, 24, 8)).astype(dtype)
    p1, p2 = tmp_path / "1.l2c", tmp_path / "2.l2c"
    write_tensor(p1, x)
    y = read_tensor(p1, keep_dtype=True)
    assert y.dtype == dtype
    assert y.tobytes() == x.tobytes()
    write_tensor(p2, y)
    assert p1.read_bytes() == p2.read_bytes()
    # widened values are exact
    np.testing.assert_array_equal(read_tensor(p1), x.astype(np.float64))


def test_special_values_roundtrip(tmp_path):
    x = np.array([np.inf, -np.inf, -0.0, 5e-324, np.nan])
    p = tmp_path / "s.l2c"
    write_tensor(p, x)
    assert read_tensor(p).tobytes() == x.tobytes()


def test_bad_magic(tmp_path):
    p = tmp_path / "b.l2c"
    write_tensor(p, np.ones(3))
    p.write_bytes(b"XXXXXXXX" + p.read_bytes()[8:])
    with pytest.raises(BadMagicError):
        read_tensor(p)


def test_truncated_payload(tmp_path):
    p = tmp_path / "t.l2c"
    write_tensor(p, np.arange(10.0))
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(TruncatedPayloadError):
        read_tensor(p)


def test_trailing_bytes_rejected(tmp_path):
    p = tmp_path / "t.l2c"
    write_tensor(p, np.arange(4.0))
    p.write_bytes(p.read_bytes() + b"\0" * 8)
    with pytest.raises(TensorFormatError):
        read_tensor(p)


def test_unknown_dtype(tmp_path):
    raw = bytearray(encode_tensor(np.ones(2)))
    raw[8] = 7
    p = tmp_path / "d.l2c"
    p.write_bytes(bytes(raw))
    with pytest.raises(UnknownDtypeError):
        read_tensor(p)


@pytest.mark.parametrize("shape", [(), (1, 1, 1, 1, 1), (0, 3)])
def test_invalid_shapes_rejected(tmp_path, shape):
    with pytest.raises(ValueError):
        write_tensor(tmp_path / "x.l2c", np.zeros(shape))


def test_missing_parent_dir(tmp_path):
    with pytest.raises(FileNotFoundError):
        write_tensor(tmp_path / "nope" / "x.l2c", np.ones(2))


def _config(tmp_path, doc):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(doc))
    return read_stats_config(p)


def test_empty_config_gives_defaults(tmp_path):
    cfg = _config(tmp_path, {})
    assert cfg.objective_weights == (1.0, 0.25, 0.25, 0.35)
    assert cfg.search_ranges == {
        "scale": (1.0, 60.0),
        "temperature": (0.5, 2.0),
        "smoothing": (0.0, 0.05),
        "bias": (-0.10, 0.10),
    }
    assert cfg.entropy_tolerance == 0.02
    assert cfg.target_stats is None


def test_negative_tolerance_rejected(tmp_path):
    with pytest.raises(ValueError):
        _config(tmp_path, {"entropy_tolerance": -1})


def test_scale_range_override(tmp_path):
    cfg = _config(tmp_path, {"search_ranges": {"a": [10, 60]}})
    assert cfg.search_ranges["scale"] == (10.0, 60.0)
    assert cfg.search_ranges["temperature"] == (0.5, 2.0)
    assert cfg.objective_weights == (1.0, 0.25, 0.25, 0.35)


@pytest.mark.parametrize("doc", [
    {"objective_weights": [1, -0.1, 0, 0]},
    {"search_ranges": {"bias": [0.1, -0.1]}},
    {"search_ranges": {"bogus": [0, 1]}},
    {"target_stats": {"mean_entropy": 2, "mean_conf": 0, "p95_conf": 0, "p95_entropy": 0}},
])
def test_invalid_configs(tmp_path, doc):
    with pytest.raises(ValueError):
        _config(tmp_path, doc)


def test_parse_error(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ValueError):
        read_stats_config(p)


def test_config_roundtrip(tmp_path):
    cfg = StatsConfig(target_stats=TargetStats(0.4, 0.2, 0.5, 0.6), entropy_tolerance=0.01)
    p = tmp_path / "c.json"
    write_stats_config(p, cfg)
    assert read_stats_config(p) == cfg
