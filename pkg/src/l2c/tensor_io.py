"""Binary tensor files and JSON configuration documents.

Tensor file layout (little-endian)::

    magic  8 bytes  b"L2CTENS0"
    dtype  u8       0 = f32, 1 = f64
    ndim   u32      1..4
    dims   ndim x u64
    data   row-major scalars

f32 payloads are widened to f64 on read unless ``keep_dtype`` is set.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .distribution import TargetStats

MAGIC = b"L2CTENS0"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_U64_MAX = 2**64 - 1


class TensorFormatError(ValueError):
    pass


class BadMagicError(TensorFormatError):
    pass


class UnknownDtypeError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


def encode_tensor(tensor) -> bytes:
    arr = np.asarray(tensor)
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float64)
    if arr.size == 0:
        raise ValueError("cannot write an empty tensor")
    if not 1 <= arr.ndim <= 4:
        raise ValueError(f"ndim must be in [1, 4], got {arr.ndim}")
    if any(d > _U64_MAX for d in arr.shape):
        raise OverflowError("dimension does not fit in u64")
    code = _CODES[arr.dtype]
    header = MAGIC + struct.pack("<BI", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes(order="C")
    return header + payload


def decode_tensor(buf: bytes, keep_dtype: bool = False) -> np.ndarray:
    if len(buf) < 8 or buf[:8] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:8]!r}")
    if len(buf) < 13:
        raise TruncatedPayloadError("truncated header")
    code, ndim = struct.unpack_from("<BI", buf, 8)
    if code not in _DTYPES:
        raise UnknownDtypeError(f"unknown dtype code {code}")
    if not 1 <= ndim <= 4:
        raise TensorFormatError(f"ndim {ndim} outside [1, 4]")
    off = 13 + 8 * ndim
    if len(buf) < off:
        raise TruncatedPayloadError("truncated header")
    dims = struct.unpack_from(f"<{ndim}Q", buf, 13)
    dt = _DTYPES[code]
    count = math.prod(dims)
    need = off + count * dt.itemsize
    if len(buf) < need:
        raise TruncatedPayloadError(f"payload has {len(buf) - off} bytes, header declares {count * dt.itemsize}")
    if len(buf) > need:
        raise TensorFormatError(f"{len(buf) - need} trailing bytes after payload")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(dims)
    if keep_dtype:
        return arr.astype(dt.newbyteorder("="), copy=True)
    return arr.astype(np.float64)


def write_tensor(path, tensor) -> None:
    path = Path(path)
    if not path.parent.exists():
        raise FileNotFoundError(f"directory {path.parent} does not exist")
    path.write_bytes(encode_tensor(tensor))


def read_tensor(path, keep_dtype: bool = False) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes(), keep_dtype=keep_dtype)


DEFAULT_WEIGHTS = (1.0, 0.25, 0.25, 0.35)
DEFAULT_RANGES = {
    "scale": (1.0, 60.0),
    "temperature": (0.5, 2.0),
    "smoothing": (0.0, 0.05),
    "bias": (-0.10, 0.10),
}
DEFAULT_POINTS = {"temperature": 16, "smoothing": 11, "bias": 21}
_RANGE_ALIASES = {"a": "scale", "alpha": "temperature", "epsilon": "smoothing", "eps": "smoothing", "b": "bias"}


@dataclass(frozen=True)
class StatsConfig:
    target_stats: TargetStats | None = None
    objective_weights: tuple[float, float, float, float] = DEFAULT_WEIGHTS
    search_ranges: dict = field(default_factory=lambda: dict(DEFAULT_RANGES))
    entropy_tolerance: float = 0.02
    sweep_points: dict = field(default_factory=lambda: dict(DEFAULT_POINTS))
    max_bisection_iters: int = 60

    def __post_init__(self):
        w = self.objective_weights
        if len(w) != 4:
            raise ValueError("objective_weights needs exactly 4 entries")
        if any(x < 0 for x in w):
            raise ValueError(f"negative objective weight in {w}")
        if not any(x > 0 for x in w):
            raise ValueError("objective weights are all zero")
        for name, (lo, hi) in self.search_ranges.items():
            if lo > hi:
                raise ValueError(f"inverted range for {name}: [{lo}, {hi}]")
        if not self.entropy_tolerance > 0:
            raise ValueError("entropy_tolerance must be positive")
        lo_a = self.search_ranges["scale"][0]
        lo_t = self.search_ranges["temperature"][0]
        if lo_a <= 0 or lo_t <= 0:
            raise ValueError("scale and temperature ranges must be positive")
        e_lo, e_hi = self.search_ranges["smoothing"]
        if e_lo < 0 or e_hi > 1:
            raise ValueError("smoothing range must lie within [0, 1]")
        for name, n in self.sweep_points.items():
            if n < 1:
                raise ValueError(f"sweep_points[{name}] must be >= 1")

    def with_target(self, target: TargetStats) -> "StatsConfig":
        return replace(self, target_stats=target)

    def to_dict(self) -> dict:
        d = {
            "objective_weights": list(self.objective_weights),
            "search_ranges": {k: list(v) for k, v in self.search_ranges.items()},
            "entropy_tolerance": self.entropy_tolerance,
            "sweep_points": dict(self.sweep_points),
            "max_bisection_iters": self.max_bisection_iters,
        }
        if self.target_stats is not None:
            d["target_stats"] = self.target_stats.to_dict()
        return d


def parse_stats_config(doc: dict) -> StatsConfig:
    if not isinstance(doc, dict):
        raise ValueError("config document must be a JSON object")
    target = doc.get("target_stats")
    ranges = dict(DEFAULT_RANGES)
    for key, val in (doc.get("search_ranges") or {}).items():
        name = _RANGE_ALIASES.get(key, key)
        if name not in DEFAULT_RANGES:
            raise ValueError(f"unknown search range {key!r}")
        lo, hi = (float(x) for x in val)
        ranges[name] = (lo, hi)
    points = dict(DEFAULT_POINTS)
    for key, val in (doc.get("sweep_points") or {}).items():
        name = _RANGE_ALIASES.get(key, key)
        if name not in DEFAULT_POINTS:
            raise ValueError(f"unknown sweep {key!r}")
        points[name] = int(val)
    return StatsConfig(
        target_stats=TargetStats.from_dict(target) if target is not None else None,
        objective_weights=tuple(float(x) for x in doc.get("objective_weights", DEFAULT_WEIGHTS)),
        search_ranges=ranges,
        entropy_tolerance=float(doc.get("entropy_tolerance", 0.02)),
        sweep_points=points,
        max_bisection_iters=int(doc.get("max_bisection_iters", 60)),
    )


def read_stats_config(path) -> StatsConfig:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    return parse_stats_config(doc)


def read_target_stats(path) -> TargetStats:
    """Accepts either a bare statistics object or a config with ``target_stats``."""
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    if "target_stats" in doc:
        doc = doc["target_stats"]
    return TargetStats.from_dict(doc)


def dump_json(path, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def write_stats_config(path, config: StatsConfig) -> None:
    dump_json(path, config.to_dict())
