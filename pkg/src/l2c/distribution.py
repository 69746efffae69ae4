"""Softmax, smoothing and entropy statistics over categorical token distributions.

Rows are distributions over the K codebook entries. Every function accepts a
single row (shape ``(K,)``) or a grid (shape ``(N, K)``) and works along the
last axis. Computation is float64 throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

MIN_SUPPORT = 8
MAX_SUPPORT = 64


@dataclass(frozen=True)
class TokenStats:
    top1: float
    margin: float
    topk_mass: float
    tail_entropy: float
    norm_entropy: float
    top2: float
    k_u: int


@dataclass(frozen=True)
class TargetStats:
    mean_entropy: float
    mean_conf: float
    p95_conf: float
    p95_entropy: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.mean_entropy, self.mean_conf, self.p95_conf, self.p95_entropy)

    def to_dict(self) -> dict:
        return {
            "mean_entropy": self.mean_entropy,
            "mean_conf": self.mean_conf,
            "p95_conf": self.p95_conf,
            "p95_entropy": self.p95_entropy,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TargetStats":
        vals = {k: float(d[k]) for k in ("mean_entropy", "mean_conf", "p95_conf", "p95_entropy")}
        for k, v in vals.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"target statistic {k}={v} outside [0, 1]")
        return cls(**vals)


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax along the last axis (max-subtracted)."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    x = _as_f64(logits)
    if np.isnan(x).any():
        raise ValueError("NaN in logits")
    if not np.isfinite(x).all():
        raise ValueError("non-finite logits")
    z = x / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def label_smooth(probs, epsilon: float) -> np.ndarray:
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    p = _as_f64(probs)
    k = p.shape[-1]
    return (1.0 - epsilon) * p + epsilon / k


def _plogp(p: np.ndarray) -> np.ndarray:
    # 0 * log 0 := 0
    out = np.zeros_like(p)
    pos = p > 0
    out[pos] = p[pos] * np.log(p[pos])
    return out


def entropy(probs) -> np.ndarray:
    """Natural-log Shannon entropy along the last axis."""
    return -_plogp(_as_f64(probs)).sum(axis=-1)


def normalized_entropy(probs) -> np.ndarray | float:
    p = _as_f64(probs)
    k = p.shape[-1]
    if k < 2:
        raise ValueError("normalized entropy needs K >= 2")
    h = entropy(p) / math.log(k)
    h = np.clip(h, 0.0, 1.0)
    return float(h) if h.ndim == 0 else h


def adaptive_support_size(probs) -> np.ndarray | int:
    """Rounded perplexity clamped to [8, min(64, K)]."""
    p = _as_f64(probs)
    k = p.shape[-1]
    ppl = np.exp(entropy(p))
    ku = np.floor(ppl + 0.5)
    ku = np.clip(ku, min(MIN_SUPPORT, k), min(MAX_SUPPORT, k)).astype(np.int64)
    return int(ku) if ku.ndim == 0 else ku


def token_stats_arrays(probs) -> dict[str, np.ndarray]:
    """Vectorised per-row statistics for an ``(N, K)`` grid.

    Keys: top1, top2, margin, topk_mass, tail_entropy, norm_entropy, k_u.
    """
    p = np.atleast_2d(_as_f64(probs))
    n, k = p.shape
    if k < 2:
        raise ValueError("token statistics need K >= 2")
    rows = np.arange(n)
    kstar = np.argmax(p, axis=1)  # first index on ties
    top1 = p[rows, kstar]
    desc = -np.sort(-p, axis=1)
    top2 = desc[:, 1]
    ku = np.atleast_1d(adaptive_support_size(p))
    csum = np.cumsum(desc[:, :MAX_SUPPORT], axis=1)
    topk_mass = csum[rows, ku - 1]

    plogp = _plogp(p)
    tail = -(plogp.sum(axis=1) - plogp[rows, kstar])
    if k > 2:
        tail_entropy = tail / math.log(k - 1)
    else:
        # log(K-1) = 0: the single tail entry carries no entropy by convention
        tail_entropy = np.zeros(n)
    h_norm = np.clip(-plogp.sum(axis=1) / math.log(k), 0.0, 1.0)
    return {
        "top1": top1,
        "top2": top2,
        "margin": top1 - top2,
        "topk_mass": topk_mass,
        "tail_entropy": tail_entropy,
        "norm_entropy": h_norm,
        "k_u": ku,
    }


def token_stats(probs) -> TokenStats:
    p = _as_f64(probs)
    if p.ndim != 1:
        raise ValueError("token_stats takes a single row; use token_stats_arrays for grids")
    s = token_stats_arrays(p[None, :])
    return TokenStats(
        top1=float(s["top1"][0]),
        margin=float(s["margin"][0]),
        topk_mass=float(s["topk_mass"][0]),
        tail_entropy=float(s["tail_entropy"][0]),
        norm_entropy=float(s["norm_entropy"][0]),
        top2=float(s["top2"][0]),
        k_u=int(s["k_u"][0]),
    )


def nearest_rank_percentile(values, q: int = 95) -> float:
    """Nearest-rank percentile: the ceil(q*n/100)-th smallest value (1-based)."""
    v = np.sort(_as_f64(values).ravel())
    n = v.size
    if n == 0:
        raise ValueError("percentile of empty sample")
    rank = max(1, -(-q * n // 100))
    return float(v[rank - 1])


def confidence_entropy(probs) -> tuple[np.ndarray, np.ndarray]:
    """Per-row (normalized entropy, top-1 probability) for a grid."""
    p = np.atleast_2d(_as_f64(probs))
    k = p.shape[-1]
    h = np.clip(entropy(p) / math.log(k), 0.0, 1.0)
    return h, p.max(axis=1)


def stats_from_arrays(entropies: np.ndarray, confs: np.ndarray) -> TargetStats:
    if entropies.size == 0:
        raise ValueError("empty corpus")
    return TargetStats(
        mean_entropy=float(np.mean(entropies)),
        mean_conf=float(np.mean(confs)),
        p95_conf=nearest_rank_percentile(confs),
        p95_entropy=nearest_rank_percentile(entropies),
    )


def corpus_stats(grids: Iterable) -> TargetStats:
    hs, cs = [], []
    for g in grids:
        h, c = confidence_entropy(g)
        hs.append(h)
        cs.append(c)
    if not hs:
        raise ValueError("empty corpus")
    return stats_from_arrays(np.concatenate(hs), np.concatenate(cs))


def check_simplex(probs, atol: float = 1e-9) -> None:
    p = _as_f64(probs)
    if (p < -atol).any() or (p > 1 + atol).any():
        raise ValueError("probabilities outside [0, 1]")
    if not np.allclose(p.sum(axis=-1), 1.0, rtol=0.0, atol=atol):
        raise ValueError("rows do not sum to 1")


def as_grid_list(grids: np.ndarray | Sequence) -> list[np.ndarray]:
    if isinstance(grids, np.ndarray):
        return [np.atleast_2d(grids)]
    return [np.atleast_2d(_as_f64(g)) for g in grids]
