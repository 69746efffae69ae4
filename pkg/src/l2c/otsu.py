"""Otsu split of rank-sorted token probabilities.

For a row sorted in descending order, every split ``r`` (head = ranks 1..r,
tail = ranks r+1..K) is scored by the between-class variance
``w0 * w1 * (mu0 - mu1)**2`` and the maximiser is reported.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .distribution import token_stats_arrays

WEIGHTINGS = ("count", "mass")


@dataclass(frozen=True)
class OtsuReport:
    threshold_prob: float
    threshold_rank: int
    head_mass: float
    between_class_variance: float


def _split_variances(desc: np.ndarray, weighting: str) -> np.ndarray:
    """Between-class variance for splits r = 1..K-1 of each descending row."""
    k = desc.shape[-1]
    csum = np.cumsum(desc, axis=-1)
    total = csum[..., -1:]
    r = np.arange(1, k, dtype=np.float64)
    head = csum[..., :-1]
    tail = total - head
    mu0 = head / r
    mu1 = tail / (k - r)
    if weighting == "count":
        w0 = r / k
        w1 = (k - r) / k
    elif weighting == "mass":
        w0 = head
        w1 = tail
    else:
        raise ValueError(f"unknown weighting {weighting!r}; expected one of {WEIGHTINGS}")
    return w0 * w1 * (mu0 - mu1) ** 2


def _pick_split(var: np.ndarray, pmax: float) -> int:
    """Index of the best split; near-equal variances resolve to the smallest rank."""
    best = var.max()
    # rounding floor of (mu0 - mu1)**2 for values of size pmax
    floor = (64 * np.finfo(np.float64).eps * pmax) ** 2
    tol = max(best * 1e-12, floor)
    return int(np.flatnonzero(var >= best - tol)[0])


def otsu_threshold(probs, weighting: str = "count") -> OtsuReport:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("otsu_threshold takes a single row")
    k = p.size
    if k < 2:
        raise ValueError("Otsu split needs K >= 2")
    desc = -np.sort(-p)
    var = _split_variances(desc, weighting)
    i = _pick_split(var, desc[0])
    rank = i + 1
    return OtsuReport(
        threshold_prob=float(desc[i]),
        threshold_rank=rank,
        head_mass=math.fsum(desc[:rank]),
        between_class_variance=float(var[i]),
    )


def otsu_rows(grid, weighting: str = "count") -> list[OtsuReport]:
    g = np.atleast_2d(np.asarray(grid, dtype=np.float64))
    if g.shape[0] == 0:
        raise ValueError("empty grid")
    if g.shape[1] < 2:
        raise ValueError("Otsu split needs K >= 2")
    desc = -np.sort(-g, axis=1)
    var = _split_variances(desc, weighting)
    reports = []
    for row, v in zip(desc, var):
        i = _pick_split(v, row[0])
        rank = i + 1
        reports.append(OtsuReport(float(row[i]), rank, math.fsum(row[:rank]), float(v[i])))
    return reports


@dataclass(frozen=True)
class GridReport:
    """Corpus means laid out like a Table-1 column, plus the per-token reports."""

    top1: float
    top2: float
    norm_entropy: float
    tail_entropy: float
    threshold_prob: float
    threshold_rank: float
    head_mass: float
    n_tokens: int
    weighting: str
    per_token: tuple[OtsuReport, ...]

    def summary(self) -> dict:
        return {
            "probability_statistics": {
                "top1_probability": self.top1,
                "top2_probability": self.top2,
                "normalized_entropy": self.norm_entropy,
                "tail_entropy": self.tail_entropy,
            },
            "otsu_statistics": {
                "threshold_prob": self.threshold_prob,
                "threshold_rank": self.threshold_rank,
                "head_mass": self.head_mass,
            },
            "n_tokens": self.n_tokens,
            "otsu_weighting": self.weighting,
        }

    def to_dict(self, per_token: bool = False) -> dict:
        d = self.summary()
        if per_token:
            d["per_token"] = [asdict(r) for r in self.per_token]
        return d


def otsu_report_grid(grid, weighting: str = "count") -> GridReport:
    g = np.atleast_2d(np.asarray(grid, dtype=np.float64))
    if g.shape[0] == 0:
        raise ValueError("empty grid")
    reports = otsu_rows(g, weighting)
    s = token_stats_arrays(g)
    return GridReport(
        top1=float(np.mean(s["top1"])),
        top2=float(np.mean(s["top2"])),
        norm_entropy=float(np.mean(s["norm_entropy"])),
        tail_entropy=float(np.mean(s["tail_entropy"])),
        threshold_prob=float(np.mean([r.threshold_prob for r in reports])),
        threshold_rank=float(np.mean([r.threshold_rank for r in reports])),
        head_mass=float(np.mean([r.head_mass for r in reports])),
        n_tokens=len(reports),
        weighting=weighting,
        per_token=tuple(reports),
    )


def rank_profile(grids, top_n: int) -> np.ndarray:
    """Rank-wise mean of descending-sorted rows over every row of every grid."""
    if isinstance(grids, np.ndarray):
        grids = [grids]
    total = None
    count = 0
    for g in grids:
        g = np.atleast_2d(np.asarray(g, dtype=np.float64))
        if g.shape[0] == 0:
            continue
        if top_n > g.shape[1] or top_n < 1:
            raise ValueError(f"top_n={top_n} must lie in [1, K={g.shape[1]}]")
        desc = -np.sort(-g, axis=1)[:, :top_n]
        part = desc.sum(axis=0)
        total = part if total is None else total + part
        count += g.shape[0]
    if count == 0:
        raise ValueError("empty corpus")
    return total / count
