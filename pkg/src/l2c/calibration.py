"""Logit calibration: affine scale, temperature and label smoothing fitted by
matching corpus-level entropy/confidence statistics to a target.

The search is stage-sequential: bisection on the scale ``a`` with the other
parameters at their identity values, then grid sweeps over temperature,
smoothing and bias, each stage keeping everything chosen before it fixed.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .distribution import (
    TargetStats,
    confidence_entropy,
    label_smooth,
    softmax,
    stats_from_arrays,
)
from .tensor_io import StatsConfig, dump_json

log = logging.getLogger(__name__)

# Candidates whose loss is within this of the best are treated as ties.
TIE_TOL = 1e-12


@dataclass(frozen=True)
class CalibrationParams:
    scale: float = 1.0
    bias: float = 0.0
    temperature: float = 1.0
    smoothing: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.smoothing <= 1.0:
            raise ValueError(f"smoothing must lie in [0, 1], got {self.smoothing}")
        if not math.isfinite(self.bias):
            raise ValueError("bias must be finite")

    def key(self) -> tuple[float, float, float, float]:
        return (self.scale, self.bias, self.temperature, self.smoothing)


IDENTITY = CalibrationParams()
JANUS_PRO_7B = CalibrationParams(scale=29.0381, bias=0.0, temperature=1.0, smoothing=0.01)


@dataclass(frozen=True)
class ObjectiveWeights:
    w1: float = 1.0
    w2: float = 0.25
    w3: float = 0.25
    w4: float = 0.35

    def __post_init__(self):
        w = self.as_tuple()
        if any(x < 0 for x in w):
            raise ValueError("objective weights must be non-negative")
        if not any(x > 0 for x in w):
            raise ValueError("objective weights are all zero")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.w1, self.w2, self.w3, self.w4)


def apply_calibration(logits, params: CalibrationParams) -> np.ndarray:
    s = np.asarray(logits, dtype=np.float64)
    p = softmax(params.scale * s + params.bias, params.temperature)
    if params.smoothing:
        p = label_smooth(p, params.smoothing)
    return p


def _corpus(corpus) -> list[np.ndarray]:
    if isinstance(corpus, np.ndarray):
        corpus = [corpus]
    grids = [np.atleast_2d(np.asarray(g, dtype=np.float64)) for g in corpus]
    if not grids or sum(g.shape[0] for g in grids) == 0:
        raise ValueError("empty corpus")
    return grids


def calibrated_stats(corpus, params: CalibrationParams) -> TargetStats:
    hs, cs = [], []
    for g in _corpus(corpus):
        h, c = confidence_entropy(apply_calibration(g, params))
        hs.append(h)
        cs.append(c)
    return stats_from_arrays(np.concatenate(hs), np.concatenate(cs))


def stats_loss(stats: TargetStats, target: TargetStats, weights: ObjectiveWeights) -> float:
    w = weights.as_tuple()
    got = stats.as_tuple()
    want = target.as_tuple()
    return float(sum(wi * (g - t) ** 2 for wi, g, t in zip(w, got, want)))


def calibration_objective(params: CalibrationParams, corpus, target: TargetStats,
                          weights: ObjectiveWeights = ObjectiveWeights()) -> float:
    return stats_loss(calibrated_stats(corpus, params), target, weights)


class _Evaluator:
    """Caches calibrated corpus statistics per candidate parameter tuple."""

    def __init__(self, corpus, target: TargetStats | None, weights: ObjectiveWeights):
        self.corpus = _corpus(corpus)
        self.target = target
        self.weights = weights
        self._cache: dict[tuple, TargetStats] = {}

    def stats(self, params: CalibrationParams) -> TargetStats:
        key = params.key()
        if key not in self._cache:
            self._cache[key] = calibrated_stats(self.corpus, params)
        return self._cache[key]

    def mean_entropy(self, scale: float) -> float:
        return self.stats(CalibrationParams(scale=scale)).mean_entropy

    def loss(self, params: CalibrationParams) -> float:
        return stats_loss(self.stats(params), self.target, self.weights)


@dataclass(frozen=True)
class BisectionResult:
    scale: float
    mean_entropy: float
    iterations: int
    bracketed: bool
    converged: bool


def _bisect(ev: _Evaluator, target_entropy: float, a_range, tol: float, max_iter: int) -> BisectionResult:
    lo, hi = (float(x) for x in a_range)
    if lo > hi:
        raise ValueError(f"inverted scale range [{lo}, {hi}]")
    if not lo > 0:
        raise ValueError("scale range must be positive")
    h_lo = ev.mean_entropy(lo)
    if abs(h_lo - target_entropy) <= tol:
        return BisectionResult(lo, h_lo, 0, True, True)
    h_hi = ev.mean_entropy(hi)
    if abs(h_hi - target_entropy) <= tol:
        return BisectionResult(hi, h_hi, 0, True, True)
    # entropy must fall as the scale grows, and the target must sit between the ends
    if not (h_hi <= target_entropy <= h_lo):
        if abs(h_hi - target_entropy) <= abs(h_lo - target_entropy):
            best, h_best = hi, h_hi
        else:
            best, h_best = lo, h_lo
        log.warning("target entropy %.6f not bracketed by [%.6f, %.6f]", target_entropy, h_hi, h_lo)
        return BisectionResult(best, h_best, 0, False, False)

    a, h = lo, h_lo
    for it in range(1, max_iter + 1):
        a = 0.5 * (lo + hi)
        h = ev.mean_entropy(a)
        if abs(h - target_entropy) <= tol:
            return BisectionResult(a, h, it, True, True)
        if h > target_entropy:
            lo = a
        else:
            hi = a
    return BisectionResult(a, h, max_iter, True, False)


def bisect_scale(corpus, target_entropy: float, a_range=(1.0, 60.0), tol: float = 0.02,
                 max_iter: int = 60) -> BisectionResult:
    """Find a scale whose mean normalized entropy is within ``tol`` of the target.

    Bias, temperature and smoothing stay at (0, 1, 0). A target outside the
    reachable entropy interval yields the nearer endpoint with
    ``bracketed=False``.
    """
    ev = _Evaluator(corpus, None, ObjectiveWeights())
    return _bisect(ev, target_entropy, a_range, tol, max_iter)


@dataclass(frozen=True)
class StageRecord:
    stage: str
    parameter: str
    value: float
    loss: float
    evaluated: int


@dataclass
class CalibrationResult:
    params: CalibrationParams
    loss: float
    stages: list[StageRecord]
    bisection: BisectionResult
    final_stats: TargetStats
    target: TargetStats
    weights: ObjectiveWeights
    sweep_losses: dict = field(default_factory=dict)

    def diagnostics(self) -> dict:
        return {
            "final_loss": self.loss,
            "stages": [asdict(s) for s in self.stages],
            "bisection": asdict(self.bisection),
            "final_stats": self.final_stats.to_dict(),
            "target_stats": self.target.to_dict(),
            "objective_weights": list(self.weights.as_tuple()),
        }


def _sweep(ev: _Evaluator, base: CalibrationParams, name: str, grid: np.ndarray):
    """Best value of one parameter on a grid; the incumbent wins unless beaten by more than TIE_TOL."""
    incumbent = getattr(base, name)
    best_val, best_loss = incumbent, ev.loss(base)
    losses = []
    for v in np.unique(grid):  # ascending, so ties keep the smaller value
        cand = _replace(base, name, float(v))
        lv = ev.loss(cand)
        losses.append((float(v), lv))
        if lv < best_loss - TIE_TOL:
            best_val, best_loss = float(v), lv
    if best_val != incumbent:
        # smallest value among candidates tied with the winner
        for v, lv in losses:
            if lv <= best_loss + TIE_TOL:
                best_val, best_loss = v, lv
                break
    return _replace(base, name, best_val), best_loss, losses


def _replace(p: CalibrationParams, name: str, value: float) -> CalibrationParams:
    d = asdict(p)
    d[name] = value
    return CalibrationParams(**d)


def calibrate_search(corpus, config: StatsConfig, target: TargetStats | None = None) -> CalibrationResult:
    target = target if target is not None else config.target_stats
    if target is None:
        raise ValueError("no target statistics supplied")
    weights = ObjectiveWeights(*config.objective_weights)
    ev = _Evaluator(corpus, target, weights)
    ranges = config.search_ranges
    pts = config.sweep_points

    stages = []
    bis = _bisect(ev, target.mean_entropy, ranges["scale"], config.entropy_tolerance,
                  config.max_bisection_iters)
    params = CalibrationParams(scale=bis.scale)
    loss = ev.loss(params)
    stages.append(StageRecord("bisect", "scale", bis.scale, loss, bis.iterations))
    log.info("stage scale: a=%.6f loss=%.3e", bis.scale, loss)

    sweeps = {}
    for name in ("temperature", "smoothing", "bias"):
        lo, hi = ranges[name]
        grid = np.linspace(lo, hi, pts[name])
        params, loss, losses = _sweep(ev, params, name, grid)
        sweeps[name] = losses
        stages.append(StageRecord("sweep", name, getattr(params, name), loss, len(losses)))
        log.info("stage %s: %.6f loss=%.3e", name, getattr(params, name), loss)

    return CalibrationResult(
        params=params,
        loss=loss,
        stages=stages,
        bisection=bis,
        final_stats=ev.stats(params),
        target=target,
        weights=weights,
        sweep_losses=sweeps,
    )


def params_to_dict(params: CalibrationParams) -> dict:
    return asdict(params)


def params_from_dict(d: dict) -> CalibrationParams:
    if "params" in d:
        d = d["params"]
    return CalibrationParams(
        scale=float(d.get("scale", 1.0)),
        bias=float(d.get("bias", 0.0)),
        temperature=float(d.get("temperature", 1.0)),
        smoothing=float(d.get("smoothing", 0.0)),
    )


def write_params(path, params: CalibrationParams, diagnostics: dict | None = None) -> None:
    doc = params_to_dict(params)
    if diagnostics is not None:
        doc["diagnostics"] = diagnostics
    dump_json(path, doc)


def read_params(path) -> CalibrationParams:
    with open(path, encoding="utf-8") as f:
        return params_from_dict(json.load(f))
