"""Logit-to-code mapping: expected code vectors and per-token uncertainty features."""
from __future__ import annotations

import warnings

import numpy as np

from .calibration import CalibrationParams, apply_calibration
from .distribution import token_stats_arrays

UNCERTAINTY_COLUMNS = ("top1", "margin", "topk_mass", "tail_entropy")


def check_codebook(codebook) -> np.ndarray:
    e = np.asarray(codebook, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] < 2 or e.shape[1] < 1:
        raise ValueError(f"codebook must be K x D with K >= 2, got shape {e.shape}")
    if not np.isfinite(e).all():
        raise ValueError("codebook contains non-finite values")
    if np.unique(e, axis=0).shape[0] < e.shape[0]:
        warnings.warn("codebook has duplicate rows", RuntimeWarning, stacklevel=2)
    return e


def weighted_code_vectors(probs, codebook) -> np.ndarray:
    """V = P @ E: each row is the expected code vector under its distribution."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    e = np.asarray(codebook, dtype=np.float64)
    if p.shape[1] != e.shape[0]:
        raise ValueError(f"probabilities have K={p.shape[1]} but codebook has K={e.shape[0]}")
    return p @ e


def uncertainty_grid(probs) -> np.ndarray:
    s = token_stats_arrays(probs)
    return np.stack([s[c] for c in UNCERTAINTY_COLUMNS], axis=1)


def cosine_pseudo_logits(features, codebook) -> np.ndarray:
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    e = np.asarray(codebook, dtype=np.float64)
    if f.shape[1] != e.shape[1]:
        raise ValueError(f"feature dim {f.shape[1]} != codebook dim {e.shape[1]}")
    fn = np.linalg.norm(f, axis=1)
    en = np.linalg.norm(e, axis=1)
    if (fn == 0).any():
        raise ValueError("zero-norm feature row")
    if (en == 0).any():
        raise ValueError("zero-norm code vector")
    s = (f / fn[:, None]) @ (e / en[:, None]).T
    return np.clip(s, -1.0, 1.0)


def lcdm_pipeline(logits, codebook, params: CalibrationParams) -> tuple[np.ndarray, np.ndarray]:
    e = check_codebook(codebook)
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if logits.shape[1] != e.shape[0]:
        raise ValueError(f"logits have K={logits.shape[1]} but codebook has K={e.shape[0]}")
    p = apply_calibration(logits, params)
    return weighted_code_vectors(p, e), uncertainty_grid(p)
