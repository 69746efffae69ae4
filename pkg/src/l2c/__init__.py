"""Logit-to-code distributional mapping, logit calibration and a toy
distribution-conditioned flow-matching decoder."""
from .calibration import (
    CalibrationParams,
    ObjectiveWeights,
    apply_calibration,
    bisect_scale,
    calibrate_search,
    calibrated_stats,
    calibration_objective,
)
from .distribution import (
    TargetStats,
    TokenStats,
    adaptive_support_size,
    corpus_stats,
    label_smooth,
    normalized_entropy,
    softmax,
    token_stats,
)
from .lcdm import cosine_pseudo_logits, lcdm_pipeline, uncertainty_grid, weighted_code_vectors
from .otsu import OtsuReport, otsu_report_grid, otsu_threshold, rank_profile
from .synth import render_dataset, synth_corpus
from .tensor_io import StatsConfig, read_stats_config, read_tensor, write_tensor

__version__ = "0.1.0"
