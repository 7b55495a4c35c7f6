"""Verification engine for facial Action Unit classifiers.

Loads a CNN from a portable JSON format, classifies face crops,
decomposes each detection into a pixel-level relevance map, and scores
how much of that relevance falls inside landmark-derived face regions.
"""

from .errors import (AuVerifyError, DegenerateBoxError, LandmarkError,
                     LayerConfigError, ModelFormatError, ShapeMismatchError,
                     UndefinedMuError, UnknownActionUnitError)
from .geometry import (AuBoxConfig, BoundingBox, LandmarkSet, au_bounding_box,
                       box_mask, normalize_au, validate_landmarks)
from .lrp import (PRESETS, AlphaBetaRule, BasicRule, EpsilonRule, FlatRule,
                  RelevanceMap, RulePreset, ZBoundsRule, explain, get_preset,
                  relevance_flow)
from .metrics import (AggregateRow, MuRecord, aggregate, f1_score,
                      make_mu_record, mu, mu_weighted, top_k_filter)
from .model import (ActivationTrace, LayerSpec, ModelSpec, classify,
                    fold_batchnorm, forward, load_model, save_model,
                    validate_model)
from .pipeline import (ManifestEntry, Report, RunConfig, emit_report,
                       ingest_manifest, load_image, run_verification)
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "ActivationTrace", "AggregateRow", "AlphaBetaRule", "AuBoxConfig",
    "AuVerifyError", "BasicRule", "BoundingBox", "DegenerateBoxError",
    "EpsilonRule", "FlatRule", "LandmarkError", "LandmarkSet",
    "LayerConfigError", "LayerSpec", "ManifestEntry", "ModelFormatError",
    "ModelSpec", "MuRecord", "PRESETS", "RelevanceMap", "Report",
    "RulePreset", "RunConfig", "ShapeMismatchError", "Tensor",
    "UndefinedMuError", "UnknownActionUnitError", "ZBoundsRule",
    "aggregate", "au_bounding_box", "box_mask", "classify", "emit_report",
    "explain", "f1_score", "fold_batchnorm", "forward", "get_preset",
    "ingest_manifest", "load_image", "load_model", "make_mu_record", "mu",
    "mu_weighted", "normalize_au", "relevance_flow", "run_verification",
    "save_model", "top_k_filter", "validate_landmarks", "validate_model",
]
