"""Temporally and shape-consistent fitting of an articulated body model to 2D keypoint sequences."""

from .bodies import default_body_model, toy_model
from .errors import (
    DegenerateProjectionError, EvaluationError, InitFailure, InvalidInputError, MetricUnavailable, SeqfitError,
)
from .model import BodyModelSpec, PoseParams, forward_kinematics, regress_joints, skin_vertices
from .objectives import FrameParams, KeypointFrame, StageSchedule
from .pipeline import FitReport, RunConfig, SequenceFit, fit_sequence

__version__ = "0.1.0"

__all__ = [
    "BodyModelSpec", "DegenerateProjectionError", "EvaluationError", "FitReport", "FrameParams",
    "InitFailure", "InvalidInputError", "KeypointFrame", "MetricUnavailable", "PoseParams", "RunConfig",
    "SeqfitError", "SequenceFit", "StageSchedule", "default_body_model", "fit_sequence",
    "forward_kinematics", "regress_joints", "skin_vertices", "toy_model",
]
