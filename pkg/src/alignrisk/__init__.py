"""Longitudinal mammogram alignment strategies for multi-year breast cancer risk, at desk scale."""

from .grid import (
    AffineTransform2D,
    ConfigurationError,
    DimensionError,
    affine_to_field,
    build_pyramid,
    compose_fields,
    resize_field,
    warp_bilinear,
)
from .metrics import jacobian_map, jacobian_std, ncc, njd_percent, smoothness_energy
from .pipelines import StrategyKind, TrainConfig, predict, train
from .records import ExamPair, SurvivalLabel, censor_mask
from .registration import RegistrationConfig, register
from .survival import auc_at_horizon, bootstrap_ci, c_index

__version__ = "0.1.0"
