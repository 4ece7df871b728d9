"""Calibration of low-risk screening rules on right-censored survival data."""
from .hp_calibrate import CalibrationResult, ThresholdGrid, build_grid, calibrate_greedy, calibrate_ltt, calibrate_uniform
from .conformal import ConformalConfig, SelectionResult, bh_select, conformal_pvalues, fdr_screen, tune_gamma
from .core_types import (
    CensoredDataset,
    CensoredRecord,
    ScreeningRule,
    SurvivalCurve,
    SurvivalCurveSet,
    TimeGrid,
    apply_rule,
    evaluate_curve,
    validate_dataset,
)
from .errors import (
    AlignmentError,
    ConfigError,
    CurveRangeError,
    DimensionMismatch,
    EmptySelection,
    InsufficientData,
    NonConvergence,
    NumericalError,
    PositivityViolation,
    ScreencalError,
    ValidationError,
)
from .ipcw import RiskEstimate, WeightVector, estimate_risk, event_time_weights, fixed_time_weights
from .models import CoxModel, WeibullModel, WeibullPopulation, fit_censoring, fit_cox, predict_curves, predict_survival
from .seeding import derive_rng, derive_seed

__version__ = "0.1.0"
