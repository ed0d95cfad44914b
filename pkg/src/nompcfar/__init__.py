"""Newtonized greedy pursuit for multidimensional line spectra with CFAR model-order control."""

from .analysis import crb_single_freq, marcum_q1, pd_all_upper, pd_single, score
from .cfar_core import (
    CfarConfig,
    CfarVariant,
    DeltaReport,
    FalseAlarmSpec,
    alpha_approx,
    alpha_from_pfa,
    alpha_from_pfa_os,
    alpha_nomp,
    cfar_delta,
    design_config,
    pfa_from_alpha,
    pfa_from_alpha_mmv,
    pfa_from_alpha_os,
)
from .nomp_cfar import (
    CompressionOperator,
    DetectionReport,
    NompCfarSettings,
    component_margins,
    nomp_cfar,
    nomp_cfar_compressive,
    nomp_cfar_forward,
    nomp_cfar_mmv,
)
from .errors import (
    ConfigError,
    DegenerateWindowError,
    DomainError,
    IllConditionedError,
    InfeasibleScenarioError,
    InvalidArgumentError,
    NompCfarError,
    NumericalFailureError,
    OutOfFieldOfViewError,
)
from .nomp import CandidateSet, RefineSettings, nomp_baseline, nomp_topk
from .tensor_spectrum import SinusoidComponent, dft_spectrum, synthesize

__version__ = "0.1.0"

__all__ = [
    "CandidateSet", "CfarConfig", "CfarVariant", "CompressionOperator", "ConfigError",
    "DegenerateWindowError", "DeltaReport", "DetectionReport", "DomainError", "FalseAlarmSpec",
    "IllConditionedError", "InfeasibleScenarioError", "InvalidArgumentError", "NompCfarError",
    "NompCfarSettings", "NumericalFailureError", "OutOfFieldOfViewError", "RefineSettings",
    "SinusoidComponent", "alpha_approx", "alpha_from_pfa", "alpha_from_pfa_os", "alpha_nomp",
    "cfar_delta", "component_margins", "crb_single_freq", "design_config", "dft_spectrum",
    "marcum_q1", "nomp_baseline", "nomp_cfar", "nomp_cfar_compressive", "nomp_cfar_forward",
    "nomp_cfar_mmv", "nomp_topk", "pd_all_upper", "pd_single", "pfa_from_alpha",
    "pfa_from_alpha_mmv", "pfa_from_alpha_os", "score", "synthesize",
]
