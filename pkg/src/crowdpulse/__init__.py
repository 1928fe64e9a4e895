"""Mutually exciting point-process model of crowdfunding platform dynamics.

The platform is a system of four event streams: items start and end, users
register, and user-item pairs fire contributions at a rate combining the
user's own engagement stage with the item's share of backers, damped by a
power-law decay of interest since registration. The package covers the
full workflow: CSV ingestion, exact likelihood estimation with analytic
derivatives, generative simulation, time-rescaling goodness-of-fit, and
information-criterion model selection.
"""

from .errors import CrowdpulseError, DataError, NumericalError
from .events import Event, EventLog, PlatformState, apply_event, replay
from .intensity import Params, contagion_effect, pair_compensator, pair_intensity
from .likelihood import (
    SufficientStats,
    build_sufficient_stats,
    closed_form_rates,
    gradient,
    hessian,
    log_likelihood,
)
from .estimate import FitOptions, FitResult, fit_newton, fit_variant, select_models
from .simulate import SimConfig, SimOutput, replicate, run, sample_contribution_waiting
from .gof import GofReport, gof_report, rescale_times

__all__ = [
    "CrowdpulseError", "DataError", "NumericalError",
    "Event", "EventLog", "PlatformState", "apply_event", "replay",
    "Params", "contagion_effect", "pair_compensator", "pair_intensity",
    "SufficientStats", "build_sufficient_stats", "closed_form_rates",
    "gradient", "hessian", "log_likelihood",
    "FitOptions", "FitResult", "fit_newton", "fit_variant", "select_models",
    "SimConfig", "SimOutput", "replicate", "run", "sample_contribution_waiting",
    "GofReport", "gof_report", "rescale_times",
]
