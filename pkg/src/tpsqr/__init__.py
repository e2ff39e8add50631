"""Temporal Poisson square root graphical models for longitudinal event data."""

from .design import ADR_DISCOUNT, DesignProblem, DiscountConfig, build_design, build_graph_design, lambda_max
from .event_data import EventRecord, LagWindows, SubjectSequence, Timespan, aggregate, influence
from .solver import FitConfig, FitResult, PathResult, fit, fit_path, objective_and_gradient, select_aic
from .template import Template, build_theta, pair_index

__version__ = "0.1.0"
