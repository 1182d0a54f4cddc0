"""Resilient navigation under sensor spoofing.

Multi-hypothesis estimation over sensor subsets, windowed outlier-count
spoofing detection, a three-state supervision logic, receding-horizon
tracking control, and camera-viewpoint re-planning for physically verifying
which sensor subset to trust, plus the simulation harness that closes the
loop around all of it.
"""

from .detection import QuantileBatch, mean_inlier_prob, pb_quantile
from .estimation import GaussianBelief, Hypothesis, HypothesisBank
from .harness import (RunConfig, RunRecord, SweepSpec, run_scenario,
                      run_sweep, scale_attacks)
from .mitigation import (PerformanceTracker, SplineTrajectory,
                         plan_viewpoint_visit, select_replan)
from .scenarios import build as build_scenario
from .supervisor import Mode, Supervisor
from .world import Scenario, load_scenario, save_scenario

__version__ = "0.1.0"

__all__ = [
    "GaussianBelief",
    "Hypothesis",
    "HypothesisBank",
    "Mode",
    "PerformanceTracker",
    "QuantileBatch",
    "RunConfig",
    "RunRecord",
    "Scenario",
    "SplineTrajectory",
    "Supervisor",
    "SweepSpec",
    "build_scenario",
    "load_scenario",
    "mean_inlier_prob",
    "pb_quantile",
    "plan_viewpoint_visit",
    "run_scenario",
    "run_sweep",
    "save_scenario",
    "scale_attacks",
    "select_replan",
    "__version__",
]
