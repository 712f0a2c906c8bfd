"""Staged active sequential hypothesis testing with TVD clustering of hypotheses."""

__version__ = "0.1.0"

from .dist import Density, Family, kld, likelihood_ratio_expectation, tvd  # noqa: E402
from .model import (  # noqa: E402
    ProblemInstance,
    ScenarioSpec,
    build_counterexample,
    build_scenario,
    load_instance,
    save_instance,
    validate,
)
from .cluster import ClusterPlan, build_plan, check_condition, dbscan_tvd, vanilla_plan  # noqa: E402
from .engine import RunTranscript, run, run_random, select_action  # noqa: E402

__all__ = [
    "Density", "Family", "kld", "tvd", "likelihood_ratio_expectation",
    "ProblemInstance", "ScenarioSpec", "build_scenario", "build_counterexample",
    "load_instance", "save_instance", "validate",
    "ClusterPlan", "build_plan", "check_condition", "dbscan_tvd", "vanilla_plan",
    "RunTranscript", "run", "run_random", "select_action",
]
