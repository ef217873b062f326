"""Interference-aware planning, profiling, and simulation of distributed
model updates on heterogeneous edge clusters."""

__version__ = "0.1.0"

from .cluster import (BackgroundApp, ClusterSpec, JobSpec, NodeState, ParseError,
                      ValidationError, WorkerSpec, cluster_from_doc, default_testbed,
                      job_from_doc, load_cluster, load_job, save_cluster, save_job,
                      validate)
from .estimators import (DEVICE_PROFILES, EstimatorBundle, FittedFunction,
                         ParametricProfile, basis_terms, bundle_for,
                         default_registry, design_matrix, get_max_batch_size,
                         load_registry, save_registry)
from .scheduler import (Assignment, CostBreakdown, InfeasibleScheduleError, Plan,
                        Removal, SolveAudit, check_pressure, epoch_time,
                        fairness_plan, largest_remainder, load_plan, plan_from_doc,
                        plan_to_doc, save_plan, solve, total_cost)
from .profiler import (FitReport, ProfileDataset, ProfileRow, SweepPlan,
                       dataset_from_csv, fit, fit_all, fitted_bundle, mape,
                       run_sweep, reference_grid)
from .simulator import (ArcEvent, CrashEvent, CrashRecord, RecoveryResult,
                        SimConfig, SimResult, TraceEvent, Violation,
                        inject_and_recover, load_trace, save_trace, simulate)
from .orchestrator import (BenchReport, BenchStressModel, BenchTrial,
                           IllegalTransitionError, JobPhase, JobReport,
                           LEGAL_TRANSITIONS, LogisticFit, PhaseChange, bench,
                           bench_report_from_doc, bench_report_to_doc,
                           crossing_epoch, fit_accuracy_curve, load_bench_report,
                           logistic, refine_num_epoch, render_report, run_job,
                           save_bench_report, save_histogram_csv,
                           simulate_accuracy, validate_transitions)

__all__ = [
    "__version__",
    # cluster
    "BackgroundApp", "ClusterSpec", "JobSpec", "NodeState", "ParseError",
    "ValidationError", "WorkerSpec", "cluster_from_doc", "default_testbed",
    "job_from_doc", "load_cluster", "load_job", "save_cluster", "save_job",
    "validate",
    # estimators
    "DEVICE_PROFILES", "EstimatorBundle", "FittedFunction", "ParametricProfile",
    "basis_terms", "bundle_for", "default_registry", "design_matrix",
    "get_max_batch_size", "load_registry", "save_registry",
    # scheduler
    "Assignment", "CostBreakdown", "InfeasibleScheduleError", "Plan", "Removal",
    "SolveAudit", "check_pressure", "epoch_time", "fairness_plan",
    "largest_remainder", "load_plan", "plan_from_doc", "plan_to_doc", "save_plan",
    "solve", "total_cost",
    # profiler
    "FitReport", "ProfileDataset", "ProfileRow", "SweepPlan", "dataset_from_csv",
    "fit", "fit_all", "fitted_bundle", "mape", "run_sweep", "reference_grid",
    # simulator
    "ArcEvent", "CrashEvent", "CrashRecord", "RecoveryResult", "SimConfig",
    "SimResult", "TraceEvent", "Violation", "inject_and_recover", "load_trace",
    "save_trace", "simulate",
    # orchestrator
    "BenchReport", "BenchStressModel", "BenchTrial", "IllegalTransitionError",
    "JobPhase", "JobReport", "LEGAL_TRANSITIONS", "LogisticFit", "PhaseChange",
    "bench", "bench_report_from_doc", "bench_report_to_doc", "crossing_epoch",
    "fit_accuracy_curve", "load_bench_report", "logistic", "refine_num_epoch",
    "render_report", "run_job", "save_bench_report", "save_histogram_csv",
    "simulate_accuracy", "validate_transitions",
]
