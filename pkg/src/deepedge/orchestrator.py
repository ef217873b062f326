"""Job lifecycle, accuracy-driven epoch refinement, and the comparison bench.

A model-update job moves through a small phase machine: it is requested,
solved into a plan, samples transfer, workers register, training runs, and
the job completes; crashes interrupt and retrigger it, and a job that cannot
be (re)planned is abandoned. ``run_job`` drives the simulator through that
machine and returns the phase log alongside the execution record.

Accuracy over epochs is modeled as a logistic curve fit with a damped
Gauss-Newton loop; ``refine_num_epoch`` uses the fit to shrink a job's epoch
budget to the first epoch expected to reach the target accuracy.

``bench`` compares the interference-aware plan against the equal-sharding
baseline across randomized background-load scenarios and aggregates speedups
and deadline violations into a serializable report.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .cluster import (ClusterSpec, JobSpec, NodeState, ValidationError,
                      SCHEMA_VERSION, _check_schema, _load_doc, default_testbed)
from .estimators import bundle_for, default_registry
from .scheduler import InfeasibleScheduleError, Plan, fairness_plan, solve
from .simulator import (RecoveryResult, SimConfig, inject_and_recover, simulate,
                        ABANDONED, COMPLETED)


class JobPhase(enum.Enum):
    REQUESTED = "requested"
    SOLVED = "solved"
    TRANSFERRING = "transferring"
    REGISTERED = "registered"
    RUNNING = "running"
    INTERRUPTED = "interrupted"
    RETRIGGERED = "retriggered"
    COMPLETED = "completed"
    ABANDONED = "abandoned"


LEGAL_TRANSITIONS = {
    JobPhase.REQUESTED: frozenset({JobPhase.SOLVED, JobPhase.ABANDONED}),
    JobPhase.SOLVED: frozenset({JobPhase.TRANSFERRING}),
    JobPhase.TRANSFERRING: frozenset({JobPhase.REGISTERED}),
    JobPhase.REGISTERED: frozenset({JobPhase.RUNNING}),
    JobPhase.RUNNING: frozenset({JobPhase.INTERRUPTED, JobPhase.COMPLETED}),
    JobPhase.INTERRUPTED: frozenset({JobPhase.RETRIGGERED, JobPhase.ABANDONED}),
    JobPhase.RETRIGGERED: frozenset({JobPhase.SOLVED}),
    JobPhase.COMPLETED: frozenset(),
    JobPhase.ABANDONED: frozenset(),
}


class IllegalTransitionError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhaseChange:
    time: float
    phase: JobPhase


def validate_transitions(changes) -> None:
    """Raise if a phase log starts wrong, jumps illegally, or goes back in time."""
    if not changes:
        raise IllegalTransitionError("empty phase log")
    if changes[0].phase is not JobPhase.REQUESTED:
        raise IllegalTransitionError(
            f"phase log must start at requested, got {changes[0].phase.value}")
    for prev, cur in zip(changes, changes[1:]):
        if cur.phase not in LEGAL_TRANSITIONS[prev.phase]:
            raise IllegalTransitionError(
                f"illegal transition {prev.phase.value} -> {cur.phase.value}")
        if cur.time < prev.time - 1e-9:
            raise IllegalTransitionError(
                f"phase log goes back in time at {cur.phase.value}: "
                f"{cur.time} < {prev.time}")
    terminal = changes[-1].phase
    if LEGAL_TRANSITIONS[terminal]:
        raise IllegalTransitionError(
            f"phase log ends in non-terminal phase {terminal.value}")


# --- accuracy curve -----------------------------------------------------------


def logistic(k, L: float, r: float, k0: float):
    k = np.asarray(k, dtype=float)
    out = L / (1.0 + np.exp(-r * (k - k0)))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class LogisticFit:
    L: float
    r: float
    k0: float
    sse: float
    iterations: int

    def predict(self, k):
        return logistic(k, self.L, self.r, self.k0)


def _gauss_newton(k, y, start, max_iter=100):
    """Levenberg-style damped Gauss-Newton for the 3-parameter logistic."""
    L, r, k0 = start
    lam = 1e-3

    def evaluate(L, r, k0):
        s = 1.0 / (1.0 + np.exp(-r * (k - k0)))
        res = L * s - y
        return s, res, float(res @ res)

    s, res, sse = evaluate(L, r, k0)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        grad_mid = L * s * (1.0 - s)
        J = np.column_stack([s, grad_mid * (k - k0), -grad_mid * r])
        H = J.T @ J
        g = J.T @ res
        try:
            step = np.linalg.solve(H + lam * (np.diag(np.diag(H)) + 1e-12 * np.eye(3)), -g)
        except np.linalg.LinAlgError:
            lam *= 4.0
            continue
        L2 = float(np.clip(L + step[0], 1e-6, 1.0))
        r2 = float(np.clip(r + step[1], 1e-6, 50.0))
        k02 = float(np.clip(k0 + step[2], -1e6, 1e6))
        s2, res2, sse2 = evaluate(L2, r2, k02)
        if sse2 < sse:
            moved = abs(L2 - L) + abs(r2 - r) + abs(k02 - k0)
            L, r, k0, s, res = L2, r2, k02, s2, res2
            improved = sse - sse2
            sse = sse2
            lam = max(lam * 0.5, 1e-12)
            if improved < 1e-14 and moved < 1e-10:
                break
        else:
            lam *= 4.0
            if lam > 1e12:
                break
    return LogisticFit(L=L, r=r, k0=k0, sse=sse, iterations=iterations)


def fit_accuracy_curve(epochs, accuracies, max_iter: int = 100) -> LogisticFit:
    """Fit accuracy(k) = L / (1 + exp(-r (k - k0))) to observed epochs.

    Multi-start on the growth rate, best sum of squares wins. Needs at least
    three observations; accuracies must lie in [0, 1].
    """
    k = np.asarray(epochs, dtype=float)
    y = np.asarray(accuracies, dtype=float)
    if k.shape != y.shape or k.ndim != 1:
        raise ValidationError("epochs and accuracies must be equal-length vectors")
    if k.size < 3:
        raise ValidationError(f"need at least 3 observations to fit, got {k.size}")
    if np.any((y < 0.0) | (y > 1.0)):
        raise ValidationError("accuracies must lie in [0, 1]")
    top = float(np.max(y))
    L0 = min(1.0, max(top + 0.05, 0.1))
    half = np.abs(y - top / 2.0)
    k0_guess = float(k[int(np.argmin(half))])
    best = None
    for r0 in (0.3, 0.8, 1.5):
        fit = _gauss_newton(k, y, (L0, r0, k0_guess), max_iter=max_iter)
        if best is None or fit.sse < best.sse:
            best = fit
    return best


def crossing_epoch(fit: LogisticFit, target: float) -> float | None:
    """Continuous epoch where the fitted curve reaches the target, None if never."""
    if not 0.0 < target <= 1.0:
        raise ValueError(f"target accuracy must lie in (0, 1], got {target}")
    if target >= fit.L:
        return None
    return fit.k0 - math.log(fit.L / target - 1.0) / fit.r


def refine_num_epoch(observations, target_accuracy: float | None,
                     current_num_epoch: int) -> int:
    """Shrink an epoch budget to the first epoch expected to hit the target.

    Fits the logistic curve to the observations and returns the first epoch
    whose fitted accuracy reaches the target, clamped between the epochs
    already observed (those cannot be taken back) and the current budget.
    A target the fitted ceiling never reaches leaves the budget unchanged.
    """
    if current_num_epoch < 1:
        raise ValueError(f"current_num_epoch must be >= 1, got {current_num_epoch}")
    if target_accuracy is None:
        return current_num_epoch
    if not 0.0 < target_accuracy <= 1.0:
        raise ValueError(f"target accuracy must be in (0, 1], got {target_accuracy}")
    obs = sorted((int(k), float(a)) for k, a in observations)
    if len(obs) < 3:
        raise ValueError(f"need at least 3 observations, got {len(obs)}")
    fit = fit_accuracy_curve([k for k, _ in obs], [a for _, a in obs])
    k_star = crossing_epoch(fit, target_accuracy)
    if k_star is None:
        return current_num_epoch
    refined = math.ceil(k_star - 1e-9)
    max_observed = max(k for k, _ in obs)
    return int(min(current_num_epoch, max(max_observed, refined)))


def simulate_accuracy(L: float, r: float, k0: float, num_epochs: int,
                      noise: float = 0.0, seed: int = 0):
    """Synthetic per-epoch accuracy readings from a logistic ground truth."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(1, num_epochs + 1):
        acc = logistic(k, L, r, k0)
        if noise > 0.0:
            acc += float(rng.normal(0.0, noise))
        out.append((k, float(np.clip(acc, 0.0, 1.0))))
    return tuple(out)


# --- running a job through its phases ------------------------------------------


@dataclass(frozen=True)
class JobReport:
    status: str  # completed | abandoned
    phases: tuple  # PhaseChange
    plan: Plan | None
    final_plan: Plan | None
    recovery: RecoveryResult | None
    refined_num_epoch: int | None = None
    accuracy_fit: LogisticFit | None = None

    @property
    def total_time(self) -> float:
        return self.phases[-1].time if self.phases else 0.0


def run_job(cluster: ClusterSpec, job: JobSpec, registry: dict | None = None,
            seed: int = 0, config: SimConfig = SimConfig(),
            accuracy_observations=None) -> JobReport:
    """Take a job from request to a terminal phase and report the whole arc."""
    registry = registry if registry is not None else default_registry()
    phases = [PhaseChange(0.0, JobPhase.REQUESTED)]
    try:
        plan = solve(cluster, job, registry)
    except (InfeasibleScheduleError, ValidationError):
        phases.append(PhaseChange(0.0, JobPhase.ABANDONED))
        validate_transitions(phases)
        return JobReport(status=ABANDONED, phases=tuple(phases), plan=None,
                         final_plan=None, recovery=None)
    phases.append(PhaseChange(0.0, JobPhase.SOLVED))
    phases.append(PhaseChange(0.0, JobPhase.TRANSFERRING))

    rec = inject_and_recover(cluster, job, registry, seed=seed, config=config,
                             plan=plan)

    attempt_offsets = [0.0] + [ev.time for ev in rec.events if ev.kind == "detected"]
    first_running = attempt_offsets[0] + max(rec.attempts[0].train_starts.values())
    phases.append(PhaseChange(first_running, JobPhase.REGISTERED))
    phases.append(PhaseChange(first_running, JobPhase.RUNNING))

    attempt_idx = 0
    for ev in rec.events:
        if ev.kind == "detected":
            phases.append(PhaseChange(ev.time, JobPhase.INTERRUPTED))
        elif ev.kind == "retriggered":
            attempt_idx += 1
            phases.append(PhaseChange(ev.time, JobPhase.RETRIGGERED))
            phases.append(PhaseChange(ev.time, JobPhase.SOLVED))
            phases.append(PhaseChange(ev.time, JobPhase.TRANSFERRING))
            start = (attempt_offsets[attempt_idx]
                     + max(rec.attempts[attempt_idx].train_starts.values()))
            phases.append(PhaseChange(start, JobPhase.REGISTERED))
            phases.append(PhaseChange(start, JobPhase.RUNNING))
        elif ev.kind == COMPLETED:
            phases.append(PhaseChange(ev.time, JobPhase.COMPLETED))
        elif ev.kind == ABANDONED:
            phases.append(PhaseChange(ev.time, JobPhase.ABANDONED))
    validate_transitions(phases)

    refined = None
    fit = None
    if accuracy_observations is not None and job.target_accuracy is not None:
        obs = sorted((int(k), float(a)) for k, a in accuracy_observations)
        if len(obs) >= 3:
            refined = refine_num_epoch(obs, job.target_accuracy, job.num_epoch)
            fit = fit_accuracy_curve([k for k, _ in obs], [a for _, a in obs])
    return JobReport(status=rec.status, phases=tuple(phases), plan=plan,
                     final_plan=rec.plans[-1], recovery=rec,
                     refined_num_epoch=refined, accuracy_fit=fit)


# --- the bench ------------------------------------------------------------------


@dataclass(frozen=True)
class BenchStressModel:
    """Random background-load scenarios: a few workers get hammered, the rest idle.

    Each trial picks a storm size (how many non-exempt workers run hot), then
    draws a stress level per worker and maps it to cpu/gpu/mem utilization.
    Exempt device classes never host a storm; on the reference testbed the
    big board has the thermal and memory headroom to shrug off co-located
    load, so storms concentrate on the small boards where they actually bite.
    Scenarios where a background task already misses its deadline before any
    training lands are redrawn, so every trial starts from a healthy cluster.
    """

    storm_weights: tuple = (0.40, 0.35, 0.25)  # P(0, 1, 2 stormy workers)
    heavy_low: float = 0.75
    heavy_high: float = 1.0
    light_low: float = 0.0
    light_high: float = 0.3
    cpu_gain: float = 0.80
    gpu_gain: float = 0.90
    mem_base: float = 0.20
    mem_gain: float = 0.40
    noise: float = 0.05
    exempt_classes: tuple = ("tx2",)
    max_resamples: int = 1000

    def draw_states(self, rng, cluster: ClusterSpec, registry: dict):
        """(worker_id -> NodeState, stormy worker ids) passing the health check."""
        candidates = [w.id for w in cluster.workers
                      if w.device_class not in self.exempt_classes]
        for _ in range(self.max_resamples):
            size = int(rng.choice(len(self.storm_weights), p=self.storm_weights))
            size = min(size, len(candidates))
            stormy = set(rng.choice(candidates, size=size, replace=False)) if size else set()
            states = {}
            for w in cluster.workers:
                if w.id in stormy:
                    s = rng.uniform(self.heavy_low, self.heavy_high)
                else:
                    s = rng.uniform(self.light_low, self.light_high)
                states[w.id] = NodeState(
                    cpu_util=float(np.clip(self.cpu_gain * s + rng.uniform(0, self.noise), 0, 1)),
                    gpu_util=float(np.clip(self.gpu_gain * s + rng.uniform(0, self.noise), 0, 1)),
                    mem_util=float(np.clip(self.mem_base + self.mem_gain * s
                                           + rng.uniform(0, self.noise), 0, 1)),
                )
            healthy = True
            for w in cluster.workers:
                bundle = bundle_for(registry, w.device_class)
                idle_exec = bundle.est_exec_time(states[w.id])
                if any(idle_exec > app.deadline for app in w.background_apps):
                    healthy = False
                    break
            if healthy:
                return states, tuple(sorted(stormy))
        raise RuntimeError("could not draw a healthy stress scenario; "
                           "loosen the stress model or deadlines")


@dataclass(frozen=True)
class BenchTrial:
    index: int
    stormy_workers: tuple
    speedup: float
    heuristic_makespan: float
    fairness_makespan: float
    heuristic_violations: int
    fairness_violations: int
    heuristic_workers: int
    fairness_workers: int


@dataclass(frozen=True)
class BenchReport:
    trials: tuple
    mean_speedup: float
    median_speedup: float
    min_speedup: float
    max_speedup: float
    frac_speedup_ge_1_5: float
    violations_heuristic: int
    violations_fairness: int
    histogram_edges: tuple
    histogram_counts: tuple
    n_trials: int
    seed: int
    jitter: float
    num_samples: int
    num_epoch: int


HISTOGRAM_EDGES = tuple(round(0.8 + 0.2 * i, 1) for i in range(13))  # 0.8 .. 3.2


def bench(cluster: ClusterSpec | None = None, registry: dict | None = None,
          n_trials: int = 120, seed: int = 0, jitter: float = 0.03,
          num_samples: int = 1800, num_epoch: int = 2,
          stress: BenchStressModel = BenchStressModel()) -> BenchReport:
    """Compare the interference-aware plan against equal sharding over many trials.

    Both plans for a trial execute against the same cluster scenario with the
    same simulation seed, so the speedup isolates scheduling quality. Speedup
    is the fairness makespan divided by the heuristic makespan.
    """
    if n_trials < 1:
        raise ValueError(f"n_trials must be >= 1, got {n_trials}")
    cluster = cluster if cluster is not None else default_testbed()
    registry = registry if registry is not None else default_registry()
    store = cluster.data_stores[0]
    job = JobSpec(num_samples=num_samples, num_epoch=num_epoch, source_store=store)
    rng = np.random.default_rng(seed)
    trials = []
    for t in range(n_trials):
        states, stormy = stress.draw_states(rng, cluster, registry)
        trial_cluster = replace(cluster, workers=tuple(
            replace(w, initial_state=states[w.id]) for w in cluster.workers))
        plan_h = solve(trial_cluster, job, registry)
        plan_f = fairness_plan(trial_cluster, job, registry)
        sim_seed = int(np.random.SeedSequence([seed, t]).generate_state(1)[0])
        cfg = SimConfig(jitter=jitter, trace_level="none")
        res_h = simulate(trial_cluster, job, plan_h, registry, seed=sim_seed, config=cfg)
        res_f = simulate(trial_cluster, job, plan_f, registry, seed=sim_seed, config=cfg)
        trials.append(BenchTrial(
            index=t, stormy_workers=stormy,
            speedup=res_f.makespan / res_h.makespan,
            heuristic_makespan=res_h.makespan, fairness_makespan=res_f.makespan,
            heuristic_violations=len(res_h.violations),
            fairness_violations=len(res_f.violations),
            heuristic_workers=len(plan_h.assignments),
            fairness_workers=len(plan_f.assignments)))
    speedups = np.asarray([tr.speedup for tr in trials])
    counts, edges = np.histogram(speedups, bins=np.asarray(HISTOGRAM_EDGES))
    return BenchReport(
        trials=tuple(trials),
        mean_speedup=float(np.mean(speedups)),
        median_speedup=float(np.median(speedups)),
        min_speedup=float(np.min(speedups)),
        max_speedup=float(np.max(speedups)),
        frac_speedup_ge_1_5=float(np.mean(speedups >= 1.5)),
        violations_heuristic=int(sum(tr.heuristic_violations for tr in trials)),
        violations_fairness=int(sum(tr.fairness_violations for tr in trials)),
        histogram_edges=tuple(float(e) for e in edges),
        histogram_counts=tuple(int(c) for c in counts),
        n_trials=n_trials, seed=seed, jitter=jitter,
        num_samples=num_samples, num_epoch=num_epoch)


# --- bench report documents ------------------------------------------------------


def bench_report_to_doc(report: BenchReport) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "n_trials": report.n_trials,
        "seed": report.seed,
        "jitter": report.jitter,
        "num_samples": report.num_samples,
        "num_epoch": report.num_epoch,
        "mean_speedup": report.mean_speedup,
        "median_speedup": report.median_speedup,
        "min_speedup": report.min_speedup,
        "max_speedup": report.max_speedup,
        "frac_speedup_ge_1_5": report.frac_speedup_ge_1_5,
        "violations_heuristic": report.violations_heuristic,
        "violations_fairness": report.violations_fairness,
        "histogram": {"edges": list(report.histogram_edges),
                      "counts": list(report.histogram_counts)},
        "trials": [
            {
                "index": tr.index,
                "stormy_workers": list(tr.stormy_workers),
                "speedup": tr.speedup,
                "heuristic_makespan": tr.heuristic_makespan,
                "fairness_makespan": tr.fairness_makespan,
                "heuristic_violations": tr.heuristic_violations,
                "fairness_violations": tr.fairness_violations,
                "heuristic_workers": tr.heuristic_workers,
                "fairness_workers": tr.fairness_workers,
            }
            for tr in report.trials
        ],
    }


def bench_report_from_doc(doc: dict) -> BenchReport:
    _check_schema(doc, "bench report")
    needed = {"schema", "n_trials", "seed", "jitter", "num_samples", "num_epoch",
              "mean_speedup", "median_speedup", "min_speedup", "max_speedup",
              "frac_speedup_ge_1_5", "violations_heuristic", "violations_fairness",
              "histogram", "trials"}
    for key in doc:
        if key not in needed:
            raise ValidationError(f"bench report: unknown field '{key}'")
    missing = needed - set(doc) - {"schema"}
    if missing:
        raise ValidationError(f"bench report: missing fields {sorted(missing)}")
    trials = tuple(
        BenchTrial(index=int(tr["index"]),
                   stormy_workers=tuple(tr["stormy_workers"]),
                   speedup=float(tr["speedup"]),
                   heuristic_makespan=float(tr["heuristic_makespan"]),
                   fairness_makespan=float(tr["fairness_makespan"]),
                   heuristic_violations=int(tr["heuristic_violations"]),
                   fairness_violations=int(tr["fairness_violations"]),
                   heuristic_workers=int(tr["heuristic_workers"]),
                   fairness_workers=int(tr["fairness_workers"]))
        for tr in doc["trials"])
    return BenchReport(
        trials=trials,
        mean_speedup=float(doc["mean_speedup"]),
        median_speedup=float(doc["median_speedup"]),
        min_speedup=float(doc["min_speedup"]),
        max_speedup=float(doc["max_speedup"]),
        frac_speedup_ge_1_5=float(doc["frac_speedup_ge_1_5"]),
        violations_heuristic=int(doc["violations_heuristic"]),
        violations_fairness=int(doc["violations_fairness"]),
        histogram_edges=tuple(doc["histogram"]["edges"]),
        histogram_counts=tuple(doc["histogram"]["counts"]),
        n_trials=int(doc["n_trials"]), seed=int(doc["seed"]),
        jitter=float(doc["jitter"]), num_samples=int(doc["num_samples"]),
        num_epoch=int(doc["num_epoch"]))


def save_bench_report(report: BenchReport, path) -> None:
    Path(path).write_text(json.dumps(bench_report_to_doc(report), indent=2) + "\n")


def load_bench_report(source) -> BenchReport:
    return bench_report_from_doc(_load_doc(source))


def render_report(report: BenchReport) -> str:
    """Markdown summary of a bench run."""
    lines = [
        "# Scheduling bench",
        "",
        f"- trials: {report.n_trials} (seed {report.seed}, jitter {report.jitter})",
        f"- job: {report.num_samples} samples, {report.num_epoch} epochs",
        f"- mean speedup over equal sharding: **{report.mean_speedup:.3f}x**",
        f"- median {report.median_speedup:.3f}x, range "
        f"[{report.min_speedup:.3f}x, {report.max_speedup:.3f}x]",
        f"- trials at or above 1.5x: {100 * report.frac_speedup_ge_1_5:.1f}%",
        f"- background deadline violations: {report.violations_heuristic} "
        f"(interference-aware) vs {report.violations_fairness} (equal sharding)",
        "",
        "## Speedup histogram",
        "",
        "| bin | count |",
        "| --- | --- |",
    ]
    edges = report.histogram_edges
    for i, count in enumerate(report.histogram_counts):
        lines.append(f"| {edges[i]:.1f} to {edges[i + 1]:.1f} | {count} |")
    under = sum(1 for tr in report.trials if tr.speedup < edges[0])
    over = sum(1 for tr in report.trials if tr.speedup >= edges[-1])
    if under or over:
        lines.append(f"| outside | {under + over} |")
    lines.append("")
    return "\n".join(lines)


def save_histogram_csv(report: BenchReport, path) -> None:
    rows = ["bin_low,bin_high,count"]
    for i, count in enumerate(report.histogram_counts):
        rows.append(f"{report.histogram_edges[i]:.2f},"
                    f"{report.histogram_edges[i + 1]:.2f},{count}")
    Path(path).write_text("\n".join(rows) + "\n")
