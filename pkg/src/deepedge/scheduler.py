"""Interference-aware shard and batch assignment.

``solve`` searches for the cheapest feasible assignment of training samples
and batch sizes across a heterogeneous cluster:

1. Workers that cannot fit any batch under the memory ceiling are excluded
   up front.
2. An inner fixed-point loop alternates between picking batch sizes for the
   current shares and re-dividing samples proportionally to per-sample
   throughput, until shares stop moving (L2 change <= epsilon) or an
   iteration cap is hit. The first pass sizes batches by memory alone, so
   background deadlines are first checked at the largest batch a worker
   could run; any violator is dropped and the loop restarts without it.
3. Float shares become integers by remainder rounding that keeps the load
   spread within one sample, each worker's batch size gets a refinement
   scan, and single samples are shifted between workers when that removes
   a wasted partial round without upsetting the balance.
4. An outer loop removes the slowest remaining worker and repeats while the
   predicted epoch time keeps improving; the best candidate wins (ties go
   to the cheaper plan).

``fairness_plan`` is the baseline: equal shards for everyone, no interference
checks, no refinement.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .cluster import (ClusterSpec, JobSpec, NodeState, ValidationError, WorkerSpec,
                      SCHEMA_VERSION, _load_doc, _check_schema, validate)
from .estimators import EstimatorBundle, bundle_for, default_registry


class InfeasibleScheduleError(RuntimeError):
    """No worker can run the job within its memory and deadline constraints."""


def epoch_time(num_samples: int, batch_size: int, t_compute: float, t_update: float) -> float:
    """Seconds for one epoch: every round costs a full batch plus one exchange.

    The final short round is charged like a full one; devices reserve and
    sync the same buffers regardless of how many samples arrived.
    """
    if num_samples < 0 or batch_size < 1:
        raise ValueError(f"need num_samples >= 0 and batch_size >= 1, "
                         f"got {num_samples}, {batch_size}")
    rounds = math.ceil(num_samples / batch_size)
    return rounds * (batch_size * t_compute + t_update)


def check_pressure(worker: WorkerSpec, bundle: EstimatorBundle,
                   batch_size: int) -> tuple[bool, dict]:
    """Whether every background task on this worker still meets its deadline
    once a batch of the given size is training there.

    Returns (ok, app_id -> projected exec time). A batch of zero means no
    training task lands on the worker, so nothing can be pressured.
    """
    if batch_size == 0:
        return True, {}
    projected = bundle.est_state(worker.initial_state, batch_size)
    exec_times = {app.id: bundle.est_exec_time(projected) for app in worker.background_apps}
    ok = all(exec_times[app.id] <= app.deadline for app in worker.background_apps)
    return ok, exec_times


# --- plan structures ------------------------------------------------------------


@dataclass(frozen=True)
class CostBreakdown:
    transfer: float
    init: float
    train: float
    total: float

    @staticmethod
    def build(transfer: float, init: float, train: float) -> "CostBreakdown":
        return CostBreakdown(transfer, init, train, transfer + init + train)


@dataclass(frozen=True)
class Assignment:
    worker_id: str
    num_samples: int
    batch_size: int
    t_compute: float
    t_update: float
    t_total: float
    epoch_time: float
    cost: CostBreakdown


@dataclass(frozen=True)
class Removal:
    worker_id: str
    reason: str  # "pressure" or "slowest"
    detail: str = ""


@dataclass(frozen=True)
class SolveAudit:
    """Converged inner-loop state, kept so plans can be checked after the fact.

    ``shares`` are the float sample shares exactly proportional to inverse
    ``t_total`` (per-sample seconds) at loop exit; integer assignments come
    from rounding these. ``batches`` are the loop's batch choices before the
    final refinement pass.
    """

    iterations: int
    converged: bool
    shares: dict
    t_total: dict
    batches: dict
    candidates_considered: int = 1


@dataclass(frozen=True)
class Plan:
    method: str
    num_epoch: int
    total_cost: float
    assignments: tuple
    removed: tuple = ()
    audit: SolveAudit | None = None

    @property
    def epoch_time(self) -> float:
        return max((a.epoch_time for a in self.assignments), default=0.0)

    @property
    def num_samples(self) -> int:
        return sum(a.num_samples for a in self.assignments)

    def assignment_for(self, worker_id: str) -> Assignment:
        for a in self.assignments:
            if a.worker_id == worker_id:
                return a
        raise KeyError(f"plan has no assignment for worker '{worker_id}'")

    def shares(self) -> dict:
        return {a.worker_id: a.num_samples for a in self.assignments}

    def batches(self) -> dict:
        return {a.worker_id: a.batch_size for a in self.assignments}


# --- shared helpers -------------------------------------------------------------


def _transfer_rate(worker: WorkerSpec, store: str) -> float:
    rate = worker.per_sample_transfer_cost.get(store)
    if rate is None:
        raise ValidationError(f"worker '{worker.id}' has no transfer cost for "
                              f"data store '{store}'")
    return rate


def _worker_times(worker: WorkerSpec, bundle: EstimatorBundle, ps_state: NodeState,
                  batch_size: int, n_workers: int) -> tuple[float, float, float]:
    t_c = bundle.est_compute_time(worker.initial_state, batch_size)
    t_u = bundle.est_update_time(worker.initial_state, batch_size, ps_state, n_workers)
    return t_c, t_u, t_c + t_u / batch_size


def largest_remainder(shares: dict, total: int, weight: dict) -> dict:
    """Round float shares to integers summing to ``total``.

    Everyone keeps the floor of their share; each leftover unit goes to the
    worker whose rounded-up load product grows the least, i.e. the smallest
    (1 - frac) * weight, with ties to the smaller weight then the smaller id.
    Giving the spare samples to the fastest workers this way keeps every
    d * weight within one sample's weight of the rest.
    """
    floors = {wid: int(math.floor(s)) for wid, s in shares.items()}
    fracs = {wid: shares[wid] - floors[wid] for wid in shares}
    out = dict(floors)
    leftover = total - sum(floors.values())
    order = sorted(shares, key=lambda wid: ((1.0 - fracs[wid]) * weight[wid],
                                            weight[wid], wid))
    i = 0
    while leftover > 0 and order:
        out[order[i % len(order)]] += 1
        leftover -= 1
        i += 1
    # float drift in the shares can leave the floors summing past the total
    shrink = sorted(shares, key=lambda wid: ((1.0 + fracs[wid]) * weight[wid],
                                             weight[wid], wid))
    i = 0
    while leftover < 0 and any(out[w] > 0 for w in out):
        wid = shrink[i % len(shrink)]
        if out[wid] > 0:
            out[wid] -= 1
            leftover += 1
        i += 1
    return out


# --- the solver -----------------------------------------------------------------


def _converge(active: list, cluster: ClusterSpec, job: JobSpec, bundles: dict,
              maxbatch: dict, removal_log: list):
    """Run the fixed-point loop, dropping pressure violators, until stable.

    The first pass treats every shard as unbounded, so batch sizes start at
    the memory-feasible maximum; pressure is therefore first checked at the
    largest batch a worker could ever run. A drop restarts the loop (and the
    iteration counter) over the survivors. Returns (surviving workers,
    shares, t_total, batches, iterations, converged) or None once nobody
    is left.
    """
    active = list(active)
    while active:
        n = len(active)
        shares = None
        iters = 0
        converged = False
        dropped = False
        t_total: dict = {}
        batches: dict = {}
        while iters < job.tau:
            iters += 1
            batches = {}
            for w in active:
                if shares is None:
                    b = maxbatch[w.id]
                else:
                    b = min(maxbatch[w.id], max(w.b_min, int(shares[w.id])))
                batches[w.id] = max(w.b_min, b)
            violators = []
            for w in active:
                ok, exec_times = check_pressure(w, bundles[w.id], batches[w.id])
                if not ok:
                    worst = max(exec_times, key=exec_times.get) if exec_times else ""
                    violators.append((w, worst, exec_times.get(worst, 0.0)))
            if violators:
                for w, app, t in violators:
                    removal_log.append(Removal(
                        w.id, "pressure",
                        f"background task '{app}' projected at {t:.4f} s over its "
                        f"deadline with batch {batches[w.id]}"))
                removed_ids = {w.id for w, _, _ in violators}
                active = [w for w in active if w.id not in removed_ids]
                dropped = True
                break
            t_total = {}
            for w in active:
                _, _, t = _worker_times(w, bundles[w.id], cluster.ps_state,
                                        batches[w.id], n)
                t_total[w.id] = t
            inv_sum = sum(1.0 / t for t in t_total.values())
            new_shares = {wid: job.num_samples / (t_total[wid] * inv_sum)
                          for wid in t_total}
            if shares is not None:
                delta = math.sqrt(sum((new_shares[wid] - shares[wid]) ** 2
                                      for wid in shares))
                if delta <= job.epsilon:
                    shares = new_shares
                    converged = True
                    break
            shares = new_shares
        if dropped:
            continue
        return active, shares, t_total, batches, iters, converged
    return None


def _refine_batch(worker: WorkerSpec, bundle: EstimatorBundle, ps_state: NodeState,
                  num_samples: int, n_workers: int, maxbatch: dict) -> int:
    """Best batch size for a fixed shard: smallest true epoch time wins."""
    hi = min(maxbatch[worker.id], num_samples)
    best_b, best_ep = None, None
    for b in range(worker.b_min, hi + 1):
        ok, _ = check_pressure(worker, bundle, b)
        if not ok:
            continue
        t_c, t_u, _ = _worker_times(worker, bundle, ps_state, b, n_workers)
        ep = epoch_time(num_samples, b, t_c, t_u)
        if best_ep is None or ep < best_ep or (ep == best_ep and b > best_b):
            best_b, best_ep = b, ep
    if best_b is None:
        # b_min passed the up-front deadline check, so this cannot trigger for
        # solver-produced shards; kept as a guard for direct callers
        best_b = worker.b_min
    return best_b


def _one_assignment(worker: WorkerSpec, d: int, n: int, cluster: ClusterSpec,
                    job: JobSpec, bundle: EstimatorBundle, maxbatch: dict,
                    refine: bool) -> Assignment:
    if refine:
        b = _refine_batch(worker, bundle, cluster.ps_state, d, n, maxbatch)
    else:
        # the naive rule: memory cap or the whole shard, whichever is smaller
        b = max(1, min(maxbatch[worker.id], d))
    t_c, t_u, t = _worker_times(worker, bundle, cluster.ps_state, b, n)
    ep = epoch_time(d, b, t_c, t_u)
    cost = CostBreakdown.build(
        transfer=_transfer_rate(worker, job.source_store) * d,
        init=worker.init_cost,
        train=ep * job.num_epoch,
    )
    return Assignment(worker.id, d, b, t_c, t_u, t, ep, cost)


def _build_assignments(workers: list, int_shares: dict, cluster: ClusterSpec,
                       job: JobSpec, bundles: dict, maxbatch: dict,
                       refine: bool) -> list:
    assigned = [w for w in workers if int_shares[w.id] > 0]
    n = len(assigned)
    return [_one_assignment(w, int_shares[w.id], n, cluster, job, bundles[w.id],
                            maxbatch, refine) for w in assigned]


def _polish_shares(assignments: list, workers: dict, loop_t: dict,
                   cluster: ClusterSpec, job: JobSpec, bundles: dict,
                   maxbatch: dict) -> list:
    """Shift single samples off the slowest worker while balance allows it.

    Rounded shares can leave a worker a sample or two past a round boundary,
    paying a whole extra pass over its batch for the overhang. Moving one
    sample to another worker removes that round. A move is applied only when
    it strictly lowers the plan's epoch time (cost as tie-break) and keeps
    every d * t within one sample's time of the rest, so the shards stay
    honest to the converged proportions.
    """
    by_id = {a.worker_id: a for a in assignments}
    if len(by_id) < 2:
        return assignments
    n = len(by_id)
    ids = sorted(by_id)
    bound = max(loop_t[wid] for wid in ids) * (1.0 + 1e-9)

    def balanced(shares: dict) -> bool:
        products = [shares[wid] * loop_t[wid] for wid in ids]
        return max(products) - min(products) <= bound

    while True:
        cur_epoch = max(a.epoch_time for a in by_id.values())
        cur_cost = max(a.cost.total for a in by_id.values())
        best = None
        for donor in ids:
            if by_id[donor].epoch_time != cur_epoch:
                continue
            if by_id[donor].num_samples - 1 < max(1, workers[donor].b_min):
                continue
            for rec in ids:
                if rec == donor:
                    continue
                shares = {wid: by_id[wid].num_samples for wid in ids}
                shares[donor] -= 1
                shares[rec] += 1
                if not balanced(shares):
                    continue
                trial = dict(by_id)
                trial[donor] = _one_assignment(
                    workers[donor], shares[donor], n, cluster, job,
                    bundles[donor], maxbatch, refine=True)
                trial[rec] = _one_assignment(
                    workers[rec], shares[rec], n, cluster, job,
                    bundles[rec], maxbatch, refine=True)
                epoch = max(a.epoch_time for a in trial.values())
                cost = max(a.cost.total for a in trial.values())
                if (epoch, cost) >= (cur_epoch, cur_cost):
                    continue
                key = (epoch, cost, donor, rec)
                if best is None or key < best[0]:
                    best = (key, trial)
        if best is None:
            return [by_id[a.worker_id] for a in assignments]
        by_id = best[1]


def total_cost(assignments) -> float:
    return max((a.cost.total for a in assignments), default=0.0)


def solve(cluster: ClusterSpec, job: JobSpec, registry: dict | None = None,
          mem_ceiling: float = 0.95) -> Plan:
    """Find a low-cost feasible plan; raises InfeasibleScheduleError if none exists."""
    registry = registry if registry is not None else default_registry()
    problems = validate(cluster, job)
    if problems:
        raise ValidationError("; ".join(problems))

    bundles = {w.id: bundle_for(registry, w.device_class) for w in cluster.workers}
    removal_log: list = []
    maxbatch: dict = {}
    eligible = []
    for w in cluster.workers:
        mb = bundles[w.id].max_batch_size(w.initial_state.mem_util, w.b_min, w.b_max,
                                          mem_ceiling)
        maxbatch[w.id] = mb
        if mb == 0:
            removal_log.append(Removal(
                w.id, "pressure",
                f"no batch in [{w.b_min}, {w.b_max}] keeps projected memory "
                f"under {mem_ceiling:.2f}"))
            continue
        eligible.append(w)

    candidates = []  # (epoch time, total cost, assignments, audit, removal log length)
    active = eligible
    n_attempts = 0
    while active:
        result = _converge(active, cluster, job, bundles, maxbatch, removal_log)
        if result is None:
            break
        active, shares, t_total, batches, iters, converged = result
        int_shares = largest_remainder(shares, job.num_samples, t_total)
        # a shard below the worker's minimum batch size cannot be trained on;
        # shed those workers and redistribute from scratch
        starved = [w for w in active if 0 < int_shares[w.id] < w.b_min]
        if starved:
            for w in starved:
                removal_log.append(Removal(
                    w.id, "pressure",
                    f"rounded shard {int_shares[w.id]} is below the minimum "
                    f"batch size {w.b_min}"))
            starved_ids = {w.id for w in starved}
            active = [w for w in active if w.id not in starved_ids]
            continue
        n_attempts += 1
        assignments = _build_assignments(active, int_shares, cluster, job,
                                         bundles, maxbatch, refine=True)
        assignments = _polish_shares(assignments, {w.id: w for w in active},
                                     t_total, cluster, job, bundles, maxbatch)
        audit = SolveAudit(iterations=iters, converged=converged,
                           shares=dict(shares), t_total=dict(t_total),
                           batches=dict(batches),
                           candidates_considered=n_attempts)
        epoch = max(a.epoch_time for a in assignments)
        improved = not candidates or epoch < min(c[0] for c in candidates)
        candidates.append((epoch, total_cost(assignments), assignments, audit,
                           len(removal_log)))
        if not improved or len(active) <= 1:
            break
        slowest = max(active, key=lambda w: t_total[w.id])
        removal_log.append(Removal(
            slowest.id, "slowest",
            f"dropped while searching for a faster plan; per-sample time "
            f"{t_total[slowest.id]:.4f} s"))
        active = [w for w in active if w.id != slowest.id]

    if not candidates:
        raise InfeasibleScheduleError(
            "no eligible workers: " +
            "; ".join(f"{r.worker_id}: {r.detail}" for r in removal_log))
    _, best_cost, best_assignments, best_audit, log_len = min(
        candidates, key=lambda c: (c[0], c[1], -len(c[2])))
    final_audit = SolveAudit(
        iterations=best_audit.iterations, converged=best_audit.converged,
        shares=best_audit.shares, t_total=best_audit.t_total,
        batches=best_audit.batches, candidates_considered=len(candidates))
    return Plan(method="heuristic", num_epoch=job.num_epoch, total_cost=best_cost,
                assignments=tuple(best_assignments),
                removed=tuple(removal_log[:log_len]), audit=final_audit)


def fairness_plan(cluster: ClusterSpec, job: JobSpec, registry: dict | None = None,
                  mem_ceiling: float = 0.95) -> Plan:
    """Equal shards for every worker, no interference awareness.

    The remainder goes to the lowest worker ids; batch size is capped by the
    memory scan but deadlines of co-located tasks are ignored.
    """
    registry = registry if registry is not None else default_registry()
    problems = validate(cluster, job)
    if problems:
        raise ValidationError("; ".join(problems))
    workers = sorted(cluster.workers, key=lambda w: w.id)
    n = len(workers)
    base, extra = divmod(job.num_samples, n)
    int_shares = {w.id: base + (1 if i < extra else 0) for i, w in enumerate(workers)}
    bundles = {w.id: bundle_for(registry, w.device_class) for w in cluster.workers}
    maxbatch = {w.id: bundles[w.id].max_batch_size(w.initial_state.mem_util, w.b_min,
                                                   w.b_max, mem_ceiling)
                for w in workers}
    assignments = _build_assignments(workers, int_shares, cluster, job, bundles,
                                     maxbatch, refine=False)
    shares = {w.id: job.num_samples / n for w in workers}
    audit = SolveAudit(iterations=0, converged=True, shares=shares,
                       t_total={a.worker_id: a.t_total for a in assignments},
                       batches={a.worker_id: a.batch_size for a in assignments})
    return Plan(method="fairness", num_epoch=job.num_epoch,
                total_cost=total_cost(assignments),
                assignments=tuple(assignments), removed=(), audit=audit)


# --- plan documents --------------------------------------------------------------


def plan_to_doc(plan: Plan) -> dict:
    doc = {
        "schema": SCHEMA_VERSION,
        "method": plan.method,
        "num_epoch": plan.num_epoch,
        "total_cost": plan.total_cost,
        "assignments": [
            {
                "worker": a.worker_id,
                "num_samples": a.num_samples,
                "batch_size": a.batch_size,
                "t_compute": a.t_compute,
                "t_update": a.t_update,
                "t_total": a.t_total,
                "epoch_time": a.epoch_time,
                "cost": {"transfer": a.cost.transfer, "init": a.cost.init,
                         "train": a.cost.train, "total": a.cost.total},
            }
            for a in plan.assignments
        ],
        "removed": [{"worker": r.worker_id, "reason": r.reason, "detail": r.detail}
                    for r in plan.removed],
    }
    if plan.audit is not None:
        doc["audit"] = {
            "iterations": plan.audit.iterations,
            "converged": plan.audit.converged,
            "shares": plan.audit.shares,
            "t_total": plan.audit.t_total,
            "batches": plan.audit.batches,
            "candidates_considered": plan.audit.candidates_considered,
        }
    return doc


def plan_from_doc(doc: dict) -> Plan:
    _check_schema(doc, "plan")
    allowed = {"schema", "method", "num_epoch", "total_cost", "assignments",
               "removed", "audit"}
    for key in doc:
        if key not in allowed:
            raise ValidationError(f"plan: unknown field '{key}'")
    for key in ("method", "num_epoch", "total_cost", "assignments"):
        if key not in doc:
            raise ValidationError(f"plan.{key}: missing")
    assignments = []
    for i, a in enumerate(doc["assignments"]):
        ctx = f"plan.assignments[{i}]"
        needed = {"worker", "num_samples", "batch_size", "t_compute", "t_update",
                  "t_total", "epoch_time", "cost"}
        for key in a:
            if key not in needed:
                raise ValidationError(f"{ctx}: unknown field '{key}'")
        for key in needed:
            if key not in a:
                raise ValidationError(f"{ctx}.{key}: missing")
        c = a["cost"]
        assignments.append(Assignment(
            a["worker"], int(a["num_samples"]), int(a["batch_size"]),
            float(a["t_compute"]), float(a["t_update"]), float(a["t_total"]),
            float(a["epoch_time"]),
            CostBreakdown(float(c["transfer"]), float(c["init"]),
                          float(c["train"]), float(c["total"]))))
    removed = tuple(Removal(r["worker"], r["reason"], r.get("detail", ""))
                    for r in doc.get("removed", []))
    audit = None
    if "audit" in doc:
        ad = doc["audit"]
        audit = SolveAudit(int(ad["iterations"]), bool(ad["converged"]),
                           dict(ad["shares"]), dict(ad["t_total"]),
                           dict(ad["batches"]),
                           int(ad.get("candidates_considered", 1)))
    return Plan(method=doc["method"], num_epoch=int(doc["num_epoch"]),
                total_cost=float(doc["total_cost"]), assignments=tuple(assignments),
                removed=removed, audit=audit)


def load_plan(source) -> Plan:
    return plan_from_doc(_load_doc(source))


def save_plan(plan: Plan, path) -> None:
    Path(path).write_text(json.dumps(plan_to_doc(plan), indent=2) + "\n")
