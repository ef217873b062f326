import math

import numpy as np
import pytest

from deepedge import (BackgroundApp, ClusterSpec, CrashEvent, EstimatorBundle,
                      JobSpec, NodeState, ParametricProfile, SimConfig,
                      ValidationError, WorkerSpec, default_testbed, fairness_plan,
                      inject_and_recover, load_trace, save_trace, simulate, solve)

STORE = "s"


def flat_registry(**kwargs):
    prof = ParametricProfile(base_forward=kwargs.pop("base_forward", 0.5),
                             base_mem_footprint=0.0, mem_per_batch_unit=0.0,
                             **kwargs)
    return {"flat": EstimatorBundle(device_class="flat", profile=prof)}


def flat_cluster(n=1, b_max=10, b_min=1, init=0.0, transfer=0.0):
    workers = tuple(
        WorkerSpec(id=f"w{i}", device_class="flat", initial_state=NodeState(0, 0, 0),
                   b_min=b_min, b_max=b_max, init_cost=init,
                   per_sample_transfer_cost={STORE: transfer})
        for i in range(n))
    return ClusterSpec(workers=workers, ps_state=NodeState(0, 0, 0),
                       data_stores=(STORE,))


def test_degenerate_pipeline_makespan():
    cluster = flat_cluster(n=1, b_max=10)
    job = JobSpec(num_samples=100, num_epoch=2, source_store=STORE)
    reg = flat_registry(base_forward=1.0)
    plan = solve(cluster, job, reg)
    res = simulate(cluster, job, plan, reg, seed=0)
    assert res.status == "completed"
    assert res.makespan == pytest.approx(200.0, abs=1e-9)
    assert res.rounds_completed == {"w0": 20}
    assert res.epochs_completed == {"w0": 2}


def test_fifo_collision_delays_second_pusher():
    # two identical workers push at the same instant; the server holds the
    # second for exactly one 2 s service
    reg = flat_registry(ps_update=2.0)
    cluster = flat_cluster(n=2, b_max=4, b_min=4)
    job = JobSpec(num_samples=16, num_epoch=1, source_store=STORE)
    plan = solve(cluster, job, reg)
    assert {a.worker_id: a.num_samples for a in plan.assignments} == {"w0": 8, "w1": 8}
    res = simulate(cluster, job, plan, reg, seed=0,
                   config=SimConfig(trace_level="rounds"))
    starts = {}
    for ev in res.trace:
        if ev.event == "ps_service_start" and ev.detail == "round 1":
            starts[ev.worker] = ev.time
    assert starts["w1"] - starts["w0"] == pytest.approx(2.0)
    assert res.worker_finish["w1"] - res.worker_finish["w0"] == pytest.approx(2.0)


def test_simulation_deterministic():
    cluster = default_testbed()
    job = JobSpec(num_samples=900, num_epoch=2, source_store="store-0")
    plan = solve(cluster, job)
    cfg = SimConfig(jitter=0.05)
    a = simulate(cluster, job, plan, seed=42, config=cfg)
    b = simulate(cluster, job, plan, seed=42, config=cfg)
    assert a == b
    c = simulate(cluster, job, plan, seed=43, config=cfg)
    assert c.makespan != a.makespan


def test_jitter_perturbs_but_stays_positive():
    cluster = flat_cluster(n=1, b_max=8)
    job = JobSpec(num_samples=64, num_epoch=1, source_store=STORE)
    reg = flat_registry()
    plan = solve(cluster, job, reg)
    base = simulate(cluster, job, plan, reg, seed=0).makespan
    for seed in range(10):
        noisy = simulate(cluster, job, plan, reg, seed=seed,
                         config=SimConfig(jitter=0.8))
        assert noisy.makespan > 0
    assert simulate(cluster, job, plan, reg, seed=1,
                    config=SimConfig(jitter=0.3)).makespan != base


def test_crash_interrupts_training():
    cluster = default_testbed()
    job = JobSpec(num_samples=2000, num_epoch=2, source_store="store-0")
    plan = solve(cluster, job)
    cfg = SimConfig(crashes=(CrashEvent("nano-1", 20.0),))
    res = simulate(cluster, job, plan, seed=0, config=cfg)
    assert res.status == "interrupted"
    assert res.crash.worker_id == "nano-1"
    assert res.crash.fire_time == pytest.approx(20.0)
    assert res.crash.detect_time > res.crash.fire_time
    assert res.crash.detect_time <= res.crash.fire_time + 1.0 + 1e-9


def test_crash_outside_training_window_is_ignored():
    cluster = default_testbed()
    job = JobSpec(num_samples=2000, num_epoch=2, source_store="store-0")
    plan = solve(cluster, job)
    # transfer plus init keeps every worker warming up until ~5.4 s
    cfg = SimConfig(crashes=(CrashEvent("nano-1", 2.0),))
    res = simulate(cluster, job, plan, seed=0, config=cfg)
    assert res.status == "completed"
    assert res.crash is None


def test_unknown_worker_ids_rejected():
    cluster = flat_cluster(n=1)
    job = JobSpec(num_samples=10, num_epoch=1, source_store=STORE)
    reg = flat_registry()
    plan = solve(cluster, job, reg)
    with pytest.raises(ValidationError, match="ghost"):
        simulate(cluster, job, plan, reg, seed=0,
                 config=SimConfig(crashes=(CrashEvent("ghost", 1.0),)))
    # a plan naming a worker the cluster lacks is a mismatch, not a no-op
    two = flat_cluster(n=2, b_max=10)
    wide_plan = solve(two, JobSpec(num_samples=20, num_epoch=1, source_store=STORE), reg)
    with pytest.raises(ValidationError, match="w1"):
        simulate(cluster, job, wide_plan, reg, seed=0)


def test_work_conservation_round_counts():
    rng = np.random.default_rng(29)
    cluster = default_testbed()
    for trial in range(10):
        job = JobSpec(num_samples=int(rng.integers(200, 2500)),
                      num_epoch=int(rng.integers(1, 3)), source_store="store-0")
        plan = solve(cluster, job)
        res = simulate(cluster, job, plan, seed=trial)
        assert res.status == "completed"
        for a in plan.assignments:
            rounds = math.ceil(a.num_samples / a.batch_size)
            assert res.rounds_completed[a.worker_id] == rounds * job.num_epoch


def test_extra_worker_never_speeds_up_the_first():
    # FIFO server: an identical second worker with an identical shard can only
    # add contention for w0
    reg = flat_registry(ps_update=1.0)
    job = JobSpec(num_samples=40, num_epoch=1, source_store=STORE)
    solo_cluster = flat_cluster(n=1, b_max=4, b_min=4)
    solo_plan = solve(solo_cluster, job, reg)
    solo = simulate(solo_cluster, job, solo_plan, reg, seed=0)

    pair_cluster = flat_cluster(n=2, b_max=4, b_min=4)
    pair_job = JobSpec(num_samples=80, num_epoch=1, source_store=STORE)
    pair_plan = solve(pair_cluster, pair_job, reg)
    assert pair_plan.assignment_for("w0").num_samples == 40
    pair = simulate(pair_cluster, pair_job, pair_plan, reg, seed=0)
    assert pair.worker_finish["w0"] >= solo.worker_finish["w0"] - 1e-9


def test_background_violations_logged_for_naive_plan():
    cluster = default_testbed(stressed=True)
    job = JobSpec(num_samples=1200, num_epoch=1, source_store="store-0")
    naive = fairness_plan(cluster, job)
    res = simulate(cluster, job, naive, seed=0)
    assert any(v.worker_id == "nano-0" for v in res.violations)
    for v in res.violations:
        assert v.exec_time > v.deadline
    # the interference-aware plan avoids the pressured worker entirely
    smart = solve(cluster, job)
    clean = simulate(cluster, job, smart, seed=0)
    assert clean.violations == ()


def test_trace_round_trip(tmp_path):
    cluster = default_testbed()
    job = JobSpec(num_samples=600, num_epoch=1, source_store="store-0")
    plan = solve(cluster, job)
    res = simulate(cluster, job, plan, seed=0, config=SimConfig(trace_level="rounds"))
    path = tmp_path / "trace.csv"
    save_trace(res.trace, path)
    again = load_trace(path)
    assert len(again) == len(res.trace)
    for a, b in zip(again, res.trace):
        assert a.worker == b.worker and a.event == b.event
        assert a.time == pytest.approx(b.time, abs=1e-6)


def test_recovery_empty_script_matches_plain_simulation():
    cluster = default_testbed()
    job = JobSpec(num_samples=1000, num_epoch=2, source_store="store-0")
    plan = solve(cluster, job)
    rec = inject_and_recover(cluster, job, seed=0, plan=plan)
    assert rec.status == "completed"
    assert len(rec.attempts) == 1
    assert rec.excluded == ()
    direct = simulate(cluster, job, plan, seed=rec_attempt_seed(0, 0))
    assert rec.total_time == pytest.approx(direct.makespan)


def rec_attempt_seed(seed, attempt):
    return int(np.random.SeedSequence([seed, attempt]).generate_state(1)[0])


def test_single_strike_keeps_worker_in_the_pool():
    cluster = default_testbed()
    job = JobSpec(num_samples=2000, num_epoch=2, source_store="store-0")
    cfg = SimConfig(crashes=(CrashEvent("nano-0", 8.0),))
    rec = inject_and_recover(cluster, job, seed=0, config=cfg)
    assert rec.status == "completed"
    assert rec.strikes == {"nano-0": 1}
    assert rec.excluded == ()
    kinds = [ev.kind for ev in rec.events]
    assert kinds == ["crash", "detected", "retriggered", "completed"]
    # the second attempt still schedules the struck worker
    assert any(a.worker_id == "nano-0" for a in rec.plans[1].assignments)


def test_three_strikes_exclude_the_worker():
    cluster = default_testbed()
    job = JobSpec(num_samples=2000, num_epoch=2, source_store="store-0")
    cfg = SimConfig(crashes=(CrashEvent("nano-0", 8.0), CrashEvent("nano-0", 30.0),
                             CrashEvent("nano-0", 60.0)))
    rec = inject_and_recover(cluster, job, seed=0, config=cfg)
    assert rec.status == "completed"
    assert rec.strikes == {"nano-0": 3}
    assert rec.excluded == ("nano-0",)
    assert all(a.worker_id != "nano-0" for a in rec.plans[-1].assignments)
    assert [ev.kind for ev in rec.events].count("retriggered") == 3


def test_striking_out_every_worker_abandons():
    cluster = default_testbed()
    job = JobSpec(num_samples=2000, num_epoch=2, source_store="store-0")
    cfg = SimConfig(max_strikes=1, crashes=(
        CrashEvent("nano-0", 10.0), CrashEvent("nano-1", 60.0),
        CrashEvent("nano-2", 140.0), CrashEvent("tx2-0", 260.0)))
    rec = inject_and_recover(cluster, job, seed=0, config=cfg)
    assert rec.status == "abandoned"
    assert set(rec.excluded) == {"nano-0", "nano-1", "nano-2", "tx2-0"}
    assert rec.events[-1].kind == "abandoned"
