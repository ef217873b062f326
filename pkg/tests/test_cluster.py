import json

import numpy as np
import pytest

from deepedge import (BackgroundApp, ClusterSpec, JobSpec, NodeState, ParseError,
                      ValidationError, WorkerSpec, cluster_from_doc, default_testbed,
                      job_from_doc, load_cluster, load_job, save_cluster, save_job,
                      validate)
from deepedge.cluster import cluster_to_doc, job_to_doc


def minimal_doc():
    return {
        "schema": 1,
        "data_stores": ["s0"],
        "ps_state": {"cpu_util": 0.1, "gpu_util": 0.0, "mem_util": 0.2},
        "workers": [
            {
                "id": "w0",
                "device_class": "tx2",
                "initial_state": {"cpu_util": 0.0, "gpu_util": 0.0, "mem_util": 0.0},
                "b_min": 1,
                "b_max": 8,
                "init_cost": 0.0,
                "per_sample_transfer_cost": {"s0": 0.001},
            }
        ],
    }


def test_minimal_document_parses():
    cluster = cluster_from_doc(minimal_doc())
    assert len(cluster.workers) == 1
    assert cluster.workers[0].id == "w0"
    assert cluster.data_stores == ("s0",)


def test_out_of_range_utilization_names_the_field():
    doc = minimal_doc()
    doc["workers"][0]["initial_state"]["cpu_util"] = 1.3
    with pytest.raises(ValidationError, match="cpu_util"):
        cluster_from_doc(doc)


def test_percentage_strings_normalize():
    doc = minimal_doc()
    doc["workers"][0]["initial_state"]["cpu_util"] = "88%"
    cluster = cluster_from_doc(doc)
    assert cluster.workers[0].initial_state.cpu_util == pytest.approx(0.88)


def test_unknown_fields_rejected():
    doc = minimal_doc()
    doc["workers"][0]["b_mx"] = 8
    with pytest.raises(ValidationError, match="b_mx"):
        cluster_from_doc(doc)


def test_default_testbed_shape():
    cluster = default_testbed()
    assert len(cluster.workers) == 4
    classes = sorted(w.device_class for w in cluster.workers)
    assert classes == ["nano", "nano", "nano", "tx2"]
    assert cluster.data_stores == ("store-0",)
    for w in cluster.workers:
        assert len(w.background_apps) == 1
        assert w.background_apps[0].deadline == pytest.approx(0.2)


def test_validate_accepts_good_pair():
    cluster = default_testbed()
    job = JobSpec(num_samples=100, num_epoch=1, source_store="store-0")
    assert validate(cluster, job) == []


def test_validate_flags_unknown_store():
    cluster = default_testbed()
    job = JobSpec(num_samples=100, num_epoch=1, source_store="nowhere")
    problems = validate(cluster, job)
    assert len(problems) == 1
    assert "nowhere" in problems[0]


def test_worker_batch_bounds_checked():
    w = WorkerSpec(id="w", device_class="tx2", initial_state=NodeState(0, 0, 0),
                   b_min=8, b_max=2)
    problems = w.violations()
    assert len(problems) == 1
    assert "b_max" in problems[0]


def test_node_state_rejects_bad_values():
    with pytest.raises(ValidationError):
        NodeState(-0.1, 0.0, 0.0)
    with pytest.raises(ValidationError):
        NodeState(0.0, float("nan"), 0.0)
    with pytest.raises(ValidationError):
        NodeState(0.0, 0.0, True)


def test_duplicate_ids_flagged():
    w = WorkerSpec(id="w", device_class="tx2", initial_state=NodeState(0, 0, 0),
                   b_min=1, b_max=4)
    cluster = ClusterSpec(workers=(w, w), ps_state=NodeState(0, 0, 0),
                          data_stores=("s", "s"))
    problems = cluster.violations()
    assert any("duplicate worker id" in p for p in problems)
    assert any("duplicate store id" in p for p in problems)


def test_background_app_needs_positive_deadline():
    app = BackgroundApp(id="a", deadline=0.0)
    assert any("deadline" in p for p in app.violations())


def test_cluster_round_trip(tmp_path):
    cluster = default_testbed(stressed=True)
    path = tmp_path / "cluster.json"
    save_cluster(cluster, path)
    again = load_cluster(path)
    assert again == cluster


def test_job_round_trip(tmp_path):
    job = JobSpec(num_samples=3855, num_epoch=4, source_store="store-0",
                  target_accuracy=0.9, epsilon=0.5, tau=40)
    path = tmp_path / "job.json"
    save_job(job, path)
    assert load_job(path) == job


def test_doc_round_trip_equality():
    cluster = default_testbed()
    assert cluster_from_doc(cluster_to_doc(cluster)) == cluster
    job = JobSpec(num_samples=10, num_epoch=1, source_store="store-0")
    assert job_from_doc(job_to_doc(job)) == job


def test_job_field_validation():
    assert JobSpec(num_samples=0, num_epoch=1, source_store="s").violations()
    assert JobSpec(num_samples=1, num_epoch=0, source_store="s").violations()
    assert JobSpec(num_samples=1, num_epoch=1, source_store="").violations()
    assert JobSpec(num_samples=1, num_epoch=1, source_store="s",
                   target_accuracy=1.5).violations()
    assert JobSpec(num_samples=1, num_epoch=1, source_store="s",
                   epsilon=0.0).violations()


def test_loading_garbage_never_crashes(tmp_path):
    # any byte string must either parse or produce a diagnostic
    rng = np.random.default_rng(7)
    path = tmp_path / "junk.json"
    for trial in range(200):
        n = int(rng.integers(0, 60))
        blob = bytes(rng.integers(0, 256, size=n, dtype=np.uint8))
        path.write_bytes(blob)
        try:
            load_cluster(path)
        except (ParseError, ValidationError):
            pass
    # syntactically valid JSON of the wrong shape also gets a diagnostic
    for junk in ("[]", "3", '"x"', '{"schema": 1}', '{"schema": 2, "workers": []}'):
        path.write_text(junk)
        with pytest.raises((ParseError, ValidationError)):
            load_cluster(path)


def test_random_documents_round_trip():
    rng = np.random.default_rng(11)
    for trial in range(50):
        n_workers = int(rng.integers(1, 6))
        stores = tuple(f"s{j}" for j in range(int(rng.integers(1, 3))))
        workers = []
        for i in range(n_workers):
            b_min = int(rng.integers(1, 4))
            apps = ()
            if rng.random() < 0.5:
                apps = (BackgroundApp(id=f"bg-{i}", deadline=float(rng.uniform(0.05, 2.0))),)
            workers.append(WorkerSpec(
                id=f"w{i}",
                device_class=str(rng.choice(["tx2", "nano"])),
                initial_state=NodeState(*(float(v) for v in rng.uniform(0, 1, 3))),
                background_apps=apps,
                b_min=b_min,
                b_max=b_min + int(rng.integers(0, 60)),
                init_cost=float(rng.uniform(0, 10)),
                per_sample_transfer_cost={s: float(rng.uniform(0, 0.01)) for s in stores},
            ))
        cluster = ClusterSpec(workers=tuple(workers),
                              ps_state=NodeState(*(float(v) for v in rng.uniform(0, 1, 3))),
                              data_stores=stores)
        assert cluster.violations() == []
        doc = json.loads(json.dumps(cluster_to_doc(cluster)))
        assert cluster_from_doc(doc) == cluster
