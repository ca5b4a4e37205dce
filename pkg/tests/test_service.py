"""HTTP service: session lifecycle, jobs, tree edits, durability."""

import base64
import concurrent.futures
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from partlat.service import create_app
from partlat.synth import make_sinfield_dataset


def wait_job(client, job_id, timeout=120.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        r = client.get(f"/jobs/{job_id}")
        assert r.status_code == 200
        j = r.json()
        if j["state"] in ("done", "failed"):
            return j
        time.sleep(0.05)
    raise AssertionError(f"job {job_id} timed out")


def finish(client, response):
    assert response.status_code == 200, response.text
    job = wait_job(client, response.json()["job"])
    assert job["state"] == "done", job.get("error")
    return job


@pytest.fixture(scope="module")
def svc(tmp_path_factory):
    root = tmp_path_factory.mktemp("svc_root")
    ds = tmp_path_factory.mktemp("svc_data")
    make_sinfield_dataset(ds, n=512, n_frames=2, noise=0.02, seed=0)
    app = create_app(root)
    client = TestClient(app)
    r = client.post("/sessions", json={"dataset_dir": str(ds)})
    assert r.status_code == 200, r.text
    sid = r.json()["session"]
    train = finish(client, client.post(f"/sessions/{sid}/train", json={
        "radius": 0.2, "latent_dim": 4, "epochs": 2, "batch_size": 32,
        "sample_fraction": 0.2, "seed": 1}))
    for fid in (0, 1):
        finish(client, client.post(f"/sessions/{sid}/infer", json={"frame": fid}))
    return {"app": app, "client": client, "sid": sid, "root": root,
            "ds": ds, "digest": train["result"]["model_digest"]}


def code_of(r):
    return r.json()["code"]


# ---------------------------------------------------------------------------
# sessions and jobs


def test_session_metadata(svc):
    c, sid = svc["client"], svc["sid"]
    r = c.get(f"/sessions/{sid}/frames")
    assert r.status_code == 200
    body = r.json()
    assert [f["id"] for f in body["frames"]] == [0, 1]
    assert all(f["n"] == 512 for f in body["frames"])
    assert body["frames"][0]["attr_names"] == ["field"]
    assert body["model"]["digest"] == svc["digest"]
    assert len(svc["digest"]) == 64
    assert body["model"]["latent_dim"] == 4


def test_session_errors(svc, tmp_path):
    c = svc["client"]
    r = c.post("/sessions", json={"dataset_dir": str(tmp_path / "nope")})
    assert r.status_code == 400 and code_of(r) == "bad_dataset"
    r = c.post("/sessions", json={})
    assert r.status_code == 400 and code_of(r) == "validation_error"
    r = c.get("/sessions/zzz/frames")
    assert r.status_code == 404 and code_of(r) == "not_found"
    r = c.get("/jobs/zzz")
    assert r.status_code == 404


def test_train_validation(svc):
    c, sid = svc["client"], svc["sid"]
    r = c.post(f"/sessions/{sid}/train", json={"radius": 1.5})
    assert r.status_code == 400 and code_of(r) == "bad_radius"
    r = c.post(f"/sessions/{sid}/train", json={"radius": 0.2, "latent_dim": 0})
    assert r.status_code == 400 and code_of(r) == "bad_latent_dim"
    r = c.post(f"/sessions/{sid}/train", json={"radius": 0.2, "epochs": 0})
    assert r.status_code == 400 and code_of(r) == "bad_config"
    # a session that never trained has no radius to fall back on
    r2 = c.post("/sessions", json={"dataset_dir": str(svc["ds"])})
    bare = r2.json()["session"]
    r = c.post(f"/sessions/{bare}/train", json={})
    assert r.status_code == 400 and code_of(r) == "missing_radius"
    r = c.post(f"/sessions/{bare}/infer", json={"frame": 0})
    assert r.status_code == 400 and code_of(r) == "no_model"
    r = c.post(f"/sessions/{bare}/tree/0/split", json={"node": 0})
    assert r.status_code == 400 and code_of(r) == "no_latents"
    r = c.get(f"/sessions/{bare}/projection/0")
    assert r.status_code == 400 and code_of(r) == "no_latents"
    r = c.post(f"/sessions/{bare}/track", json={
        "frame_start": 0, "frame_end": 1, "region_center": [0.5, 0.5, 0.5],
        "half_extent": 0.2})
    assert r.status_code == 400 and code_of(r) == "no_latents"


def test_train_job_reports_progress(svc):
    c, sid = svc["client"], svc["sid"]
    job = finish(c, c.post(f"/sessions/{sid}/train", json={
        "radius": 0.2, "latent_dim": 4, "epochs": 2, "batch_size": 32,
        "sample_fraction": 0.2, "seed": 1}))
    assert job["kind"] == "train"
    assert job["epoch"] == 1  # last finished epoch, zero-indexed
    assert job["loss"] == job["result"]["final_loss"] > 0
    # same config and seed reproduce the same model
    assert job["result"]["model_digest"] == svc["digest"]


def test_infer_reuses_stored_latents(svc):
    c, sid = svc["client"], svc["sid"]
    j1 = finish(c, c.post(f"/sessions/{sid}/infer", json={"frame": 0}))
    assert j1["result"]["n"] == 512
    assert j1["result"]["latent_dim"] == 4
    assert j1["result"]["model_digest"] == svc["digest"]
    j2 = finish(c, c.post(f"/sessions/{sid}/infer", json={"frame": 0}))
    assert j2["result"] == j1["result"]
    assert (svc["root"] / sid / j1["result"]["file"]).exists()
    r = c.post(f"/sessions/{sid}/infer", json={"frame": 9})
    assert r.status_code == 404


# ---------------------------------------------------------------------------
# cluster tree


def test_tree_split_revoke_flow(svc):
    c, sid = svc["client"], svc["sid"]
    url = f"/sessions/{sid}/tree/1"
    r = c.get(url)
    assert r.status_code == 200
    body = r.json()
    assert body["has_latents"] is True
    assert len(body["nodes"]) == 1
    root = body["nodes"][0]
    assert root["id"] == 0 and root["parent"] is None
    assert root["n_members"] == 512

    r = c.post(f"{url}/split", json={"node": 0, "k": 3, "seed": 2})
    assert r.status_code == 200
    body = r.json()
    kids = [n["id"] for n in body["nodes"] if n["parent"] == 0]
    assert kids == [1, 2, 3]
    assert sum(n["n_members"] for n in body["nodes"] if n["id"] in kids) == 512

    r = c.post(f"{url}/split", json={"node": 0, "k": 2})
    assert r.status_code == 409 and code_of(r) == "not_leaf"
    r = c.post(f"{url}/split", json={"node": 77, "k": 2})
    assert r.status_code == 404
    r = c.post(f"{url}/split", json={"node": kids[0], "k": 1})
    assert r.status_code == 400 and code_of(r) == "bad_split"

    r = c.post(f"{url}/split", json={"node": kids[0], "k": 2, "seed": 5})
    assert r.status_code == 200
    r = c.post(f"{url}/revoke", json={"node": 0})
    assert r.status_code == 409 and code_of(r) == "revoke_order"
    r = c.post(f"{url}/revoke", json={"node": kids[1]})
    assert r.status_code == 400 and code_of(r) == "bad_revoke"
    r = c.post(f"{url}/revoke", json={"node": 77})
    assert r.status_code == 404

    r = c.post(f"{url}/revoke", json={"node": kids[0]})
    assert r.status_code == 200
    r = c.post(f"{url}/revoke", json={"node": 0})
    assert r.status_code == 200
    assert len(r.json()["nodes"]) == 1


def test_concurrent_splits_single_winner(svc):
    app, sid = svc["app"], svc["sid"]
    url = f"/sessions/{sid}/tree/1/split"

    def attempt(_):
        local = TestClient(app)
        return local.post(url, json={"node": 0, "k": 2, "seed": 3}).status_code

    with concurrent.futures.ThreadPoolExecutor(max_workers=8) as pool:
        codes = list(pool.map(attempt, range(8)))
    assert sorted(codes).count(200) == 1
    assert all(code in (200, 409) for code in codes)
    r = svc["client"].post(f"/sessions/{sid}/tree/1/revoke", json={"node": 0})
    assert r.status_code == 200


# ---------------------------------------------------------------------------
# projection and particles


def test_projection_flow(svc):
    c, sid = svc["client"], svc["sid"]
    url = f"/sessions/{sid}/projection/0"
    r = c.get(url, params={"sample_fraction": 0.15, "perplexity": 8, "seed": 3})
    assert r.status_code == 200
    body = r.json()
    m = len(body["indices"])
    assert m == int(np.ceil(0.15 * 512 - 1e-9))
    assert len(body["points"]) == m
    assert np.isfinite(np.asarray(body["points"])).all()
    assert body["labels"] == [0] * m

    # cached: identical points on repeat
    again = c.get(url, params={"sample_fraction": 0.15, "perplexity": 8,
                               "seed": 3}).json()
    assert again["points"] == body["points"]

    # splitting relabels the same cached points
    r = c.post(f"/sessions/{sid}/tree/0/split", json={"node": 0, "k": 2})
    assert r.status_code == 200
    relabeled = c.get(url, params={"sample_fraction": 0.15, "perplexity": 8,
                                   "seed": 3}).json()
    assert relabeled["points"] == body["points"]
    assert set(relabeled["labels"]) == {1, 2}
    r = c.post(f"/sessions/{sid}/tree/0/revoke", json={"node": 0})
    assert r.status_code == 200

    r = c.get(url, params={"sample_fraction": 1.5})
    assert r.status_code == 400 and code_of(r) == "bad_fraction"


def test_particles_payload(svc):
    c, sid = svc["client"], svc["sid"]
    r = c.get(f"/sessions/{sid}/particles/0")
    assert r.status_code == 200
    body = r.json()
    assert body["n"] == 512
    assert body["attr"] == "field"
    pos = np.frombuffer(base64.b64decode(body["positions_b64"]), dtype="<f4")
    vals = np.frombuffer(base64.b64decode(body["values_b64"]), dtype="<f4")
    assert pos.shape == (512 * 3,)
    assert vals.shape == (512,)
    assert (pos >= 0).all() and (pos <= 1).all()
    r = c.get(f"/sessions/{sid}/particles/0", params={"node": 55})
    assert r.status_code == 404
    r = c.get(f"/sessions/{sid}/particles/0", params={"attr": "nope"})
    assert r.status_code == 404 and "attribute" in r.json()["message"]


# ---------------------------------------------------------------------------
# tracking


def test_track_job(svc):
    c, sid = svc["client"], svc["sid"]
    job = finish(c, c.post(f"/sessions/{sid}/track", json={
        "frame_start": 0, "frame_end": 1,
        "region_center": [0.5, 0.5, 0.5], "half_extent": 0.2}))
    trace = job["result"]["trace"]
    assert [e["t"] for e in trace] == [0, 1]
    assert trace[0]["iters"] == 0 and trace[0]["converged"]
    assert trace[0]["similarity"] == pytest.approx(1.0, abs=1e-9)
    assert all(len(e["center"]) == 3 for e in trace)

    r = c.post(f"/sessions/{sid}/track", json={
        "frame_start": 1, "frame_end": 0,
        "region_center": [0.5, 0.5, 0.5], "half_extent": 0.2})
    assert r.status_code == 400 and code_of(r) == "bad_range"
    r = c.post(f"/sessions/{sid}/track", json={
        "frame_start": 0, "frame_end": 7,
        "region_center": [0.5, 0.5, 0.5], "half_extent": 0.2})
    assert r.status_code == 404
    r = c.post(f"/sessions/{sid}/track", json={
        "frame_start": 0, "frame_end": 1, "region_center": [0.5, 0.5],
        "half_extent": 0.2})
    assert r.status_code == 400 and code_of(r) == "validation_error"


# ---------------------------------------------------------------------------
# durability


def test_restart_rehydrates_sessions(svc):
    sid = svc["sid"]
    # torn directories must not break startup
    (svc["root"] / "torn").mkdir()
    (svc["root"] / "torn2").mkdir()
    (svc["root"] / "torn2" / "session.json").write_text("{ nope")

    app2 = create_app(svc["root"])
    c2 = TestClient(app2)
    r = c2.get(f"/sessions/{sid}/frames")
    assert r.status_code == 200
    assert r.json()["model"]["digest"] == svc["digest"]

    # stored latents load without re-running inference
    j = finish(c2, c2.post(f"/sessions/{sid}/infer", json={"frame": 0}))
    assert j["result"]["model_digest"] == svc["digest"]

    # tree edits survive another restart because session.json is rewritten
    r = c2.post(f"/sessions/{sid}/tree/1/split", json={"node": 0, "k": 2,
                                                       "seed": 9})
    assert r.status_code == 200
    nodes_after_split = r.json()["nodes"]

    app3 = create_app(svc["root"])
    c3 = TestClient(app3)
    r = c3.get(f"/sessions/{sid}/tree/1")
    assert r.status_code == 200
    assert r.json()["nodes"] == nodes_after_split
    r = c3.post(f"/sessions/{sid}/tree/1/revoke", json={"node": 0})
    assert r.status_code == 200


def test_internal_errors_return_500(tmp_path, monkeypatch):
    app = create_app(tmp_path)
    client = TestClient(app, raise_server_exceptions=False)
    from partlat import service as service_mod

    def boom(self, job_id):
        raise RuntimeError("boom")

    monkeypatch.setattr(service_mod.ServiceState, "job", boom)
    r = client.get("/jobs/x")
    assert r.status_code == 500
    assert r.json()["code"] == "internal"
