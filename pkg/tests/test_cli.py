"""Command-line pipeline: synth -> bandwidth -> train -> infer -> analysis."""

import json

import numpy as np
import pytest
from click.testing import CliRunner

from partlat.cli import main
from partlat.frames import load_frame
from partlat.model import load_latents, load_model
from partlat.tracking import trace_from_jsonl


def run_ok(*args, **kwargs):
    result = CliRunner().invoke(main, [str(a) for a in args], **kwargs)
    assert result.exit_code == 0, result.output + str(result.exception)
    return result


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One small dataset taken through every batch command."""
    root = tmp_path_factory.mktemp("cli")
    ds = root / "ds"
    model = root / "model.gae1"
    lat = root / "f0.lat1"
    run_ok("synth", "sinfield", ds, "--n", 512, "--frames", 2,
           "--noise", 0.02)
    run_ok("--seed", 1, "train", "--data", ds, "--radius", 0.2,
           "--latent-dim", 4, "--epochs", 3, "--batch-size", 32,
           "--sample-fraction", 0.3, "--out", model)
    run_ok("infer", "--model", model, "--frame", ds / "frame_0000.pds",
           "--out", lat)
    return {"root": root, "ds": ds, "model": model, "lat": lat}


def test_synth_writes_dataset(pipeline):
    ds = pipeline["ds"]
    assert (ds / "frame_0000.pds").exists()
    assert (ds / "frame_0001.pds").exists()
    gt = json.loads((ds / "gt.json").read_text())
    assert gt["n"] == 512


def test_estimate_bandwidth_report(pipeline):
    out = pipeline["root"] / "bw.json"
    result = run_ok("--seed", 2, "estimate-bandwidth", "--data", pipeline["ds"],
                    "--fraction", 0.05, "--out", out)
    report = json.loads(out.read_text())
    assert set(report) >= {"r_opt", "r_floor", "curve", "samples_per_frame"}
    assert f"{report['r_opt']:.6f}" in result.output
    rs = [p["r"] for p in report["curve"]]
    assert rs == sorted(rs)


def test_train_writes_model(pipeline):
    model = load_model(pipeline["model"])
    assert model.latent_dim == 4
    assert model.radius == pytest.approx(0.2)


def test_infer_deterministic_bytes(pipeline):
    field = load_latents(pipeline["lat"])
    assert field.latents.shape == (512, 4)
    out2 = pipeline["root"] / "again.lat1"
    run_ok("infer", "--model", pipeline["model"],
           "--frame", pipeline["ds"] / "frame_0000.pds", "--out", out2)
    assert out2.read_bytes() == pipeline["lat"].read_bytes()


def test_psnr_prints_number(pipeline):
    result = run_ok("psnr", "--model", pipeline["model"],
                    "--frame", pipeline["ds"] / "frame_0000.pds")
    assert np.isfinite(float(result.output.strip()))


def test_cluster_output(pipeline):
    out = pipeline["root"] / "clusters.json"
    run_ok("--seed", 4, "cluster", "--latents", pipeline["lat"], "--k", 3,
           "--out", out)
    payload = json.loads(out.read_text())
    assert len(payload["labels"]) == 512
    assert len(payload["centroids"]) == 3
    assert set(payload["labels"]) <= {0, 1, 2}
    assert payload["inertia"] >= 0.0


def test_dbscan_output(pipeline):
    out = pipeline["root"] / "db.json"
    run_ok("dbscan", "--frame", pipeline["ds"] / "frame_0000.pds",
           "--out", out)
    payload = json.loads(out.read_text())
    assert len(payload["labels"]) == 512
    assert payload["eps"] > 0
    assert payload["n_clusters"] >= 1


def test_project_output(pipeline):
    out = pipeline["root"] / "proj.json"
    run_ok("--seed", 3, "project", "--latents", pipeline["lat"],
           "--fraction", 0.12, "--perplexity", 8, "--iterations", 60,
           "--out", out)
    payload = json.loads(out.read_text())
    pts = np.asarray(payload["points"])
    assert pts.shape == (len(payload["indices"]), 2)
    assert np.isfinite(pts).all()
    assert payload["perplexity"] == 8
    # sampling weighted by the frame's attribute values picks a different set
    out2 = pipeline["root"] / "proj2.json"
    run_ok("--seed", 3, "project", "--latents", pipeline["lat"],
           "--fraction", 0.12, "--perplexity", 8, "--iterations", 60,
           "--frame", pipeline["ds"] / "frame_0000.pds", "--out", out2)
    p2 = json.loads(out2.read_text())
    assert len(p2["indices"]) == len(payload["indices"])


def test_convert_csv(tmp_path):
    csv = tmp_path / "in.csv"
    csv.write_text("x,y,z,temp\n0,0,0,1.5\n1,0,0,2.5\n0,2,0,3.5\n")
    dest = tmp_path / "frame_0007.pds"
    result = run_ok("convert", csv, dest)
    assert "3 particles" in result.output
    frame = load_frame(dest)
    assert frame.frame_id == 7
    assert frame.attr_names == ["temp"]

    bad = tmp_path / "in.txt"
    bad.write_text("x,y,z,t\n0,0,0,1\n")
    r = CliRunner().invoke(main, ["convert", str(bad), str(dest)])
    assert r.exit_code == 2


def test_track_end_to_end(tmp_path):
    ds = tmp_path / "blob"
    run_ok("--seed", 6, "synth", "blob", ds, "--frames", 3, "--n-background",
           500, "--n-blob", 160, "--radius", 0.12, "--static")
    model = tmp_path / "m.gae1"
    run_ok("--seed", 6, "train", "--data", ds, "--radius", 0.15,
           "--latent-dim", 3, "--epochs", 2, "--batch-size", 32,
           "--sample-fraction", 0.1, "--out", model)
    gt = json.loads((ds / "gt.json").read_text())
    center = ",".join(repr(v) for v in gt["centers_norm"][0])
    out = tmp_path / "trace.jsonl"
    run_ok("track", "--data", ds, "--model", model, "--start", 0, "--end", 2,
           "--center", center, "--half-extent", 0.15, "--out", out)
    entries = trace_from_jsonl(out.read_text())
    assert [e.t for e in entries] == [0, 1, 2]
    c0 = np.asarray(gt["centers_norm"][0])
    for e in entries:
        assert np.linalg.norm(e.center - c0) < 0.05

    r = CliRunner().invoke(main, ["track", "--data", str(ds), "--model",
                                  str(model), "--start", 2, "--end", 0,
                                  "--center", center, "--half-extent", "0.15",
                                  "--out", str(out)])
    assert r.exit_code == 2  # reversed range is a usage error
    r = CliRunner().invoke(main, ["track", "--data", str(ds), "--model",
                                  str(model), "--start", 7, "--end", 9,
                                  "--center", center, "--half-extent", "0.15",
                                  "--out", str(out)])
    assert r.exit_code == 1  # missing frame is a runtime error


def test_usage_errors_exit_2(tmp_path):
    r = CliRunner().invoke(main, ["train", "--data", str(tmp_path)])
    assert r.exit_code == 2
    r = CliRunner().invoke(main, ["synth", "blob", str(tmp_path / "d"),
                                  "--velocity", "1,2"])
    assert r.exit_code == 2
    r = CliRunner().invoke(main, ["estimate-bandwidth", "--data",
                                  str(tmp_path / "nope"), "--out",
                                  str(tmp_path / "o.json")])
    assert r.exit_code == 2


def test_runtime_error_plain_and_json(tmp_path):
    corrupt = tmp_path / "bad.lat1"
    corrupt.write_bytes(b"XXXXXXXXXXXX")
    out = tmp_path / "c.json"
    r = CliRunner().invoke(main, ["cluster", "--latents", str(corrupt),
                                  "--k", "2", "--out", str(out)])
    assert r.exit_code == 1
    assert r.stderr.startswith("error:")

    r = CliRunner().invoke(main, ["--json", "cluster", "--latents",
                                  str(corrupt), "--k", "2", "--out", str(out)])
    assert r.exit_code == 1
    lines = [l for l in r.stderr.splitlines() if l.strip()]
    assert len(lines) == 1
    payload = json.loads(lines[0])
    assert payload["error"] == "LoadError"
    assert payload["message"]


def test_version_flag():
    result = run_ok("--version")
    assert "version" in result.output


def test_verbose_train_logs_epochs(tmp_path):
    ds = tmp_path / "ds"
    run_ok("synth", "sinfield", ds, "--n", 216, "--frames", 1)
    result = run_ok("--verbose", "train", "--data", ds, "--radius", 0.25,
                    "--latent-dim", 2, "--epochs", 2, "--batch-size", 32,
                    "--sample-fraction", 0.2, "--out", tmp_path / "m.gae1")
    assert "epoch 0:" in result.stderr
    assert "epoch 1:" in result.stderr
