"""Batch command-line entry points wrapping the library pipeline.

Every subcommand is a thin composition of library calls: validate flags,
run, write outputs atomically. Exit codes: 0 success, 2 usage error (bad
flags), 1 runtime error (bad data, diverged training, ...). With the global
--json flag, runtime errors go to stderr as one line of JSON.
"""
from __future__ import annotations

import functools
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import click
import numpy as np

from . import analysis, synth
from .bandwidth import estimate_radius
from .errors import PartlatError, TrainingDivergedError
from .frames import (load_dataset, load_frame, load_frame_with_dataset_bounds,
                     read_csv, value_based_sample, write_pds)
from .model import load_latents, load_model, save_latents, save_model
from .tracking import trace_to_jsonl, track
from .train import TrainConfig, infer_latents, psnr, random_search_latent_dim, train
from .tsne import project_tsne
from .util import atomic_write_text, child_seeds


@dataclass
class CliConfig:
    seed: int = 0
    threads: int = 1
    verbose: bool = False
    json_errors: bool = False

    def log(self, message: str) -> None:
        if self.verbose:
            click.echo(message, err=True)


def _cfg() -> CliConfig:
    ctx = click.get_current_context(silent=True)
    return ctx.obj if ctx is not None and ctx.obj is not None else CliConfig()


def guarded(fn):
    """Map runtime failures to exit code 1 (and JSON stderr when requested)."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        cfg = _cfg()
        try:
            return fn(*args, **kwargs)
        except (PartlatError, OSError, ValueError, FloatingPointError) as exc:
            payload = {"error": type(exc).__name__, "message": str(exc)}
            if isinstance(exc, TrainingDivergedError) and exc.epoch is not None:
                payload["epoch"] = exc.epoch
            if cfg.json_errors:
                click.echo(json.dumps(payload, sort_keys=True), err=True)
            else:
                click.echo(f"error: {exc}", err=True)
            sys.exit(1)
    return wrapper


def _write_json(path, payload) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _parse_vec3(text: str, what: str) -> np.ndarray:
    parts = text.split(",")
    if len(parts) != 3:
        raise click.UsageError(f"{what} must be three comma-separated numbers")
    try:
        return np.array([float(p) for p in parts])
    except ValueError:
        raise click.UsageError(f"cannot parse {what}: {text!r}")


RADIUS = click.FloatRange(0.0, 1.0, min_open=True)
FRACTION = click.FloatRange(0.0, 1.0, min_open=True)


@click.group()
@click.option("--seed", type=int, default=0, show_default=True,
              help="Seed for every randomized step.")
@click.option("--threads", type=click.IntRange(min=1), default=1,
              show_default=True, help="Worker threads for inference.")
@click.option("--verbose", is_flag=True, help="Progress lines on stderr.")
@click.option("--json", "json_errors", is_flag=True,
              help="Runtime errors as single-line JSON on stderr.")
@click.version_option(package_name="partlat")
@click.pass_context
def main(ctx, seed, threads, verbose, json_errors):
    """Particle latent-feature pipeline: datasets, training, analysis, tracking."""
    ctx.obj = CliConfig(seed=seed, threads=threads, verbose=verbose,
                        json_errors=json_errors)


# ---------------------------------------------------------------------------
# data


@main.command()
@click.argument("source", type=click.Path(exists=True, dir_okay=False))
@click.argument("dest", type=click.Path(dir_okay=False))
@guarded
def convert(source, dest):
    """Convert a CSV frame (x,y,z + attribute columns) to the binary format."""
    src = Path(source)
    if src.suffix.lower() != ".csv":
        raise click.UsageError("source must be a .csv file")
    pos, att, names = read_csv(src)
    write_pds(dest, pos, att, names)
    click.echo(f"wrote {dest} ({pos.shape[0]} particles, {att.shape[1]} attributes)")


@main.group("synth")
def synth_cmd():
    """Generate synthetic datasets with ground-truth JSON."""


@synth_cmd.command("blob")
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--frames", type=click.IntRange(min=1), default=11, show_default=True)
@click.option("--n-background", type=click.IntRange(min=2), default=2600,
              show_default=True)
@click.option("--n-blob", type=click.IntRange(min=2), default=700, show_default=True)
@click.option("--radius", type=RADIUS, default=0.10, show_default=True,
              help="Blob radius in raw units.")
@click.option("--velocity", default="0.03,0,0", show_default=True,
              help="Per-step blob velocity, comma-separated.")
@click.option("--start", default="0.35,0.5,0.5", show_default=True,
              help="Blob center at the first frame.")
@click.option("--static", is_flag=True,
              help="Zero velocity, centered start, identical frames.")
@click.option("--attr-noise", type=float, default=0.01, show_default=True)
@guarded
def synth_blob(out_dir, frames, n_background, n_blob, radius, velocity, start,
               static, attr_noise):
    """Hot blob moving through a cold static background."""
    cfg = _cfg()
    vel = np.zeros(3) if static else _parse_vec3(velocity, "--velocity")
    origin = np.full(3, 0.5) if static else _parse_vec3(start, "--start")
    gt = synth.make_blob_dataset(out_dir, n_frames=frames,
                                 n_background=n_background, n_blob=n_blob,
                                 blob_radius=radius, velocity=vel, start=origin,
                                 attr_noise=attr_noise, seed=cfg.seed)
    click.echo(f"wrote {gt['n_frames']} frames to {out_dir}")


@synth_cmd.command("archetypes")
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--mode", type=click.Choice(["gradient", "density"]),
              default="gradient", show_default=True)
@click.option("--sites", type=click.IntRange(min=2), default=64, show_default=True)
@click.option("--per-site", type=click.IntRange(min=4), default=48, show_default=True)
@click.option("--site-radius", type=RADIUS, default=0.03, show_default=True)
@click.option("--frames", type=click.IntRange(min=1), default=1, show_default=True)
@guarded
def synth_archetypes(out_dir, mode, sites, per_site, site_radius, frames):
    """Two kinds of particle sites differing in attribute structure."""
    cfg = _cfg()
    gt = synth.make_archetype_dataset(out_dir, mode=mode, n_sites=sites,
                                      per_site=per_site, site_radius=site_radius,
                                      n_frames=frames, seed=cfg.seed)
    click.echo(f"wrote {gt['n_frames']} frames, {gt['n_particles']} particles "
               f"to {out_dir}")


@synth_cmd.command("sinfield")
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--n", type=click.IntRange(min=8), default=3375, show_default=True)
@click.option("--frames", type=click.IntRange(min=1), default=2, show_default=True)
@click.option("--mode", type=click.Choice(["sin", "bump"]), default="sin",
              show_default=True)
@click.option("--waves", type=float, default=1.0, show_default=True)
@click.option("--length", type=RADIUS, default=0.15, show_default=True,
              help="Correlation length for bump mode.")
@click.option("--noise", type=float, default=0.05, show_default=True)
@click.option("--cluster-grid", type=click.IntRange(min=0), default=0,
              show_default=True,
              help="If > 0, pack particles into this many dense balls per axis.")
@click.option("--cluster-radius", type=RADIUS, default=0.05, show_default=True)
@guarded
def synth_sinfield(out_dir, n, frames, mode, waves, length, noise,
                   cluster_grid, cluster_radius):
    """Smooth scalar field sampled on a jittered particle grid."""
    cfg = _cfg()
    gt = synth.make_sinfield_dataset(out_dir, n=n, n_frames=frames, mode=mode,
                                     waves=waves, length=length, noise=noise,
                                     seed=cfg.seed, cluster_grid=cluster_grid,
                                     cluster_radius=cluster_radius)
    click.echo(f"wrote {gt['n_frames']} frames, {gt['n']} particles to {out_dir}")


# ---------------------------------------------------------------------------
# bandwidth / training / inference


@main.command("estimate-bandwidth")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--fraction", type=FRACTION, default=0.01, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@guarded
def estimate_bandwidth(data, fraction, out):
    """Pick the patch radius by leave-one-out cross-validation."""
    cfg = _cfg()
    frames = load_dataset(data)
    cfg.log(f"loaded {len(frames)} frames from {data}")
    report = estimate_radius(frames, sample_fraction=fraction, seed=cfg.seed)
    atomic_write_text(out, report.to_json() + "\n")
    click.echo(f"r_opt = {report.r_opt:.6f} (report: {out})")


@main.command("train")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--radius", required=True, type=RADIUS)
@click.option("--latent-dim", type=click.IntRange(min=1), default=32,
              show_default=True)
@click.option("--epochs", type=click.IntRange(min=1), default=100, show_default=True)
@click.option("--batch-size", type=click.IntRange(min=1), default=32,
              show_default=True)
@click.option("--learning-rate", type=click.FloatRange(min=0, min_open=True),
              default=1e-3, show_default=True)
@click.option("--sample-fraction", type=FRACTION, default=0.01, show_default=True)
@click.option("--loss-mode", type=click.Choice(["attributes_only",
                                                "attributes_and_positions"]),
              default="attributes_only", show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@guarded
def train_cmd(data, radius, latent_dim, epochs, batch_size, learning_rate,
              sample_fraction, loss_mode, out):
    """Train the patch autoencoder on a dataset."""
    cfg = _cfg()
    frames = load_dataset(data)
    config = TrainConfig(epochs=epochs, batch_size=batch_size,
                         learning_rate=learning_rate,
                         sample_fraction=sample_fraction, loss_mode=loss_mode,
                         seed=cfg.seed)
    progress = (lambda e, loss: cfg.log(f"epoch {e}: loss {loss:.6g}")) \
        if cfg.verbose else None
    model = train(frames, config, radius, latent_dim, progress=progress)
    save_model(model, out)
    click.echo(f"wrote {out} (latent_dim={latent_dim}, radius={radius})")


@main.command("search-latent-dim")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--radius", required=True, type=RADIUS)
@click.option("--budget", type=click.IntRange(min=1), default=6, show_default=True,
              help="Number of latent-dimension candidates to try.")
@click.option("--epoch-budget", type=click.IntRange(min=1), default=30,
              show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@guarded
def search_latent_dim(data, radius, budget, epoch_budget, out):
    """Random-search the latent dimension under a fixed epoch budget."""
    cfg = _cfg()
    frames = load_dataset(data)
    progress = (lambda v, p: cfg.log(f"latent_dim {v}: psnr {p:.3f} dB")) \
        if cfg.verbose else None
    result = random_search_latent_dim(frames, radius, candidate_budget=budget,
                                      epoch_budget=epoch_budget, seed=cfg.seed,
                                      progress=progress)
    payload = {"best_dim": result.best_dim,
               "table": [{"latent_dim": v, "psnr": p} for v, p in result.table],
               "skipped": [{"latent_dim": v, "reason": r}
                           for v, r in result.skipped]}
    if out:
        _write_json(out, payload)
    click.echo(json.dumps(payload, sort_keys=True))


@main.command("infer")
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--frame", "frame_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@guarded
def infer(model_path, frame_path, out):
    """Write the latent field of one frame."""
    cfg = _cfg()
    model = load_model(model_path)
    frame = load_frame_with_dataset_bounds(frame_path)
    field = infer_latents(model, frame, workers=cfg.threads)
    save_latents(field, out)
    click.echo(f"wrote {out} ({field.n} x {field.latent_dim})")


@main.command("psnr")
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--frame", "frame_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--sample-fraction", type=FRACTION, default=1.0, show_default=True,
              help="Evaluate on a value-based sample instead of every particle.")
@guarded
def psnr_cmd(model_path, frame_path, sample_fraction):
    """Reconstruction PSNR (dB) of a model on one frame."""
    cfg = _cfg()
    model = load_model(model_path)
    frame = load_frame_with_dataset_bounds(frame_path)
    sample = None
    if sample_fraction < 1.0:
        sample = value_based_sample(frame, sample_fraction, cfg.seed)
    value = psnr(model, frame, sample=sample, workers=cfg.threads)
    click.echo(f"{value:.6f}")


# ---------------------------------------------------------------------------
# analysis


@main.command("cluster")
@click.option("--latents", "latents_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--k", type=click.IntRange(min=1), required=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@guarded
def cluster(latents_path, k, out):
    """One-shot k-means over a latent field."""
    cfg = _cfg()
    field = load_latents(latents_path)
    labels, centroids, inertia = analysis.kmeans(field.latents, k, seed=cfg.seed)
    _write_json(out, {"k": k, "seed": cfg.seed, "inertia": inertia,
                      "labels": labels.tolist(),
                      "centroids": centroids.tolist()})
    click.echo(f"wrote {out} (inertia {inertia:.6g})")


@main.command("dbscan")
@click.option("--frame", "frame_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--eps", type=click.FloatRange(min=0, min_open=True), default=None,
              help="Neighborhood radius; default 2x mean nearest-neighbor distance.")
@click.option("--min-pts", type=click.IntRange(min=1),
              default=analysis.DBSCAN_DEFAULT_MIN_PTS, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@guarded
def dbscan_cmd(frame_path, eps, min_pts, out):
    """Spatial DBSCAN over a frame's normalized positions."""
    frame = load_frame(frame_path)
    if eps is None:
        eps = analysis.dbscan_default_eps(frame.positions)
    labels = analysis.dbscan(frame.positions, eps, min_pts)
    n_clusters = int(labels.max()) + 1 if labels.size and labels.max() >= 0 else 0
    _write_json(out, {"eps": eps, "min_pts": min_pts, "n_clusters": n_clusters,
                      "labels": labels.tolist()})
    click.echo(f"wrote {out} ({n_clusters} clusters)")


@main.command("project")
@click.option("--latents", "latents_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--fraction", type=FRACTION, default=0.01, show_default=True)
@click.option("--frame", "frame_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Frame file for value-based sampling weights; "
              "without it the sample is uniform.")
@click.option("--perplexity", type=click.FloatRange(min=0, min_open=True),
              default=30.0, show_default=True)
@click.option("--iterations", type=click.IntRange(min=1), default=500,
              show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@guarded
def project(latents_path, fraction, frame_path, perplexity, iterations, out):
    """2D t-SNE projection of a sampled latent field."""
    cfg = _cfg()
    field = load_latents(latents_path)
    n = field.n
    if frame_path is not None:
        frame = load_frame_with_dataset_bounds(frame_path)
        if frame.n != n:
            raise ValueError("frame and latent field disagree on particle count")
        indices = value_based_sample(frame, fraction, cfg.seed).indices
    else:
        k = min(n, max(1, int(np.ceil(fraction * n - 1e-9))))
        rng = np.random.default_rng(child_seeds(cfg.seed, 1, salt=5)[0])
        indices = np.sort(rng.choice(n, size=k, replace=False))
    proj = project_tsne(field, indices, perplexity=perplexity,
                        iterations=iterations, seed=cfg.seed)
    _write_json(out, {"indices": proj.indices.tolist(),
                      "points": proj.points.tolist(),
                      "perplexity": proj.perplexity,
                      "iterations": proj.iterations, "seed": proj.seed})
    click.echo(f"wrote {out} ({proj.n} points)")


# ---------------------------------------------------------------------------
# tracking and serving


@main.command("track")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--start", type=int, required=True, help="First frame id.")
@click.option("--end", type=int, required=True, help="Last frame id (inclusive).")
@click.option("--center", required=True, help="x,y,z in normalized coordinates.")
@click.option("--half-extent", required=True,
              help="Cube half extent: one number or x,y,z.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@guarded
def track_cmd(data, model_path, start, end, center, half_extent, out):
    """Mean-shift track a cubic region from --start to --end."""
    cfg = _cfg()
    if end < start:
        raise click.UsageError("--end precedes --start")
    frames = [f for f in load_dataset(data) if start <= f.frame_id <= end]
    if not frames or frames[0].frame_id != start:
        raise ValueError(f"frame {start} not found in {data}")
    model = load_model(model_path)
    c = _parse_vec3(center, "--center")
    if "," in half_extent:
        he = _parse_vec3(half_extent, "--half-extent")
    else:
        try:
            he = float(half_extent)
        except ValueError:
            raise click.UsageError(f"cannot parse --half-extent: {half_extent!r}")
    entries = track(frames, model, c, he)
    atomic_write_text(out, trace_to_jsonl(entries))
    for e in entries:
        cfg.log(f"t={e.t} center=({e.center[0]:.4f},{e.center[1]:.4f},"
                f"{e.center[2]:.4f}) sim={e.similarity:.4f} "
                f"{'ok' if e.converged else 'stall'}")
    click.echo(f"wrote {out} ({len(entries)} steps)")


@main.command("serve")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8642, show_default=True)
@click.option("--session-dir", required=True, type=click.Path(file_okay=False))
@guarded
def serve(host, port, session_dir):
    """Run the HTTP service for the explorer UI."""
    from .service import run_server
    run_server(session_dir, host=host, port=port)


if __name__ == "__main__":
    main()
