"""Synthetic particle datasets with ground truth, for tests and demos.

Three families:

- blob: a compact cluster of "hot" particles translating through a static
  "cold" background. Coordinates are quantized to dyadic fractions and laid
  out in mirrored pairs about the domain center, so the zero-velocity case
  is exactly point-symmetric (bit-level) and every frame is identical.
- archetypes: isolated particle sites of two kinds that differ only in the
  spatial arrangement of an attribute (gradient mode) or in density and
  level (density mode). Site labels are the ground truth for clustering.
- sinfield: one smooth scalar field sampled on a jittered grid with i.i.d.
  noise per frame; ``bump`` mode builds the field from Gaussian bumps of a
  known correlation length.

Each generator writes frame_<index>.pds files plus a gt.json and returns
the ground-truth payload.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .frames import load_frame, write_pds
from .util import atomic_write_text

BG_GRID = 1024          # background coordinates are integers / BG_GRID
BG_LO, BG_HI = 16, 1008  # inclusive integer range, keeps a margin off the walls
BLOB_GRID = 4096        # blob offsets are integers / BLOB_GRID


def _write_gt(out_dir: Path, payload: dict) -> None:
    atomic_write_text(out_dir / "gt.json",
                      json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _frame_path(out_dir: Path, t: int) -> Path:
    return out_dir / f"frame_{t:04d}.pds"


def make_blob_dataset(out_dir, n_frames: int = 11, n_background: int = 2600,
                      n_blob: int = 700, blob_radius: float = 0.10,
                      velocity=(0.0, 0.0, 0.0), start=(0.5, 0.5, 0.5),
                      attr_noise: float = 0.01, hot: float = 0.75,
                      cold: float = 0.25, seed: int = 0) -> dict:
    """Hot blob over a static cold background; one attribute (concentration).

    With zero velocity and the default start the whole point set is exactly
    mirror-symmetric about (0.5, 0.5, 0.5) in float32 and all frames are
    byte-identical, which makes the blob centroid a fixed point of any
    symmetric averaging.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    rng = np.random.default_rng(seed)
    n_background += n_background % 2
    n_blob += n_blob % 2

    start = np.asarray(start, dtype=np.float64)
    velocity = np.asarray(velocity, dtype=np.float64)
    centers = [start + velocity * t for t in range(n_frames)]
    lo_wall = BG_LO / BG_GRID
    hi_wall = BG_HI / BG_GRID
    for c in centers:
        if (c - blob_radius).min() < lo_wall or (c + blob_radius).max() > hi_wall:
            raise ValueError("blob path leaves the populated domain")

    # background: mirrored dyadic pairs, static across frames
    nb2 = n_background // 2
    u = rng.integers(BG_LO, BG_HI + 1, size=(nb2, 3)).astype(np.float64) / BG_GRID
    bg = np.concatenate([u, 1.0 - u], axis=0)

    # blob offsets: mirrored dyadic pairs within the blob radius
    j_max = int(np.floor(blob_radius * BLOB_GRID))
    want = n_blob // 2
    offsets = np.empty((want, 3))
    got = 0
    while got < want:
        j = rng.integers(-j_max, j_max + 1, size=(4 * (want - got), 3))
        d = j.astype(np.float64) / BLOB_GRID
        keep = d[np.einsum("ij,ij->i", d, d) <= blob_radius ** 2]
        take = min(want - got, keep.shape[0])
        offsets[got:got + take] = keep[:take]
        got += take
    offsets = np.concatenate([offsets, -offsets], axis=0)

    attrs = np.concatenate([
        rng.normal(cold, attr_noise, size=n_background),
        rng.normal(hot, attr_noise, size=n_blob),
    ])[:, None]

    for t, c in enumerate(centers):
        pos = np.concatenate([bg, c + offsets], axis=0)
        write_pds(_frame_path(out_dir, t), pos, attrs, ["concentration"])

    frame0 = load_frame(_frame_path(out_dir, 0))
    centers_norm = [frame0.normalize_raw_positions(c).tolist() for c in centers]
    payload = {
        "kind": "blob",
        "seed": int(seed),
        "n_frames": int(n_frames),
        "frame_ids": list(range(n_frames)),
        "n_background": int(n_background),
        "n_blob": int(n_blob),
        "blob_member_start": int(n_background),
        "blob_radius_raw": float(blob_radius),
        "blob_radius_norm": float(blob_radius / frame0.pos_scale),
        "velocity_raw": velocity.tolist(),
        "centers_raw": [c.tolist() for c in centers],
        "centers_norm": centers_norm,
        "pos_scale": float(frame0.pos_scale),
        "attr_names": ["concentration"],
        "hot": float(hot),
        "cold": float(cold),
        "attr_noise": float(attr_noise),
    }
    _write_gt(out_dir, payload)
    return payload


def make_archetype_dataset(out_dir, mode: str = "gradient", n_sites: int = 64,
                           per_site: int = 48, site_radius: float = 0.03,
                           attr_noise: float = 0.02, amplitude: float = 0.3,
                           n_frames: int = 1, seed: int = 0) -> dict:
    """Isolated particle sites of two archetypes, labeled in the ground truth.

    gradient mode: both kinds share the same attribute mean and density; the
    attribute rises along +x inside kind-0 sites and along -x inside kind-1
    sites, so only direction-resolved features can tell them apart.

    density mode: kind-0 sites are dense and hot, kind-1 sites sparse and
    cold.
    """
    if mode not in ("gradient", "density"):
        raise ValueError(f"unknown archetype mode {mode!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    g = int(np.ceil(n_sites ** (1.0 / 3.0) - 1e-9))
    spacing = 1.0 / g
    if site_radius > 0.2 * spacing:
        raise ValueError(
            f"site_radius {site_radius} too large for {g}^3 grid "
            f"(spacing {spacing:.4f}); sites must stay isolated")
    cells = [(i, j, k) for i in range(g) for j in range(g) for k in range(g)]
    cells = cells[:n_sites]
    site_centers = (np.asarray(cells, dtype=np.float64) + 0.5) / g
    site_centers += rng.uniform(-0.1, 0.1, size=site_centers.shape) * spacing
    kinds = np.zeros(n_sites, dtype=np.int64)
    kinds[rng.permutation(n_sites)[: n_sites // 2]] = 1

    def ball_offsets(count: int) -> np.ndarray:
        v = rng.normal(size=(count, 3))
        v /= np.sqrt(np.einsum("ij,ij->i", v, v))[:, None]
        r = site_radius * rng.uniform(size=count) ** (1.0 / 3.0)
        return v * r[:, None]

    positions, values, labels, site_of = [], [], [], []
    for s in range(n_sites):
        kind = int(kinds[s])
        if mode == "gradient":
            count = per_site
        else:
            count = per_site if kind == 0 else max(per_site // 3, 8)
        off = ball_offsets(count)
        positions.append(site_centers[s] + off)
        if mode == "gradient":
            slope = amplitude if kind == 0 else -amplitude
            vals = 0.5 + slope * (off[:, 0] / site_radius)
        else:
            vals = np.full(count, 0.7 if kind == 0 else 0.3)
        values.append(vals + rng.normal(0.0, attr_noise, size=count))
        labels.append(np.full(count, kind, dtype=np.int64))
        site_of.append(np.full(count, s, dtype=np.int64))
    pos = np.concatenate(positions, axis=0)
    att = np.concatenate(values)[:, None]
    labels = np.concatenate(labels)
    site_of = np.concatenate(site_of)

    for t in range(n_frames):
        write_pds(_frame_path(out_dir, t), pos, att, ["signal"])

    frame0 = load_frame(_frame_path(out_dir, 0))
    payload = {
        "kind": "archetypes",
        "mode": mode,
        "seed": int(seed),
        "n_frames": int(n_frames),
        "frame_ids": list(range(n_frames)),
        "n_sites": int(n_sites),
        "per_site": int(per_site),
        "n_particles": int(pos.shape[0]),
        "site_radius_raw": float(site_radius),
        "site_radius_norm": float(site_radius / frame0.pos_scale),
        "pos_scale": float(frame0.pos_scale),
        "site_centers_raw": site_centers.tolist(),
        "site_kinds": kinds.tolist(),
        "labels": labels.tolist(),
        "site_of": site_of.tolist(),
        "attr_names": ["signal"],
    }
    _write_gt(out_dir, payload)
    return payload


def _bump_field(points: np.ndarray, length: float,
                rng: np.random.Generator) -> np.ndarray:
    """Random superposition of Gaussian bumps of width ``length``."""
    k = max(16, int(np.ceil(2.0 / length ** 3)))
    k = min(k, 2000)
    centers = rng.uniform(size=(k, 3))
    signs = rng.choice([-1.0, 1.0], size=k)
    field = np.zeros(points.shape[0])
    inv = 1.0 / (2.0 * length * length)
    for c, s in zip(centers, signs):
        d2 = np.einsum("ij,ij->i", points - c, points - c)
        field += s * np.exp(-d2 * inv)
    return field


def make_sinfield_dataset(out_dir, n: int = 3375, n_frames: int = 2,
                          mode: str = "sin", waves: float = 1.0,
                          length: float = 0.15, noise: float = 0.05,
                          seed: int = 0, cluster_grid: int = 0,
                          cluster_radius: float = 0.05) -> dict:
    """Smooth scalar field sampled by particles, fresh noise per frame.

    sin mode: sin/cos product with ``waves`` periods per axis.
    bump mode: Gaussian-bump field with correlation length ``length``.
    The field values are standardized to mean 0.5, std 0.15 before noise.

    With ``cluster_grid`` = 0 the particles sit on a jittered uniform grid.
    With g > 0 they are packed into g^3 dense balls of radius
    ``cluster_radius`` on a jittered grid of centers, mimicking how SPH-style
    samplers concentrate particles instead of spreading them evenly.
    """
    if mode not in ("sin", "bump"):
        raise ValueError(f"unknown sinfield mode {mode!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    if cluster_grid > 0:
        gc = int(cluster_grid)
        n_sites = gc ** 3
        spacing = 1.0 / gc
        # balls must stay disjoint or the dataset degenerates to uniform
        if cluster_radius <= 0.0 or cluster_radius >= 0.4 * spacing:
            raise ValueError("cluster_radius must be in (0, 0.4/cluster_grid)")
        per = max(2, int(round(n / n_sites)))
        n_actual = per * n_sites
        ii, jj, kk = np.meshgrid(np.arange(gc), np.arange(gc), np.arange(gc),
                                 indexing="ij")
        grid = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
        centers = (grid.astype(np.float64) + 0.5
                   + rng.uniform(-0.1, 0.1, size=(n_sites, 3))) * spacing
        direc = rng.normal(size=(n_actual, 3))
        direc /= np.linalg.norm(direc, axis=1, keepdims=True)
        radii = cluster_radius * rng.uniform(0.0, 1.0, size=n_actual) ** (1 / 3)
        pos = np.repeat(centers, per, axis=0) + direc * radii[:, None]
        pos = np.clip(pos, 0.0, 1.0)
    else:
        g = max(2, int(round(n ** (1.0 / 3.0))))
        n_actual = g ** 3
        ii, jj, kk = np.meshgrid(np.arange(g), np.arange(g), np.arange(g),
                                 indexing="ij")
        grid = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3).astype(np.float64)
        pos = (grid + 0.5 + rng.uniform(-0.45, 0.45, size=(n_actual, 3))) / g

    if mode == "sin":
        field = np.sin(2.0 * np.pi * waves * pos[:, 0]) * \
            np.cos(2.0 * np.pi * waves * pos[:, 1])
    else:
        field = _bump_field(pos, length, rng)
    std = float(field.std())
    if std == 0.0:
        raise ValueError("degenerate field; adjust parameters")
    field = 0.5 + 0.15 * (field - field.mean()) / std

    for t in range(n_frames):
        att = (field + rng.normal(0.0, noise, size=n_actual))[:, None]
        write_pds(_frame_path(out_dir, t), pos, att, ["field"])

    frame0 = load_frame(_frame_path(out_dir, 0))
    payload = {
        "kind": "sinfield",
        "mode": mode,
        "seed": int(seed),
        "n": int(n_actual),
        "n_frames": int(n_frames),
        "frame_ids": list(range(n_frames)),
        "waves": float(waves),
        "length": float(length),
        "length_norm": float(length / frame0.pos_scale),
        "noise": float(noise),
        "cluster_grid": int(cluster_grid),
        "cluster_radius": float(cluster_radius) if cluster_grid > 0 else 0.0,
        "pos_scale": float(frame0.pos_scale),
        "attr_names": ["field"],
    }
    _write_gt(out_dir, payload)
    return payload
