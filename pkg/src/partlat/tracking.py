"""Mean-shift tracking of a cubic region through a frame sequence.

The target is a kernel-weighted histogram over a fixed 4D PCA projection of
the region's latent vectors. Each time step re-histograms the candidate
region, weights members by sqrt(target_bin / candidate_bin), and moves the
center to the weighted member centroid until the shift stalls below
tolerance. The PCA basis and bin edges are frozen when the target is built
so every later frame is binned in the same coordinates.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDataError, TrackStallError
from .frames import ParticleFrame
from .model import AutoencoderModel, LatentField
from .train import encode_particles

HIST_BINS = 8
PROJ_DIM = 4
EDGE_PAD_FRACTION = 0.1
MIN_TARGET_MEMBERS = 16
DEFAULT_SHIFT_TOL = 1e-3
DEFAULT_MAX_ITER = 20


@dataclass
class TrackTarget:
    basis: np.ndarray        # (k, v) PCA rows, frozen
    mean: np.ndarray         # (v,) latent mean used by the projection
    edges: np.ndarray        # (k, HIST_BINS + 1) bin edges, frozen
    hist: np.ndarray         # (HIST_BINS ** k,) normalized target histogram
    half_extent: np.ndarray  # (3,) cube half extent
    bandwidth: float         # Euclidean norm of half_extent

    @property
    def proj_dim(self) -> int:
        return self.basis.shape[0]


@dataclass
class TraceEntry:
    t: int
    center: np.ndarray
    iters: int
    similarity: float
    converged: bool


def _as_half_extent(half_extent) -> np.ndarray:
    he = np.broadcast_to(np.asarray(half_extent, dtype=np.float64), (3,)).copy()
    if not np.all(he > 0):
        raise ValueError(f"half_extent must be positive, got {he}")
    return he


def region_indices(frame: ParticleFrame, center, half_extent) -> np.ndarray:
    """Ascending indices of particles inside the axis-aligned cube."""
    he = _as_half_extent(half_extent)
    c = np.asarray(center, dtype=np.float64)
    cand = frame.index.query_ball_point(c, float(he.max()) * (1.0 + 1e-9), p=np.inf)
    if not cand:
        return np.empty(0, dtype=np.int64)
    idx = np.sort(np.asarray(cand, dtype=np.int64))
    inside = np.all(np.abs(frame.positions[idx] - c) <= he, axis=1)
    return idx[inside]


def _spatial_weights(positions: np.ndarray, center: np.ndarray,
                     bandwidth: float) -> np.ndarray:
    d2 = ((positions - center) ** 2).sum(axis=1)
    return np.maximum(1.0 - d2 / (bandwidth * bandwidth), 0.0)


def _bin_ids(proj: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Flat histogram bin per row; outside values clamp to the edge bins."""
    k = edges.shape[0]
    flat = np.zeros(proj.shape[0], dtype=np.int64)
    for a in range(k):
        width = (edges[a, -1] - edges[a, 0]) / HIST_BINS
        ids = np.floor((proj[:, a] - edges[a, 0]) / width).astype(np.int64)
        np.clip(ids, 0, HIST_BINS - 1, out=ids)
        flat = flat * HIST_BINS + ids
    return flat


def _histogram(proj: np.ndarray, positions: np.ndarray, center: np.ndarray,
               target_or_edges, bandwidth: float) -> tuple[np.ndarray, np.ndarray]:
    edges = target_or_edges
    k = edges.shape[0]
    nbins = HIST_BINS ** k
    bins = _bin_ids(proj, edges)
    w = _spatial_weights(positions, center, bandwidth)
    hist = np.bincount(bins, weights=w, minlength=nbins)
    total = hist.sum()
    if total <= 0.0:
        hist = np.bincount(bins, minlength=nbins).astype(np.float64)
        total = hist.sum()
    return hist / total, bins


def build_target(latents: np.ndarray, positions: np.ndarray, center,
                 half_extent) -> TrackTarget:
    """Freeze a target signature from the selected region's latents."""
    lat = np.asarray(latents, dtype=np.float64)
    pos = np.asarray(positions, dtype=np.float64)
    if lat.shape[0] != pos.shape[0]:
        raise ValueError("latents and positions row counts differ")
    if lat.shape[0] < MIN_TARGET_MEMBERS:
        raise InsufficientDataError(
            f"target region has {lat.shape[0]} members; need at least "
            f"{MIN_TARGET_MEMBERS}")
    he = _as_half_extent(half_extent)
    c = np.asarray(center, dtype=np.float64)
    from .pca import pca
    out_dim = min(PROJ_DIM, lat.shape[1])
    basis, mean, proj = pca(lat, out_dim)
    lo = proj.min(axis=0)
    hi = proj.max(axis=0)
    span = hi - lo
    pad = np.where(span > 0, EDGE_PAD_FRACTION * span, 0.5)
    edges = np.linspace(lo - pad, hi + pad, HIST_BINS + 1, axis=1)
    bandwidth = float(np.sqrt((he ** 2).sum()))
    hist, _ = _histogram(proj, pos, c, edges, bandwidth)
    return TrackTarget(basis=basis, mean=mean, edges=edges, hist=hist,
                       half_extent=he, bandwidth=bandwidth)


def bhattacharyya(a: np.ndarray, b: np.ndarray) -> float:
    """Bhattacharyya coefficient of two normalized histograms (1 = identical)."""
    return float(np.sqrt(np.maximum(a, 0.0) * np.maximum(b, 0.0)).sum())


def _region_latents(latent_source, frame: ParticleFrame,
                    idx: np.ndarray) -> np.ndarray:
    if isinstance(latent_source, LatentField):
        if latent_source.latents.shape[0] != frame.n:
            raise ValueError("latent field row count disagrees with frame")
        return np.asarray(latent_source.latents[idx], dtype=np.float64)
    if isinstance(latent_source, AutoencoderModel):
        return encode_particles(latent_source, frame, idx)
    arr = np.asarray(latent_source, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != frame.n:
        raise ValueError("latent_source must cover every particle of the frame")
    return arr[idx]


def mean_shift_step(frame: ParticleFrame, latent_source, target: TrackTarget,
                    center) -> tuple[np.ndarray, float]:
    """One mean-shift update. Returns (new_center, similarity at old center).

    Raises TrackStallError when the candidate region is empty or every
    member weight vanishes.
    """
    c = np.asarray(center, dtype=np.float64)
    idx = region_indices(frame, c, target.half_extent)
    if idx.size == 0:
        raise TrackStallError(f"no particles in candidate region at {c}")
    lat = _region_latents(latent_source, frame, idx)
    proj = (lat - target.mean) @ target.basis.T
    cand, bins = _histogram(proj, frame.positions[idx], c, target.edges,
                            target.bandwidth)
    sim = bhattacharyya(target.hist, cand)
    t_b = target.hist[bins]
    c_b = cand[bins]
    w = np.zeros(idx.size)
    mask = c_b > 0
    w[mask] = np.sqrt(t_b[mask] / c_b[mask])
    total = w.sum()
    if total <= 0.0:
        raise TrackStallError(f"mean-shift weights all zero at {c}")
    new_center = (frame.positions[idx] * w[:, None]).sum(axis=0) / total
    return new_center, sim


def track(frames: list[ParticleFrame], latent_source, center, half_extent,
          shift_tol: float = DEFAULT_SHIFT_TOL,
          max_iter: int = DEFAULT_MAX_ITER) -> list[TraceEntry]:
    """Track the region selected on frames[0] through the whole sequence.

    ``latent_source`` is either a dict {frame_id: LatentField}, a single
    LatentField (only valid when every frame has the same particles), or an
    AutoencoderModel encoded on demand. A stalled frame keeps the previous
    center and the trace continues.
    """
    if not frames:
        raise ValueError("no frames to track over")
    he = _as_half_extent(half_extent)
    c0 = np.asarray(center, dtype=np.float64)

    def source_for(frame: ParticleFrame):
        if isinstance(latent_source, dict):
            try:
                return latent_source[frame.frame_id]
            except KeyError:
                raise ValueError(f"no latents for frame {frame.frame_id}") from None
        return latent_source

    first = frames[0]
    idx0 = region_indices(first, c0, he)
    lat0 = _region_latents(source_for(first), first, idx0) if idx0.size else \
        np.empty((0, 1))
    target = build_target(lat0, first.positions[idx0], c0, he)
    proj0 = (lat0 - target.mean) @ target.basis.T
    cand0, _ = _histogram(proj0, first.positions[idx0], c0, target.edges,
                          target.bandwidth)
    entries = [TraceEntry(t=first.frame_id, center=c0.copy(), iters=0,
                          similarity=bhattacharyya(target.hist, cand0),
                          converged=True)]
    y = c0.copy()
    for frame in frames[1:]:
        src = source_for(frame)
        iters = 0
        sim = 0.0
        converged = False
        for _ in range(max_iter):
            try:
                y_new, sim = mean_shift_step(frame, src, target, y)
            except TrackStallError:
                break
            iters += 1
            shift = float(np.sqrt(((y_new - y) ** 2).sum()))
            y = y_new
            if shift < shift_tol:
                converged = True
                break
        entries.append(TraceEntry(t=frame.frame_id, center=y.copy(), iters=iters,
                                  similarity=float(sim), converged=converged))
    return entries


def deviation(tracked_center, true_center, radius: float) -> float:
    """Tracking error in units of the region radius."""
    if radius <= 0:
        raise ValueError(f"radius must be > 0, got {radius}")
    a = np.asarray(tracked_center, dtype=np.float64)
    b = np.asarray(true_center, dtype=np.float64)
    return float(np.sqrt(((a - b) ** 2).sum()) / radius)


def trace_to_jsonl(entries: list[TraceEntry]) -> str:
    lines = []
    for e in entries:
        lines.append(json.dumps({
            "t": int(e.t),
            "center": [float(x) for x in e.center],
            "iters": int(e.iters),
            "similarity": float(e.similarity),
            "converged": bool(e.converged),
        }, sort_keys=True))
    return "\n".join(lines) + "\n"


def trace_from_jsonl(text: str) -> list[TraceEntry]:
    entries = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        entries.append(TraceEntry(
            t=int(rec["t"]),
            center=np.asarray(rec["center"], dtype=np.float64),
            iters=int(rec["iters"]),
            similarity=float(rec["similarity"]),
            converged=bool(rec["converged"])))
    return entries
