"""Patch-radius selection by least-squares cross-validation.

The distance kernel (r - ||p-q||)^2 turns a patch into a Nadaraya-Watson
estimate of the attribute field at its center. Leaving each sample point
out of its own estimate gives a squared-error score per radius; the radius
minimizing the cross-frame average of that score is the bandwidth the
autoencoder should use.

The score is not guaranteed unimodal, so the search pre-probes 8 equally
spaced radii and runs golden-section only inside the bracket around the
best probe.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import SearchError, UndefinedEstimateError
from .frames import ParticleFrame, SampleSet, query_patch, value_based_sample
from .util import child_seeds

INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def nw_estimate(frame: ParticleFrame, p, r: float,
                exclude: int | None = None) -> np.ndarray:
    """Kernel-weighted attribute estimate at point ``p`` with bandwidth ``r``.

    ``exclude`` drops one particle index from the patch (leave-one-out).
    Raises UndefinedEstimateError when no member carries positive kernel
    weight, which callers treat as a skip.
    """
    patch = query_patch(frame, p, r)
    weights = patch.kernel
    attrs = patch.member_attributes
    if exclude is not None and patch.n:
        keep = patch.member_indices != exclude
        weights = weights[keep]
        attrs = attrs[keep]
    total = float(weights.sum())
    if weights.size == 0 or total <= 0.0:
        raise UndefinedEstimateError(f"no kernel mass at {np.asarray(p)} with r={r}")
    return (weights @ attrs) / total


@dataclass
class LscvResult:
    value: float
    evaluated: int
    skipped: int


def lscv_detail(frames: list[ParticleFrame], samples: list[SampleSet],
                r: float) -> LscvResult:
    """Leave-one-out squared-error score at radius ``r``.

    Per frame: mean over its sample points of ||X_i - estimate_without_i||^2;
    the result is the mean of the per-frame values. Sample points whose
    leave-one-out patch has no kernel mass are skipped and tallied; a frame
    with no valid points drops out of the cross-frame mean.
    """
    if len(frames) != len(samples):
        raise ValueError("frames and samples must align")
    if not (0.0 < r < 1.0):
        raise ValueError(f"r must be in (0,1), got {r}")
    per_frame = []
    evaluated = 0
    skipped = 0
    for frame, sample in zip(frames, samples):
        if sample.indices.size == 0:
            raise ValueError(f"empty sample for frame {frame.frame_id}")
        errs = []
        for i in sample.indices:
            i = int(i)
            try:
                est = nw_estimate(frame, frame.positions[i], r, exclude=i)
            except UndefinedEstimateError:
                skipped += 1
                continue
            diff = frame.attributes[i] - est
            errs.append(float(diff @ diff))
            evaluated += 1
        if errs:
            per_frame.append(float(np.mean(errs)))
    if not per_frame:
        raise UndefinedEstimateError(f"every sample point skipped at r={r}")
    return LscvResult(value=float(np.mean(per_frame)), evaluated=evaluated,
                      skipped=skipped)


def lscv(frames: list[ParticleFrame], samples: list[SampleSet], r: float) -> float:
    return lscv_detail(frames, samples, r).value


def golden_section_min(f, lo: float, hi: float, tol: float = 1e-3,
                       max_iter: int = 40) -> tuple[float, float]:
    """Minimize a scalar function on [lo, hi] by golden-section bracketing.

    One interior evaluation is reused per step. Stops when the bracket
    width drops to ``tol`` or after ``max_iter`` steps, and returns the best
    interior probe (ties broken toward smaller x). A non-finite objective
    value aborts the search with the offending x attached.
    """
    if not lo < hi:
        raise ValueError(f"need lo < hi, got [{lo}, {hi}]")
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")

    def ev(x: float) -> float:
        y = float(f(x))
        if not math.isfinite(y):
            raise SearchError("non-finite objective value", x=x)
        return y

    a, b = float(lo), float(hi)
    c = b - INVPHI * (b - a)
    d = a + INVPHI * (b - a)
    fc, fd = ev(c), ev(d)
    best = min((fc, c), (fd, d))
    steps = 0
    while (b - a) > tol and steps < max_iter:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - INVPHI * (b - a)
            fc = ev(c)
            best = min(best, (fc, c))
        else:
            a, c, fc = c, d, fd
            d = a + INVPHI * (b - a)
            fd = ev(d)
            best = min(best, (fd, d))
        steps += 1
    return best[1], best[0]


@dataclass
class BandwidthReport:
    r_opt: float
    lscv_curve: list[tuple[float, float]]   # (r, score), sorted by r
    curve_skips: list[int]                  # skipped points per curve entry
    samples_per_frame: int
    frames_used: list[int]
    r_floor: float

    def to_json(self) -> str:
        payload = {
            "r_opt": self.r_opt,
            "r_floor": self.r_floor,
            "samples_per_frame": self.samples_per_frame,
            "frames_used": self.frames_used,
            "total_skipped": int(sum(self.curve_skips)),
            "curve": [
                {"r": r, "lscv": v, "skipped": s}
                for (r, v), s in zip(self.lscv_curve, self.curve_skips)
            ],
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def median_nn_distance(frames: list[ParticleFrame]) -> float:
    """Median nearest-neighbor distance pooled over all frames (normalized coords)."""
    nn = []
    for frame in frames:
        if frame.n < 2:
            continue
        d, _ = frame.index.query(frame.positions, k=2)
        nn.append(d[:, 1])
    if not nn:
        return 0.0
    return float(np.median(np.concatenate(nn)))


def estimate_radius(frames: list[ParticleFrame], sample_fraction: float = 0.01,
                    seed: int = 0, *, tol: float = 1e-3, max_iter: int = 40,
                    n_probes: int = 8, r_max: float = 0.5) -> BandwidthReport:
    """Search [r_floor, r_max] for the radius minimizing the averaged LSCV score.

    r_floor = 2x the median nearest-neighbor distance: anything below particle
    spacing yields empty leave-one-out patches. Value-based samples are drawn
    once per frame from ``seed``; the whole procedure is deterministic.
    """
    if not frames:
        raise ValueError("need at least one frame")
    seeds = child_seeds(seed, len(frames), salt=1)
    samples = [value_based_sample(f, sample_fraction, s)
               for f, s in zip(frames, seeds)]
    floor = 2.0 * median_nn_distance(frames)
    lo = min(max(floor, 1e-4), 0.9 * r_max)
    hi = float(r_max)

    cache: dict[float, LscvResult] = {}

    def objective(r: float) -> float:
        r = float(r)
        if r not in cache:
            cache[r] = lscv_detail(frames, samples, r)
        return cache[r].value

    probes = [float(r) for r in np.linspace(lo, hi, n_probes)]
    for r in probes:
        objective(r)
    best_i = min(range(len(probes)), key=lambda i: (cache[probes[i]].value, probes[i]))
    a = probes[max(best_i - 1, 0)]
    b = probes[min(best_i + 1, len(probes) - 1)]
    if a < b:
        golden_section_min(objective, a, b, tol=tol, max_iter=max_iter)

    r_opt = min(cache, key=lambda r: (cache[r].value, r))
    rs = sorted(cache)
    return BandwidthReport(
        r_opt=float(r_opt),
        lscv_curve=[(r, cache[r].value) for r in rs],
        curve_skips=[cache[r].skipped for r in rs],
        samples_per_frame=int(samples[0].indices.size),
        frames_used=[f.frame_id for f in frames],
        r_floor=float(lo),
    )
