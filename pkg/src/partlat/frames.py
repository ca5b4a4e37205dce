"""Particle frame storage: loading, normalization, spatial queries, sampling.

A frame is one time step of a particle dataset: N positions in 3-space plus
d scalar attributes per particle. Everything downstream works on normalized
coordinates, so normalization bookkeeping lives here:

- positions are min-max normalized per frame with ONE shared scale for all
  three axes (the largest axis range), preserving the aspect ratio;
- attributes are min-max normalized per attribute, by default over the
  whole dataset (all time steps) so values are comparable across frames;
- a degenerate range (max == min) maps every value to 0.5.

Radius neighborhoods ("patches") are served from a kd-tree and carry member
positions re-expressed relative to the query center, rescaled by the fixed
2r box into [0,1] with the center at 0.5 per axis.
"""
from __future__ import annotations

import csv
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyPatchError, InsufficientDataError, LoadError
from .pca import pca
from .util import atomic_write_bytes

PDS_MAGIC = b"PDS1"
FRAME_FILE_RE = re.compile(r"^frame_(\d+)\.pds$")

# kd-tree construction knobs used everywhere a spatial index is built
KDTREE_LEAFSIZE = 16


def build_kdtree(points: np.ndarray) -> cKDTree:
    """Standard kd-tree used across the package: median splits, leaf size 16."""
    return cKDTree(points, leafsize=KDTREE_LEAFSIZE, balanced_tree=True)


# ---------------------------------------------------------------------------
# normalization helpers


def _normalize_attr_columns(raw: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    lo = bounds[:, 0]
    width = bounds[:, 1] - bounds[:, 0]
    out = np.empty_like(raw, dtype=np.float64)
    nonzero = width > 0
    out[:, nonzero] = (raw[:, nonzero] - lo[nonzero]) / width[nonzero]
    out[:, ~nonzero] = 0.5
    # guard against values an ulp outside [0,1] when bounds come from float32 files
    np.clip(out, 0.0, 1.0, out=out)
    return out


@dataclass
class ParticleFrame:
    """One normalized, indexed time step.

    ``positions`` and ``attributes`` are the normalized values in [0,1];
    ``pos_offset``/``pos_scale`` and ``attr_bounds`` hold the raw-value
    bookkeeping needed to invert the normalization.
    """

    frame_id: int
    positions: np.ndarray          # (N,3) float64 in [0,1]
    attributes: np.ndarray         # (N,d) float64 in [0,1]
    attr_names: list[str]
    pos_offset: np.ndarray         # (3,) raw per-axis minimum
    pos_scale: float               # shared raw scale (largest axis range)
    attr_bounds: np.ndarray        # (d,2) raw per-attribute (min,max)
    _index: cKDTree | None = field(default=None, repr=False, compare=False)

    @classmethod
    def from_raw(cls, positions_raw, attributes_raw, attr_names=None,
                 frame_id: int = 0, attr_bounds=None) -> "ParticleFrame":
        """Normalize raw arrays into a frame.

        ``attr_bounds`` (d,2), when given, are dataset-wide attribute ranges;
        otherwise this frame's own min/max are used.
        """
        pos = np.ascontiguousarray(positions_raw, dtype=np.float64)
        att = np.ascontiguousarray(attributes_raw, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must be (N,3), got {pos.shape}")
        if att.ndim != 2 or att.shape[0] != pos.shape[0]:
            raise ValueError(f"attributes must be (N,d), got {att.shape}")
        n, d = att.shape
        if n < 1 or d < 1:
            raise ValueError("a frame needs at least one particle and one attribute")
        if not np.isfinite(pos).all() or not np.isfinite(att).all():
            raise ValueError("non-finite values in frame data")
        if attr_names is None:
            attr_names = [f"attr{i}" for i in range(d)]
        attr_names = [str(s) for s in attr_names]
        if len(attr_names) != d:
            raise ValueError("attr_names length disagrees with attribute columns")

        offset = pos.min(axis=0)
        scale = float((pos.max(axis=0) - offset).max())
        if scale > 0:
            norm_pos = (pos - offset) / scale
        else:
            norm_pos = np.full_like(pos, 0.5)

        if attr_bounds is None:
            bounds = np.stack([att.min(axis=0), att.max(axis=0)], axis=1)
        else:
            bounds = np.asarray(attr_bounds, dtype=np.float64)
            if bounds.shape != (d, 2):
                raise ValueError(f"attr_bounds must be ({d},2), got {bounds.shape}")
            if (bounds[:, 1] < bounds[:, 0]).any():
                raise ValueError("attr_bounds with max < min")
        norm_att = _normalize_attr_columns(att, bounds)

        return cls(frame_id=int(frame_id), positions=norm_pos, attributes=norm_att,
                   attr_names=attr_names, pos_offset=offset, pos_scale=scale,
                   attr_bounds=bounds)

    # -- basic shape info

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def attr_dim(self) -> int:
        return self.attributes.shape[1]

    @property
    def pos_bounds(self) -> np.ndarray:
        """Per-axis raw (min, max) pairs implied by the shared scale."""
        lo = self.pos_offset
        return np.stack([lo, lo + self.pos_scale], axis=1)

    @property
    def index(self) -> cKDTree:
        if self._index is None:
            self._index = build_kdtree(self.positions)
        return self._index

    # -- inverse normalization

    def denormalize_positions(self, norm: np.ndarray) -> np.ndarray:
        return np.asarray(norm, dtype=np.float64) * self.pos_scale + self.pos_offset

    def normalize_raw_positions(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        if self.pos_scale == 0:
            return np.full_like(raw, 0.5)
        return (raw - self.pos_offset) / self.pos_scale

    def denormalize_attributes(self, norm: np.ndarray) -> np.ndarray:
        norm = np.asarray(norm, dtype=np.float64)
        width = self.attr_bounds[:, 1] - self.attr_bounds[:, 0]
        return norm * width + self.attr_bounds[:, 0]

    def to_raw(self) -> tuple[np.ndarray, np.ndarray]:
        return (self.denormalize_positions(self.positions),
                self.denormalize_attributes(self.attributes))


# ---------------------------------------------------------------------------
# patches


def patch_geometry(positions: np.ndarray, center: np.ndarray, radius: float):
    """Relative geometry of member positions around a query center.

    Returns ``(rel, offsets, dist, kernel)`` where ``rel`` is positions in the
    fixed 2r box ([0,1], center at 0.5), ``offsets = rel - 0.5``, ``dist`` the
    Euclidean distance to the center, and ``kernel`` the distance-kernel value
    max(r - dist, 0)^2. Every caller that feeds the encoder goes through this
    one function so identical inputs stay bit-identical.
    """
    rel = (positions - center) / (2.0 * radius) + 0.5
    offsets = rel - 0.5
    dist = 2.0 * radius * np.sqrt(np.einsum("ij,ij->i", offsets, offsets))
    kernel = np.maximum(radius - dist, 0.0) ** 2
    return rel, offsets, dist, kernel


@dataclass
class Patch:
    """All particles within ``radius`` of ``center`` (inclusive boundary)."""

    center: np.ndarray             # (3,) normalized
    radius: float
    member_indices: np.ndarray     # (n,) int64, ascending
    rel_positions: np.ndarray      # (n,3) in [0,1], center at 0.5
    member_attributes: np.ndarray  # (n,d)
    distances: np.ndarray          # (n,) to center, normalized coords
    kernel: np.ndarray             # (n,) distance-kernel weights

    @property
    def n(self) -> int:
        return self.member_indices.shape[0]

    @property
    def is_empty(self) -> bool:
        return self.n == 0


def query_patch(frame: ParticleFrame, center, radius: float) -> Patch:
    """Exact radius neighborhood {q : ||center - q|| <= radius}.

    An empty result is returned as an empty Patch, not an error.
    """
    center = np.asarray(center, dtype=np.float64).reshape(3)
    if not (0.0 < radius <= 1.0):
        raise ValueError(f"radius must be in (0,1], got {radius}")
    if (center < -1e-9).any() or (center > 1 + 1e-9).any():
        raise ValueError(f"center {center} outside the unit domain")
    idx = np.array(sorted(frame.index.query_ball_point(center, radius)), dtype=np.int64)
    pos = frame.positions[idx] if idx.size else np.empty((0, 3))
    rel, _, dist, kern = patch_geometry(pos, center, radius)
    return Patch(center=center, radius=float(radius), member_indices=idx,
                 rel_positions=rel, member_attributes=frame.attributes[idx],
                 distances=dist, kernel=kern)


def neighborhood_mean(frame: ParticleFrame, center, radius: float) -> np.ndarray:
    """Unweighted mean attribute vector over the patch at ``center``."""
    patch = query_patch(frame, center, radius)
    if patch.is_empty:
        raise EmptyPatchError(f"no particles within {radius} of {np.asarray(center)}")
    return patch.member_attributes.mean(axis=0)


def patch_pca_descriptor(patch: Patch) -> np.ndarray:
    """Baseline shape descriptor: 4 principal axes of (rel-position, attribute) rows.

    Rows are 4-dim (3 relative position components + the first attribute);
    the four axes, variance-ordered and sign-fixed, are concatenated into a
    flat 16-vector.
    """
    if patch.n < 4:
        raise InsufficientDataError(f"descriptor needs >= 4 members, got {patch.n}")
    data = np.hstack([patch.rel_positions, patch.member_attributes[:, :1]])
    basis, _, _ = pca(data, 4)
    return basis.reshape(-1)


# ---------------------------------------------------------------------------
# value-based sampling


@dataclass
class SampleSet:
    frame_id: int
    indices: np.ndarray   # (k,) int64, unique, ascending
    weights: np.ndarray   # (k,) sampling weights (inverse bin density)


def attribute_bin_ids(attributes: np.ndarray) -> tuple[np.ndarray, int]:
    """Joint-histogram bin id per particle over the first min(d,3) attributes.

    Bin count per dimension is ceil(64^(1/d')) so the total stays near 64.
    """
    d_used = min(attributes.shape[1], 3)
    per_dim = math.ceil(round(64.0 ** (1.0 / d_used), 12))
    cols = attributes[:, :d_used]
    ids = np.zeros(attributes.shape[0], dtype=np.int64)
    for j in range(d_used):
        b = np.clip((cols[:, j] * per_dim).astype(np.int64), 0, per_dim - 1)
        ids = ids * per_dim + b
    return ids, per_dim ** d_used


def value_based_sample(frame: ParticleFrame, fraction: float, seed: int) -> SampleSet:
    """Draw ceil(fraction*N) unique particles, oversampling rare attribute values.

    Each particle's weight is 1/(count of its attribute-histogram bin);
    selection without replacement uses exponential keys so a fixed seed is
    bit-reproducible in a single pass.
    """
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"fraction must be in (0,1], got {fraction}")
    n = frame.n
    # small slack so e.g. 0.01*300 (not exactly 3.0 in binary) still gives 3
    k = min(n, max(1, math.ceil(fraction * n - 1e-9)))
    ids, _ = attribute_bin_ids(frame.attributes)
    counts = np.bincount(ids)
    weights = 1.0 / counts[ids]
    rng = np.random.default_rng(seed)
    keys = rng.standard_exponential(n) / weights
    chosen = np.argsort(keys, kind="stable")[:k]
    order = np.sort(chosen)
    return SampleSet(frame_id=frame.frame_id, indices=order.astype(np.int64),
                     weights=weights[order])


# ---------------------------------------------------------------------------
# PDS binary format


def write_pds(path, positions_raw, attributes_raw, attr_names) -> None:
    """Write one frame in the PDS binary layout (atomic)."""
    pos = np.ascontiguousarray(positions_raw, dtype=np.float32)
    att = np.ascontiguousarray(attributes_raw, dtype=np.float32)
    if pos.ndim != 2 or pos.shape[1] != 3 or att.ndim != 2 or att.shape[0] != pos.shape[0]:
        raise ValueError("positions must be (N,3) and attributes (N,d)")
    n, d = att.shape
    names = [str(s) for s in attr_names]
    if len(names) != d:
        raise ValueError("attr_names length disagrees with attribute columns")
    parts = [PDS_MAGIC, struct.pack("<II", n, d)]
    for name in names:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"attribute name too long: {name[:32]}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
    parts.append(pos.astype("<f4").tobytes())
    parts.append(att.astype("<f4").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def read_pds(path) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Parse a PDS file into raw (positions, attributes, names) float64 arrays."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read file: {exc}", path=str(path)) from exc

    def need(offset: int, count: int, what: str) -> None:
        if offset + count > len(data):
            raise LoadError(f"truncated file while reading {what}",
                            path=str(path), byte_offset=len(data))

    if len(data) < 4 or data[:4] != PDS_MAGIC:
        raise LoadError("bad magic, not a PDS file", path=str(path), byte_offset=0)
    need(4, 8, "header")
    n, d = struct.unpack_from("<II", data, 4)
    if n < 1 or d < 1:
        raise LoadError(f"invalid header counts N={n} d={d}", path=str(path), byte_offset=4)
    off = 12
    names: list[str] = []
    for i in range(d):
        need(off, 2, f"name length {i}")
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        need(off, ln, f"name {i}")
        try:
            names.append(data[off:off + ln].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise LoadError(f"attribute name {i} is not valid UTF-8",
                            path=str(path), byte_offset=off) from exc
        off += ln
    pos_off = off
    need(off, n * 12, "positions")
    positions = np.frombuffer(data, dtype="<f4", count=n * 3, offset=off).reshape(n, 3)
    off += n * 12
    att_off = off
    need(off, n * d * 4, "attributes")
    attributes = np.frombuffer(data, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    off += n * d * 4
    if off != len(data):
        raise LoadError("trailing bytes after attribute block",
                        path=str(path), byte_offset=off)
    for arr, base, what in ((positions, pos_off, "position"), (attributes, att_off, "attribute")):
        bad = ~np.isfinite(arr).reshape(-1)
        if bad.any():
            first = int(np.argmax(bad))
            raise LoadError(f"non-finite {what} value",
                            path=str(path), byte_offset=base + first * 4)
    return positions.astype(np.float64), attributes.astype(np.float64), names


# ---------------------------------------------------------------------------
# CSV import/export


def read_csv(path) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Parse a CSV frame: header x,y,z,<attrs...>, one particle per row."""
    path = Path(path)
    try:
        fh = open(path, "r", newline="", encoding="utf-8")
    except OSError as exc:
        raise LoadError(f"cannot read file: {exc}", path=str(path)) from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise LoadError("empty file", path=str(path), line=1) from None
        header = [h.strip() for h in header]
        if len(header) < 4 or [h.lower() for h in header[:3]] != ["x", "y", "z"]:
            raise LoadError("header must be x,y,z,<attribute names...>",
                            path=str(path), line=1)
        names = header[3:]
        if any(not s for s in names) or len(set(names)) != len(names):
            raise LoadError("attribute names must be non-empty and unique",
                            path=str(path), line=1)
        rows: list[list[float]] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise LoadError(f"expected {len(header)} columns, got {len(row)}",
                                path=str(path), line=lineno)
            try:
                vals = [float(v) for v in row]
            except ValueError as exc:
                raise LoadError(f"unparsable number: {exc}",
                                path=str(path), line=lineno) from exc
            if not all(math.isfinite(v) for v in vals):
                raise LoadError("non-finite value", path=str(path), line=lineno)
            rows.append(vals)
    if not rows:
        raise LoadError("no particle rows", path=str(path), line=2)
    arr = np.asarray(rows, dtype=np.float64)
    return arr[:, :3].copy(), arr[:, 3:].copy(), names


def write_csv(path, positions_raw, attributes_raw, attr_names) -> None:
    pos = np.asarray(positions_raw, dtype=np.float64)
    att = np.asarray(attributes_raw, dtype=np.float64)
    lines = [",".join(["x", "y", "z"] + [str(s) for s in attr_names])]
    for i in range(pos.shape[0]):
        vals = [f"{v:.9g}" for v in pos[i]] + [f"{v:.9g}" for v in att[i]]
        lines.append(",".join(vals))
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


# ---------------------------------------------------------------------------
# frame/dataset loading


def load_frame(path, format: str | None = None, attr_bounds=None,
               frame_id: int | None = None) -> ParticleFrame:
    """Load and normalize one frame from a PDS or CSV file.

    Format is inferred from the extension when not given. ``attr_bounds``
    overrides the attribute normalization ranges (dataset-wide loading).
    """
    path = Path(path)
    if format is None:
        format = "CSV" if path.suffix.lower() == ".csv" else "PDS"
    fmt = format.upper()
    if fmt == "PDS":
        pos, att, names = read_pds(path)
    elif fmt == "CSV":
        pos, att, names = read_csv(path)
    else:
        raise ValueError(f"unknown format {format!r}")
    if frame_id is None:
        m = FRAME_FILE_RE.match(path.name)
        frame_id = int(m.group(1)) if m else 0
    try:
        return ParticleFrame.from_raw(pos, att, names, frame_id=frame_id,
                                      attr_bounds=attr_bounds)
    except ValueError as exc:
        raise LoadError(str(exc), path=str(path)) from exc


def frame_files(directory) -> list[tuple[int, Path]]:
    """(frame index, path) pairs for frame_<int>.pds files, numerically ordered."""
    directory = Path(directory)
    out = []
    try:
        entries = sorted(directory.iterdir())
    except OSError as exc:
        raise LoadError(f"cannot list dataset directory: {exc}", path=str(directory)) from exc
    for p in entries:
        m = FRAME_FILE_RE.match(p.name)
        if m:
            out.append((int(m.group(1)), p))
    out.sort(key=lambda t: t[0])
    return out


def load_dataset(directory) -> list[ParticleFrame]:
    """Load every frame of a dataset directory with shared attribute bounds.

    Attribute normalization ranges are the min/max over ALL time steps, so
    the same raw value maps to the same normalized value in every frame.
    """
    files = frame_files(directory)
    if not files:
        raise LoadError("no frame_<index>.pds files found", path=str(directory))
    raws = []
    names0: list[str] | None = None
    bounds = None
    for idx, path in files:
        pos, att, names = read_pds(path)
        if names0 is None:
            names0 = names
        elif names != names0:
            raise LoadError("attribute columns differ across frames", path=str(path))
        lo, hi = att.min(axis=0), att.max(axis=0)
        if bounds is None:
            bounds = np.stack([lo, hi], axis=1)
        else:
            bounds[:, 0] = np.minimum(bounds[:, 0], lo)
            bounds[:, 1] = np.maximum(bounds[:, 1], hi)
        raws.append((idx, path, pos, att))
    frames = []
    for idx, path, pos, att in raws:
        try:
            frames.append(ParticleFrame.from_raw(pos, att, names0, frame_id=idx,
                                                 attr_bounds=bounds))
        except ValueError as exc:
            raise LoadError(str(exc), path=str(path)) from exc
    return frames


def load_frame_with_dataset_bounds(path) -> ParticleFrame:
    """Load one frame file; if it sits inside a dataset directory, use the
    dataset-wide attribute bounds so latents match whole-dataset loading."""
    path = Path(path)
    m = FRAME_FILE_RE.match(path.name)
    siblings = frame_files(path.parent) if m else []
    if m and len(siblings) > 1:
        bounds = None
        names0 = None
        for _, p in siblings:
            _, att, names = read_pds(p)
            if names0 is None:
                names0 = names
            elif names != names0:
                raise LoadError("attribute columns differ across frames", path=str(p))
            lo, hi = att.min(axis=0), att.max(axis=0)
            if bounds is None:
                bounds = np.stack([lo, hi], axis=1)
            else:
                bounds[:, 0] = np.minimum(bounds[:, 0], lo)
                bounds[:, 1] = np.maximum(bounds[:, 1], hi)
        return load_frame(path, attr_bounds=bounds, frame_id=int(m.group(1)))
    return load_frame(path)
