"""Autoencoder model state, latent fields, and binary persistence.

The model is a plain dict of float64 numpy arrays (learnable parameters)
plus batch-norm running statistics. Files store float32; after training the
in-memory parameters are snapped to float32-representable values so a
save/load round trip is bit-exact and inference matches exactly.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import LoadError
from .util import atomic_write_bytes

MODEL_MAGIC = b"GAE1"
MODEL_VERSION = 1
LATENT_MAGIC = b"LAT1"

DIR_CH = 64      # channels of the directional (per-basis) encoder stage
HIDDEN_CH = 256  # shared hidden width
BN_EPS = 1e-5
BN_MOMENTUM = 0.9  # running = momentum*running + (1-momentum)*batch


def param_shapes(attr_dim: int, latent_dim: int) -> dict[str, tuple[int, ...]]:
    """Learnable parameter blocks in their fixed serialization order.

    Directional blocks have the basis axis first, ordered +z,-z,+y,-y,+x,-x.
    """
    d, v = attr_dim, latent_dim
    return {
        "enc_dir_w": (6, DIR_CH, d),
        "enc_dir_b": (6, DIR_CH),
        "enc_fc1_w": (HIDDEN_CH, DIR_CH),
        "enc_fc1_b": (HIDDEN_CH,),
        "enc_bn1_gamma": (HIDDEN_CH,),
        "enc_bn1_beta": (HIDDEN_CH,),
        "enc_fc2_w": (v, HIDDEN_CH),
        "enc_fc2_b": (v,),
        "enc_bn2_gamma": (v,),
        "enc_bn2_beta": (v,),
        "dec_dir_w": (6, HIDDEN_CH, v),
        "dec_dir_b": (6, HIDDEN_CH),
        "dec_bn_gamma": (HIDDEN_CH,),
        "dec_bn_beta": (HIDDEN_CH,),
        "dec_fc_w": (3 + d, HIDDEN_CH),
        "dec_fc_b": (3 + d,),
    }


def bn_stat_shapes(attr_dim: int, latent_dim: int) -> dict[str, tuple[int, ...]]:
    return {
        "enc_bn1_mean": (HIDDEN_CH,),
        "enc_bn1_var": (HIDDEN_CH,),
        "enc_bn2_mean": (latent_dim,),
        "enc_bn2_var": (latent_dim,),
        "dec_bn_mean": (HIDDEN_CH,),
        "dec_bn_var": (HIDDEN_CH,),
    }


@dataclass
class AutoencoderModel:
    radius: float
    attr_dim: int
    latent_dim: int
    rng_seed: int
    params: dict[str, np.ndarray]    # float64, shapes per param_shapes
    bn_stats: dict[str, np.ndarray]  # float64 running mean/var

    @classmethod
    def initialize(cls, radius: float, attr_dim: int, latent_dim: int,
                   seed: int = 0) -> "AutoencoderModel":
        """Fresh model: uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases,
        unit gammas, zero running means, unit running variances."""
        if not (0.0 < radius <= 1.0):
            raise ValueError(f"radius must be in (0,1], got {radius}")
        if attr_dim < 1 or latent_dim < 1:
            raise ValueError("attr_dim and latent_dim must be >= 1")
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        for name, shape in param_shapes(attr_dim, latent_dim).items():
            if name.endswith("_w"):
                fan_in, fan_out = shape[-1], shape[-2]
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                params[name] = rng.uniform(-limit, limit, size=shape)
            elif "gamma" in name:
                params[name] = np.ones(shape)
            else:
                params[name] = np.zeros(shape)
        bn_stats = {name: (np.ones(shape) if name.endswith("_var") else np.zeros(shape))
                    for name, shape in bn_stat_shapes(attr_dim, latent_dim).items()}
        return cls(radius=float(radius), attr_dim=int(attr_dim),
                   latent_dim=int(latent_dim), rng_seed=int(seed),
                   params=params, bn_stats=bn_stats)

    def copy(self) -> "AutoencoderModel":
        return AutoencoderModel(
            radius=self.radius, attr_dim=self.attr_dim, latent_dim=self.latent_dim,
            rng_seed=self.rng_seed,
            params={k: v.copy() for k, v in self.params.items()},
            bn_stats={k: v.copy() for k, v in self.bn_stats.items()})

    def snap_float32(self) -> None:
        """Round every parameter and stat to its float32 value (still stored
        as float64), so the file format is lossless for this model."""
        for store in (self.params, self.bn_stats):
            for k, v in store.items():
                store[k] = v.astype(np.float32).astype(np.float64)

    def digest(self) -> bytes:
        return hashlib.sha256(serialize_model(self)).digest()

    def validate(self) -> None:
        shapes = param_shapes(self.attr_dim, self.latent_dim)
        for name, shape in shapes.items():
            arr = self.params.get(name)
            if arr is None or arr.shape != shape:
                raise ValueError(f"parameter {name} has shape "
                                 f"{None if arr is None else arr.shape}, expected {shape}")
            if not np.isfinite(arr).all():
                raise ValueError(f"non-finite values in {name}")
        for name, shape in bn_stat_shapes(self.attr_dim, self.latent_dim).items():
            arr = self.bn_stats.get(name)
            if arr is None or arr.shape != shape:
                raise ValueError(f"stat {name} has shape "
                                 f"{None if arr is None else arr.shape}, expected {shape}")
            if not np.isfinite(arr).all():
                raise ValueError(f"non-finite values in {name}")
            if name.endswith("_var") and (arr < 0).any():
                raise ValueError(f"negative running variance in {name}")


def serialize_model(model: AutoencoderModel) -> bytes:
    parts = [MODEL_MAGIC,
             struct.pack("<III", MODEL_VERSION, model.attr_dim, model.latent_dim),
             struct.pack("<d", model.radius),
             struct.pack("<Q", model.rng_seed & 0xFFFFFFFFFFFFFFFF)]
    for name in param_shapes(model.attr_dim, model.latent_dim):
        block = np.ascontiguousarray(model.params[name], dtype="<f4")
        parts.append(struct.pack("<I", block.size))
        parts.append(block.tobytes())
    for name in bn_stat_shapes(model.attr_dim, model.latent_dim):
        block = np.ascontiguousarray(model.bn_stats[name], dtype="<f4")
        parts.append(struct.pack("<I", block.size))
        parts.append(block.tobytes())
    return b"".join(parts)


def save_model(model: AutoencoderModel, path) -> None:
    atomic_write_bytes(path, serialize_model(model))


def deserialize_model(data: bytes, path: str | None = None) -> AutoencoderModel:
    def need(offset: int, count: int, what: str) -> None:
        if offset + count > len(data):
            raise LoadError(f"truncated model file while reading {what}",
                            path=path, byte_offset=len(data))

    if len(data) < 4 or data[:4] != MODEL_MAGIC:
        raise LoadError("bad magic, not a model file", path=path, byte_offset=0)
    need(4, 12 + 8 + 8, "header")
    version, d, v = struct.unpack_from("<III", data, 4)
    if version != MODEL_VERSION:
        raise LoadError(f"unsupported model version {version}", path=path, byte_offset=4)
    if d < 1 or v < 1:
        raise LoadError(f"invalid header dims d={d} v={v}", path=path, byte_offset=8)
    (radius,) = struct.unpack_from("<d", data, 16)
    (seed,) = struct.unpack_from("<Q", data, 24)
    off = 32
    params: dict[str, np.ndarray] = {}
    bn_stats: dict[str, np.ndarray] = {}
    blocks = list(param_shapes(d, v).items()) + list(bn_stat_shapes(d, v).items())
    for name, shape in blocks:
        need(off, 4, f"{name} size")
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        expected = int(np.prod(shape))
        if count != expected:
            raise LoadError(f"block {name} holds {count} values, expected {expected}",
                            path=path, byte_offset=off - 4)
        need(off, count * 4, name)
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off)
        off += count * 4
        target = params if name in param_shapes(d, v) else bn_stats
        target[name] = arr.astype(np.float64).reshape(shape)
    if off != len(data):
        raise LoadError("trailing bytes after parameter blocks", path=path, byte_offset=off)
    model = AutoencoderModel(radius=float(radius), attr_dim=int(d), latent_dim=int(v),
                             rng_seed=int(seed), params=params, bn_stats=bn_stats)
    try:
        model.validate()
    except ValueError as exc:
        raise LoadError(str(exc), path=path) from exc
    return model


def load_model(path) -> AutoencoderModel:
    from pathlib import Path
    p = Path(path)
    try:
        data = p.read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read model file: {exc}", path=str(p)) from exc
    return deserialize_model(data, path=str(p))


# ---------------------------------------------------------------------------
# latent fields


@dataclass
class LatentField:
    frame_id: int
    latents: np.ndarray   # (N,v) float32
    model_hash: bytes     # 32-byte digest of the producing model

    @property
    def n(self) -> int:
        return self.latents.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.latents.shape[1]


def serialize_latents(field: LatentField) -> bytes:
    lat = np.ascontiguousarray(field.latents, dtype="<f4")
    if len(field.model_hash) != 32:
        raise ValueError("model_hash must be 32 bytes")
    return b"".join([LATENT_MAGIC,
                     struct.pack("<II", lat.shape[0], lat.shape[1]),
                     field.model_hash,
                     lat.tobytes()])


def save_latents(field: LatentField, path) -> None:
    atomic_write_bytes(path, serialize_latents(field))


def load_latents(path, frame_id: int = 0) -> LatentField:
    from pathlib import Path
    p = Path(path)
    try:
        data = p.read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read latent file: {exc}", path=str(p)) from exc
    if len(data) < 4 or data[:4] != LATENT_MAGIC:
        raise LoadError("bad magic, not a latent file", path=str(p), byte_offset=0)
    if len(data) < 44:
        raise LoadError("truncated latent header", path=str(p), byte_offset=len(data))
    n, v = struct.unpack_from("<II", data, 4)
    digest = data[12:44]
    expected = 44 + n * v * 4
    if len(data) != expected:
        raise LoadError(f"latent payload is {len(data) - 44} bytes, expected {n * v * 4}",
                        path=str(p), byte_offset=min(len(data), expected))
    lat = np.frombuffer(data, dtype="<f4", count=n * v, offset=44).reshape(n, v).copy()
    if not np.isfinite(lat).all():
        raise LoadError("non-finite latent values", path=str(p))
    return LatentField(frame_id=frame_id, latents=lat, model_hash=digest)
