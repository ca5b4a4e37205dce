"""Direction-aware convolution over particle patches: forward and backward.

The encoder aggregates each member's attributes through six axis-aligned
directed bases (+z,-z,+y,-y,+x,-x): a member at offset u from the center
contributes to basis b with weight max(cos(u,b),0)^2, so only bases in the
member's hemisphere participate and the weights always sum to 1. A member
sitting exactly on the center has no direction and uses the uniform 1/6
rule. Per-member features then pass a shared 64->256 linear layer, batch
norm, and ReLU, and the patch is collapsed to one 256-vector by a mean
weighted with the distance kernel (r - dist)^2. The decoder mirrors this
with reversed directions (center-to-member becomes member-to-center) and
ends in a sigmoid over (3+d) channels.

All math is float64 with a fixed member order (ascending particle index),
so runs are bit-reproducible. Batch-norm semantics: in training mode the
statistics are taken over all rows of the current call (member rows for
the two 256-channel norms, patch rows for the latent norm); a call with
fewer than 2 rows falls back to the running statistics, as does inference.
The forward pass never mutates the model; running-stat updates are applied
separately by the training loop via apply_bn_updates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import EmptyPatchError
from .frames import ParticleFrame, Patch, patch_geometry
from .model import (BN_EPS, BN_MOMENTUM, DIR_CH, HIDDEN_CH, AutoencoderModel)

BASES = np.array([
    [0.0, 0.0, 1.0],
    [0.0, 0.0, -1.0],
    [0.0, 1.0, 0.0],
    [0.0, -1.0, 0.0],
    [1.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0],
])

# column permutation that swaps each basis with its opposite-direction partner
_FLIP = np.array([1, 0, 3, 2, 5, 4])

LOSS_MODES = ("attributes_only", "attributes_and_positions")


def dir_weights(u) -> np.ndarray:
    """Directional weights of one nonzero offset vector against the six bases."""
    u = np.asarray(u, dtype=np.float64).reshape(3)
    norm = float(np.sqrt(u @ u))
    if norm == 0.0:
        raise ValueError("zero direction vector; callers must apply the 1/6 center rule")
    cos = (u / norm) @ BASES.T
    return np.maximum(cos, 0.0) ** 2


def dir_weight_matrix(offsets: np.ndarray) -> np.ndarray:
    """Per-row directional weights (M,6); zero-offset rows get the 1/6 center rule."""
    offsets = np.asarray(offsets, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", offsets, offsets))
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    cos = (offsets / safe[:, None]) @ BASES.T
    w = np.maximum(cos, 0.0) ** 2
    w[zero] = 1.0 / 6.0
    return w


# ---------------------------------------------------------------------------
# packing patches into flat batch arrays


@dataclass
class PackedBatch:
    """Concatenated member rows of one or more non-empty patches."""

    counts: np.ndarray    # (m,) members per patch
    starts: np.ndarray    # (m,) row offset of each patch
    members: np.ndarray   # (M,) particle indices (ascending within a patch)
    rel: np.ndarray       # (M,3) member positions in the 2r box
    offsets: np.ndarray   # (M,3) rel - 0.5
    attrs: np.ndarray     # (M,d)
    kernel: np.ndarray    # (M,) distance-kernel weights
    w6_enc: np.ndarray    # (M,6) center-to-member directional weights
    w6_dec: np.ndarray    # (M,6) member-to-center (reversed) weights

    @property
    def n_patches(self) -> int:
        return self.counts.shape[0]

    @property
    def n_rows(self) -> int:
        return self.rel.shape[0]


def _finish_pack(counts, members, rel, offsets, attrs, kernel) -> PackedBatch:
    starts = np.zeros(counts.shape[0], dtype=np.int64)
    np.cumsum(counts[:-1], out=starts[1:])
    w6_enc = dir_weight_matrix(offsets)
    return PackedBatch(counts=counts, starts=starts, members=members, rel=rel,
                       offsets=offsets, attrs=attrs, kernel=kernel,
                       w6_enc=w6_enc, w6_dec=w6_enc[:, _FLIP])


def pack_patches(patches: list[Patch]) -> PackedBatch:
    if not patches:
        raise ValueError("empty batch")
    for p in patches:
        if p.is_empty:
            raise EmptyPatchError("cannot pack an empty patch")
    counts = np.array([p.n for p in patches], dtype=np.int64)
    members = np.concatenate([p.member_indices for p in patches])
    rel = np.concatenate([p.rel_positions for p in patches])
    offsets = rel - 0.5
    attrs = np.concatenate([p.member_attributes for p in patches])
    kernel = np.concatenate([p.kernel for p in patches])
    return _finish_pack(counts, members, rel, offsets, attrs, kernel)


def pack_centers(frame: ParticleFrame, indices, radius: float,
                 workers: int = 1) -> PackedBatch:
    """Pack the patches centered on the given particle indices in one query.

    Produces bit-identical rows to packing individual query_patch results:
    same member order, same geometry helper.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ValueError("empty center list")
    centers = frame.positions[indices]
    hits = frame.index.query_ball_point(centers, radius, workers=workers)
    lists = [np.sort(np.asarray(h, dtype=np.int64)) for h in hits]
    counts = np.array([l.size for l in lists], dtype=np.int64)
    if (counts == 0).any():
        raise EmptyPatchError("a queried patch is empty")  # cannot happen for particle centers
    members = np.concatenate(lists)
    centers_rep = np.repeat(centers, counts, axis=0)
    rel, offsets, _, kernel = patch_geometry(frame.positions[members], centers_rep, radius)
    return _finish_pack(counts, members, rel, offsets, frame.attributes[members], kernel)


# ---------------------------------------------------------------------------
# batch norm


@dataclass
class BnCache:
    mode: str             # "batch" or "running"
    x_hat: np.ndarray
    inv_std: np.ndarray
    batch_mean: np.ndarray
    batch_var: np.ndarray
    rows: int


def _bn_forward(x, gamma, beta, run_mean, run_var, training: bool):
    use_batch = training and x.shape[0] >= 2
    if use_batch:
        mean = x.mean(axis=0)
        var = x.var(axis=0)
    else:
        mean = run_mean
        var = run_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    x_hat = (x - mean) * inv_std
    out = gamma * x_hat + beta
    return out, BnCache("batch" if use_batch else "running", x_hat, inv_std,
                        mean, var, x.shape[0])


def _bn_backward(dout, cache: BnCache, gamma):
    dgamma = (dout * cache.x_hat).sum(axis=0)
    dbeta = dout.sum(axis=0)
    dxh = dout * gamma
    if cache.mode == "batch":
        m = cache.rows
        dx = (cache.inv_std / m) * (
            m * dxh - dxh.sum(axis=0) - cache.x_hat * (dxh * cache.x_hat).sum(axis=0))
    else:
        dx = dxh * cache.inv_std
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# forward


@dataclass
class EncodeCache:
    e: np.ndarray        # (M,64) directional stage
    s: np.ndarray        # (M,256) pre-norm
    bn1: BnCache
    h: np.ndarray        # (M,256) post-ReLU
    omega: np.ndarray    # (M,) normalized kernel weights
    z: np.ndarray        # (m,256) patch aggregates
    t: np.ndarray        # (m,v) pre-norm latents
    bn2: BnCache
    lat: np.ndarray      # (m,v)


@dataclass
class DecodeCache:
    lat_rep: np.ndarray  # (M,v) latent repeated per member
    u: np.ndarray        # (M,256) directional stage
    bnd: BnCache
    a: np.ndarray        # (M,256) post-ReLU
    y: np.ndarray        # (M,3+d) sigmoid outputs


@dataclass
class ForwardCache:
    batch: PackedBatch
    mode: str
    enc: EncodeCache
    dec: DecodeCache
    loss: float
    dLdy: np.ndarray


def _check_dims(model: AutoencoderModel, batch: PackedBatch) -> None:
    if batch.attrs.shape[1] != model.attr_dim:
        raise ValueError(f"attribute dimension mismatch: frame has "
                         f"{batch.attrs.shape[1]}, model expects {model.attr_dim}")


def encode_batch(model: AutoencoderModel, batch: PackedBatch,
                 training: bool = False) -> EncodeCache:
    _check_dims(model, batch)
    P = model.params
    S = model.bn_stats
    x = batch.attrs
    e = np.zeros((batch.n_rows, DIR_CH))
    for b in range(6):
        e += batch.w6_enc[:, b:b + 1] * (x @ P["enc_dir_w"][b].T + P["enc_dir_b"][b])
    s = e @ P["enc_fc1_w"].T + P["enc_fc1_b"]
    o1, bn1 = _bn_forward(s, P["enc_bn1_gamma"], P["enc_bn1_beta"],
                          S["enc_bn1_mean"], S["enc_bn1_var"], training)
    h = np.maximum(o1, 0.0)
    ksum = np.add.reduceat(batch.kernel, batch.starts)
    if (ksum <= 0.0).any():
        raise ValueError("patch with zero total kernel weight (all members on the boundary)")
    omega = batch.kernel / np.repeat(ksum, batch.counts)
    z = np.add.reduceat(omega[:, None] * h, batch.starts, axis=0)
    t = z @ P["enc_fc2_w"].T + P["enc_fc2_b"]
    lat, bn2 = _bn_forward(t, P["enc_bn2_gamma"], P["enc_bn2_beta"],
                           S["enc_bn2_mean"], S["enc_bn2_var"], training)
    return EncodeCache(e=e, s=s, bn1=bn1, h=h, omega=omega, z=z, t=t, bn2=bn2, lat=lat)


def decode_batch(model: AutoencoderModel, lat: np.ndarray, batch: PackedBatch,
                 training: bool = False) -> DecodeCache:
    _check_dims(model, batch)
    P = model.params
    S = model.bn_stats
    lat_rep = np.repeat(lat, batch.counts, axis=0)
    u = np.zeros((batch.n_rows, HIDDEN_CH))
    for b in range(6):
        u += batch.w6_dec[:, b:b + 1] * (lat_rep @ P["dec_dir_w"][b].T + P["dec_dir_b"][b])
    od, bnd = _bn_forward(u, P["dec_bn_gamma"], P["dec_bn_beta"],
                          S["dec_bn_mean"], S["dec_bn_var"], training)
    a = np.maximum(od, 0.0)
    y = expit(a @ P["dec_fc_w"].T + P["dec_fc_b"])
    return DecodeCache(lat_rep=lat_rep, u=u, bnd=bnd, a=a, y=y)


def _loss_and_grad(y: np.ndarray, batch: PackedBatch, mode: str):
    if mode not in LOSS_MODES:
        raise ValueError(f"unknown loss mode {mode!r}")
    m = batch.n_patches
    if mode == "attributes_only":
        targets = batch.attrs
        cols = slice(3, None)
        chans = batch.attrs.shape[1]
    else:
        targets = np.hstack([batch.rel, batch.attrs])
        cols = slice(None)
        chans = 3 + batch.attrs.shape[1]
    diff = y[:, cols] - targets
    per_row = 1.0 / (np.repeat(batch.counts, batch.counts).astype(np.float64) * chans * m)
    loss = float(np.sum(diff * diff * per_row[:, None]))
    dy = np.zeros_like(y)
    dy[:, cols] = 2.0 * diff * per_row[:, None]
    return loss, dy


def forward_batch(model: AutoencoderModel, batch: PackedBatch,
                  mode: str = "attributes_only", training: bool = False) -> ForwardCache:
    """Full autoencoder pass over a packed batch; loss is the mean over
    patches of each patch's per-member, per-channel mean squared error."""
    enc = encode_batch(model, batch, training=training)
    dec = decode_batch(model, enc.lat, batch, training=training)
    loss, dy = _loss_and_grad(dec.y, batch, mode)
    return ForwardCache(batch=batch, mode=mode, enc=enc, dec=dec, loss=loss, dLdy=dy)


def backward_batch(model: AutoencoderModel, cache: ForwardCache) -> dict[str, np.ndarray]:
    """Analytic gradients of cache.loss for every learnable parameter."""
    P = model.params
    batch = cache.batch
    enc, dec = cache.enc, cache.dec
    grads: dict[str, np.ndarray] = {}

    dlogits = cache.dLdy * dec.y * (1.0 - dec.y)
    grads["dec_fc_w"] = dlogits.T @ dec.a
    grads["dec_fc_b"] = dlogits.sum(axis=0)
    da = dlogits @ P["dec_fc_w"]
    da *= dec.a > 0.0
    du, dg, db = _bn_backward(da, dec.bnd, P["dec_bn_gamma"])
    grads["dec_bn_gamma"] = dg
    grads["dec_bn_beta"] = db

    grads["dec_dir_w"] = np.zeros_like(P["dec_dir_w"])
    grads["dec_dir_b"] = np.zeros_like(P["dec_dir_b"])
    dlat_rep = np.zeros_like(dec.lat_rep)
    for b in range(6):
        scaled = du * batch.w6_dec[:, b:b + 1]
        grads["dec_dir_w"][b] = scaled.T @ dec.lat_rep
        grads["dec_dir_b"][b] = scaled.sum(axis=0)
        dlat_rep += scaled @ P["dec_dir_w"][b]
    dlat = np.add.reduceat(dlat_rep, batch.starts, axis=0)

    dt, dg2, db2 = _bn_backward(dlat, enc.bn2, P["enc_bn2_gamma"])
    grads["enc_bn2_gamma"] = dg2
    grads["enc_bn2_beta"] = db2
    grads["enc_fc2_w"] = dt.T @ enc.z
    grads["enc_fc2_b"] = dt.sum(axis=0)
    dz = dt @ P["enc_fc2_w"]

    dh = np.repeat(dz, batch.counts, axis=0) * enc.omega[:, None]
    dh *= enc.h > 0.0
    ds, dg1, db1 = _bn_backward(dh, enc.bn1, P["enc_bn1_gamma"])
    grads["enc_bn1_gamma"] = dg1
    grads["enc_bn1_beta"] = db1
    grads["enc_fc1_w"] = ds.T @ enc.e
    grads["enc_fc1_b"] = ds.sum(axis=0)
    de = ds @ P["enc_fc1_w"]

    grads["enc_dir_w"] = np.zeros_like(P["enc_dir_w"])
    grads["enc_dir_b"] = np.zeros_like(P["enc_dir_b"])
    for b in range(6):
        scaled = de * batch.w6_enc[:, b:b + 1]
        grads["enc_dir_w"][b] = scaled.T @ batch.attrs
        grads["enc_dir_b"][b] = scaled.sum(axis=0)
    return grads


def apply_bn_updates(model: AutoencoderModel, cache: ForwardCache) -> None:
    """Fold the batch statistics of a training forward pass into the running
    stats: running = 0.9*running + 0.1*batch (variance unbiased)."""
    S = model.bn_stats
    for prefix, bn in (("enc_bn1", cache.enc.bn1), ("enc_bn2", cache.enc.bn2),
                       ("dec_bn", cache.dec.bnd)):
        if bn.mode != "batch":
            continue
        unbias = bn.rows / (bn.rows - 1) if bn.rows > 1 else 1.0
        S[prefix + "_mean"] = (BN_MOMENTUM * S[prefix + "_mean"]
                               + (1.0 - BN_MOMENTUM) * bn.batch_mean)
        S[prefix + "_var"] = (BN_MOMENTUM * S[prefix + "_var"]
                              + (1.0 - BN_MOMENTUM) * bn.batch_var * unbias)


# ---------------------------------------------------------------------------
# single-patch convenience ops


def geoconv_forward(model: AutoencoderModel, patch: Patch,
                    training: bool = False) -> tuple[np.ndarray, EncodeCache]:
    """Encoder aggregate of one patch: the kernel-weighted mean 256-vector.

    The returned cache also carries the latent (post enc_fc2 + norm), which
    callers inferring latents use directly.
    """
    if patch.is_empty:
        raise EmptyPatchError("cannot encode an empty patch")
    cache = encode_batch(model, pack_patches([patch]), training=training)
    return cache.z[0], cache


def geodeconv_forward(model: AutoencoderModel, latent, patch: Patch,
                      training: bool = False) -> np.ndarray:
    """Decode one latent vector onto a patch: per-member (3+d) sigmoid outputs."""
    if patch.is_empty:
        raise EmptyPatchError("cannot decode onto an empty patch")
    latent = np.asarray(latent, dtype=np.float64).reshape(1, model.latent_dim)
    dec = decode_batch(model, latent, pack_patches([patch]), training=training)
    return dec.y


def reconstruction_loss(recon: np.ndarray, patch: Patch,
                        mode: str = "attributes_only") -> float:
    """Mean squared error of one patch's reconstruction against its members."""
    if mode not in LOSS_MODES:
        raise ValueError(f"unknown loss mode {mode!r}")
    recon = np.asarray(recon, dtype=np.float64)
    expected = (patch.n, 3 + patch.member_attributes.shape[1])
    if recon.shape != expected:
        raise ValueError(f"reconstruction shape {recon.shape}, expected {expected}")
    if mode == "attributes_only":
        diff = recon[:, 3:] - patch.member_attributes
    else:
        diff = recon - np.hstack([patch.rel_positions, patch.member_attributes])
    return float(np.mean(diff * diff))
