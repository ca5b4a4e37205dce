"""Training loop, latent inference, and reconstruction quality metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import TrainingDivergedError
from .frames import ParticleFrame, SampleSet, value_based_sample
from .geoconv import (LOSS_MODES, PackedBatch, apply_bn_updates, backward_batch,
                      encode_batch, forward_batch, pack_centers)
from .model import AutoencoderModel, LatentField
from .util import child_seeds

# separate child-seed streams per purpose; a shared user seed stays one knob
_SALT_INIT = 0
_SALT_SAMPLING = 2
_SALT_SHUFFLE = 3
_SALT_SEARCH = 5


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    sample_fraction: float = 0.01
    loss_mode: str = "attributes_only"
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0.0 < self.sample_fraction <= 1.0):
            raise ValueError(f"sample_fraction must be in (0,1], got {self.sample_fraction}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")


class Adam:
    """Adam over a dict of parameter arrays, updated in fixed key order."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name in params:
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[name] / c1
            v_hat = self.v[name] / c2
            params[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class _CenterRows:
    """Pre-extracted member rows of one training patch (fixed across epochs)."""
    rel: np.ndarray
    offsets: np.ndarray
    attrs: np.ndarray
    kernel: np.ndarray
    w6_enc: np.ndarray
    w6_dec: np.ndarray
    members: np.ndarray


def _split_rows(batch: PackedBatch) -> list[_CenterRows]:
    out = []
    for i in range(batch.n_patches):
        a = int(batch.starts[i])
        b = a + int(batch.counts[i])
        out.append(_CenterRows(rel=batch.rel[a:b], offsets=batch.offsets[a:b],
                               attrs=batch.attrs[a:b], kernel=batch.kernel[a:b],
                               w6_enc=batch.w6_enc[a:b], w6_dec=batch.w6_dec[a:b],
                               members=batch.members[a:b]))
    return out


def _assemble(rows: list[_CenterRows]) -> PackedBatch:
    counts = np.array([r.rel.shape[0] for r in rows], dtype=np.int64)
    starts = np.zeros(counts.shape[0], dtype=np.int64)
    np.cumsum(counts[:-1], out=starts[1:])
    return PackedBatch(
        counts=counts, starts=starts,
        members=np.concatenate([r.members for r in rows]),
        rel=np.concatenate([r.rel for r in rows]),
        offsets=np.concatenate([r.offsets for r in rows]),
        attrs=np.concatenate([r.attrs for r in rows]),
        kernel=np.concatenate([r.kernel for r in rows]),
        w6_enc=np.concatenate([r.w6_enc for r in rows]),
        w6_dec=np.concatenate([r.w6_dec for r in rows]))


def train(frames: list[ParticleFrame], config: TrainConfig, radius: float,
          latent_dim: int, progress=None) -> AutoencoderModel:
    """Fit the autoencoder on value-based samples of the given frames.

    One epoch covers every sampled patch center once, in shuffled
    mini-batches. Samples are drawn once per frame up front; the patches
    they induce are fixed, so their member rows are extracted a single time.
    ``progress(epoch, mean_loss)`` is called after each epoch. A non-finite
    loss aborts with the last completed epoch's model as checkpoint.
    Deterministic for a fixed seed under single-worker execution.
    """
    if not frames:
        raise ValueError("need at least one frame")
    config.validate()
    d = frames[0].attr_dim
    for f in frames:
        if f.attr_dim != d:
            raise ValueError("frames disagree on attribute dimension")

    init_seed = child_seeds(config.seed, 1, salt=_SALT_INIT)[0]
    model = AutoencoderModel.initialize(radius, d, latent_dim, seed=init_seed)
    sample_seeds = child_seeds(config.seed, len(frames), salt=_SALT_SAMPLING)
    rows: list[_CenterRows] = []
    for frame, s in zip(frames, sample_seeds):
        sample = value_based_sample(frame, config.sample_fraction, s)
        rows.extend(_split_rows(pack_centers(frame, sample.indices, radius)))

    shuffle_rng = np.random.default_rng(child_seeds(config.seed, 1, salt=_SALT_SHUFFLE)[0])
    adam = Adam(model.params, lr=config.learning_rate)
    checkpoint = model.copy()
    checkpoint.snap_float32()

    n = len(rows)
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        for lo in range(0, n, config.batch_size):
            batch = _assemble([rows[i] for i in order[lo:lo + config.batch_size]])
            cache = forward_batch(model, batch, mode=config.loss_mode, training=True)
            if not math.isfinite(cache.loss):
                raise TrainingDivergedError(
                    f"non-finite loss in epoch {epoch}", checkpoint=checkpoint, epoch=epoch)
            grads = backward_batch(model, cache)
            apply_bn_updates(model, cache)
            adam.step(model.params, grads)
            loss_sum += cache.loss * batch.n_patches
        mean_loss = loss_sum / n
        if progress is not None:
            progress(epoch, mean_loss)
        checkpoint = model.copy()
        checkpoint.snap_float32()

    model.snap_float32()
    return model


# ---------------------------------------------------------------------------
# inference and evaluation


def encode_particles(model: AutoencoderModel, frame: ParticleFrame, indices,
                     workers: int = 1, chunk: int = 2048) -> np.ndarray:
    """Latent vectors (float64) for the patches centered on ``indices``."""
    indices = np.asarray(indices, dtype=np.int64)
    out = np.empty((indices.size, model.latent_dim))
    for lo in range(0, indices.size, chunk):
        sel = indices[lo:lo + chunk]
        enc = encode_batch(model, pack_centers(frame, sel, model.radius, workers=workers))
        out[lo:lo + chunk] = enc.lat
    return out


def infer_latents(model: AutoencoderModel, frame: ParticleFrame,
                  workers: int = 1, chunk: int = 2048) -> LatentField:
    """Latent field for every particle of the frame (inference-mode norms).

    Every patch contains its own center with positive kernel weight, so no
    particle can come up empty.
    """
    lat = encode_particles(model, frame, np.arange(frame.n), workers=workers, chunk=chunk)
    if not np.isfinite(lat).all():
        raise ValueError("non-finite latents produced; model is unhealthy")
    return LatentField(frame_id=frame.frame_id, latents=lat.astype(np.float32),
                       model_hash=model.digest())


def psnr_from_mse(mse: float) -> float:
    """PSNR in dB against peak value 1; zero error maps to +infinity."""
    if mse <= 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def psnr(model: AutoencoderModel, frame: ParticleFrame,
         sample: SampleSet | None = None, workers: int = 1,
         chunk: int = 2048) -> float:
    """Reconstruction PSNR over the attribute channels of sampled patches.

    The mean squared error pools every (member, attribute channel) pair of
    every evaluated patch; peak value is 1 (normalized attributes).
    """
    indices = sample.indices if sample is not None else np.arange(frame.n)
    indices = np.asarray(indices, dtype=np.int64)
    sse = 0.0
    count = 0
    for lo in range(0, indices.size, chunk):
        batch = pack_centers(frame, indices[lo:lo + chunk], model.radius, workers=workers)
        cache = forward_batch(model, batch, mode="attributes_only", training=False)
        diff = cache.dec.y[:, 3:] - batch.attrs
        sse += float(np.sum(diff * diff))
        count += diff.size
    return psnr_from_mse(sse / count)


# ---------------------------------------------------------------------------
# latent-dimension random search


@dataclass
class LatentDimSearchResult:
    best_dim: int
    table: list[tuple[int, float]]        # (latent_dim, psnr), psnr descending
    skipped: list[tuple[int, str]]        # (latent_dim, reason)


def _patch_input_dim(frame: ParticleFrame, radius: float, seed: int) -> int:
    """Median patch member count times channels per member, capped to [2, 64]."""
    rng = np.random.default_rng(seed)
    probe = rng.choice(frame.n, size=min(64, frame.n), replace=False)
    counts = [len(frame.index.query_ball_point(frame.positions[int(i)], radius))
              for i in probe]
    dim = int(np.median(counts)) * (3 + frame.attr_dim)
    return max(2, min(64, dim))


def random_search_latent_dim(frames: list[ParticleFrame], radius: float,
                             candidate_budget: int, epoch_budget: int,
                             seed: int = 0, base_config: TrainConfig | None = None,
                             progress=None) -> LatentDimSearchResult:
    """Uniform random search of the latent dimension under a fixed epoch budget.

    Candidates are drawn without replacement from {2..min(64, patch input
    dimensionality)}; each trains for ``epoch_budget`` epochs and is scored
    by PSNR on a fixed evaluation sample of the first frame. Candidates whose
    training diverges are recorded and skipped.
    """
    if candidate_budget < 1:
        raise ValueError(f"candidate budget must be >= 1, got {candidate_budget}")
    if not frames:
        raise ValueError("need at least one frame")
    base = base_config if base_config is not None else TrainConfig()
    seeds = child_seeds(seed, candidate_budget + 3, salt=_SALT_SEARCH)
    hi = _patch_input_dim(frames[0], radius, seeds[0])
    pool = np.arange(2, hi + 1)
    rng = np.random.default_rng(seeds[1])
    n_cand = min(candidate_budget, pool.size)
    candidates = rng.choice(pool, size=n_cand, replace=False)
    eval_sample = value_based_sample(frames[0], base.sample_fraction, seeds[2])

    table: list[tuple[int, float]] = []
    skipped: list[tuple[int, str]] = []
    for i, v in enumerate(candidates):
        v = int(v)
        cfg = replace(base, epochs=epoch_budget, seed=seeds[3 + i])
        try:
            m = train(frames, cfg, radius, v)
        except TrainingDivergedError as exc:
            skipped.append((v, str(exc)))
            continue
        score = psnr(m, frames[0], eval_sample)
        table.append((v, score))
        if progress is not None:
            progress(v, score)
    if not table:
        raise TrainingDivergedError("every latent-dim candidate diverged")
    table.sort(key=lambda t: (-t[1], t[0]))
    return LatentDimSearchResult(best_dim=table[0][0], table=table, skipped=skipped)
