"""Training loop behavior: determinism, convergence, evaluation helpers."""

import math

import numpy as np
import pytest

from partlat.errors import TrainingDivergedError
from partlat.frames import value_based_sample
from partlat.model import serialize_model
from partlat.train import (
    Adam,
    LatentDimSearchResult,
    TrainConfig,
    encode_particles,
    infer_latents,
    psnr,
    psnr_from_mse,
    random_search_latent_dim,
    train,
)

from conftest import random_frame


def quick_config(**kw):
    base = dict(epochs=3, batch_size=16, learning_rate=1e-3,
                sample_fraction=0.3, seed=5)
    base.update(kw)
    return TrainConfig(**base)


def smooth_frame(rng, n=300, frame_id=0):
    """Positions plus an attribute that varies smoothly with position."""
    pos = rng.uniform(size=(n, 3))
    att = np.stack([np.sin(3.0 * pos[:, 0]) + 0.2 * pos[:, 1]], axis=1)
    from partlat.frames import ParticleFrame
    return ParticleFrame.from_raw(pos * 5.0, att, ["v"], frame_id=frame_id)


# ---------------------------------------------------------------------------
# config and optimizer


def test_config_validation():
    TrainConfig().validate()
    with pytest.raises(ValueError, match="epochs"):
        quick_config(epochs=0).validate()
    with pytest.raises(ValueError, match="batch_size"):
        quick_config(batch_size=0).validate()
    with pytest.raises(ValueError, match="learning_rate"):
        quick_config(learning_rate=0.0).validate()
    with pytest.raises(ValueError, match="sample_fraction"):
        quick_config(sample_fraction=1.5).validate()
    with pytest.raises(ValueError, match="loss_mode"):
        quick_config(loss_mode="nope").validate()


def test_adam_matches_scalar_reference():
    # one parameter, three steps, constant gradient
    p = {"w": np.array([1.0])}
    opt = Adam(p, lr=0.1)
    m = v = 0.0
    w = 1.0
    for t in range(1, 4):
        g = 2.0
        opt.step(p, {"w": np.array([g])})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        m_hat = m / (1 - 0.9 ** t)
        v_hat = v / (1 - 0.999 ** t)
        w -= 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
        assert p["w"][0] == pytest.approx(w, abs=1e-14)


# ---------------------------------------------------------------------------
# training loop


def test_train_is_bit_reproducible(rng):
    frame = smooth_frame(rng)
    cfg = quick_config()
    m1 = train([frame], cfg, 0.25, 4)
    m2 = train([frame], quick_config(), 0.25, 4)
    assert serialize_model(m1) == serialize_model(m2)
    m3 = train([frame], quick_config(seed=6), 0.25, 4)
    assert serialize_model(m3) != serialize_model(m1)


def test_train_reduces_loss(rng):
    frame = smooth_frame(rng)
    losses = []
    train([frame], quick_config(epochs=12), 0.25, 4,
          progress=lambda e, l: losses.append(l))
    assert len(losses) == 12
    assert losses[-1] < 0.5 * losses[0]
    assert all(math.isfinite(l) for l in losses)


def test_train_multi_frame_and_validation(rng):
    frames = [smooth_frame(rng, frame_id=i) for i in range(2)]
    model = train(frames, quick_config(epochs=1), 0.25, 3)
    assert model.latent_dim == 3
    assert model.radius == 0.25
    with pytest.raises(ValueError, match="at least one frame"):
        train([], quick_config(), 0.25, 4)
    with pytest.raises(ValueError, match="epochs"):
        train(frames, quick_config(epochs=0), 0.25, 4)
    bad = [smooth_frame(rng), random_frame(rng, n=60, d=2, frame_id=1)]
    with pytest.raises(ValueError, match="attribute dimension"):
        train(bad, quick_config(), 0.25, 4)


def test_train_divergence_carries_checkpoint(rng, monkeypatch):
    import types

    import partlat.train as train_mod

    frame = smooth_frame(rng, n=200)
    one_epoch = train([frame], quick_config(epochs=1), 0.25, 4)

    # 60 sampled centers / batch_size 16 = 4 batches per epoch; poison the
    # first forward of epoch 1 so the checkpoint must hold epoch 0's model
    real = train_mod.forward_batch
    calls = {"n": 0}

    def sabotaged(model, batch, mode="attributes_only", training=False):
        calls["n"] += 1
        if calls["n"] > 4:
            return types.SimpleNamespace(loss=float("nan"))
        return real(model, batch, mode=mode, training=training)

    monkeypatch.setattr(train_mod, "forward_batch", sabotaged)
    with pytest.raises(TrainingDivergedError) as ei:
        train_mod.train([frame], quick_config(epochs=5), 0.25, 4)
    err = ei.value
    assert err.epoch == 1
    err.checkpoint.validate()
    assert serialize_model(err.checkpoint) == serialize_model(one_epoch)


def test_trained_model_is_float32_snapped(rng):
    model = train([smooth_frame(rng)], quick_config(epochs=1), 0.25, 4)
    for arr in list(model.params.values()) + list(model.bn_stats.values()):
        assert np.array_equal(arr, arr.astype(np.float32).astype(np.float64))


# ---------------------------------------------------------------------------
# inference and metrics


def test_encode_particles_chunking_consistent(rng):
    frame = smooth_frame(rng, n=150)
    model = train([frame], quick_config(epochs=1), 0.25, 4)
    idx = np.arange(frame.n)
    whole = encode_particles(model, frame, idx, chunk=4096)
    pieces = encode_particles(model, frame, idx, chunk=37)
    assert np.array_equal(whole, pieces)


def test_infer_latents_field(rng):
    frame = smooth_frame(rng, n=150)
    model = train([frame], quick_config(epochs=1), 0.25, 4)
    field = infer_latents(model, frame)
    assert field.frame_id == frame.frame_id
    assert field.latents.shape == (150, 4)
    assert field.latents.dtype == np.float32
    assert field.model_hash == model.digest()
    again = infer_latents(model, frame)
    assert np.array_equal(field.latents, again.latents)


def test_psnr_properties(rng):
    assert psnr_from_mse(0.0) == math.inf
    assert psnr_from_mse(1.0) == 0.0
    assert psnr_from_mse(0.01) == pytest.approx(20.0)

    frame = smooth_frame(rng, n=150)
    m_short = train([frame], quick_config(epochs=1), 0.25, 4)
    m_long = train([frame], quick_config(epochs=25), 0.25, 4)
    assert psnr(m_long, frame) > psnr(m_short, frame)
    sample = value_based_sample(frame, 0.2, 0)
    sub = psnr(m_long, frame, sample)
    assert math.isfinite(sub) and sub > 0


# ---------------------------------------------------------------------------
# latent-dim search


def test_random_search_latent_dim(rng):
    frame = smooth_frame(rng, n=250)
    res = random_search_latent_dim([frame], 0.25, candidate_budget=3,
                                   epoch_budget=2, seed=1)
    assert isinstance(res, LatentDimSearchResult)
    assert 1 <= len(res.table) <= 3
    dims = [d for d, _ in res.table]
    assert len(set(dims)) == len(dims)
    assert all(2 <= d <= 64 for d in dims)
    scores = [s for _, s in res.table]
    assert scores == sorted(scores, reverse=True)
    assert res.best_dim == res.table[0][0]

    again = random_search_latent_dim([frame], 0.25, candidate_budget=3,
                                     epoch_budget=2, seed=1)
    assert again.table == res.table

    with pytest.raises(ValueError, match="candidate budget"):
        random_search_latent_dim([frame], 0.25, 0, 2)
    with pytest.raises(ValueError, match="at least one frame"):
        random_search_latent_dim([], 0.25, 2, 2)
