"""Model and latent-field binary persistence."""

import numpy as np
import pytest

from partlat.errors import LoadError
from partlat.geoconv import forward_batch, pack_centers
from partlat.model import (
    AutoencoderModel,
    LatentField,
    deserialize_model,
    load_latents,
    load_model,
    param_shapes,
    save_latents,
    save_model,
    serialize_model,
)

from conftest import random_frame


def test_initialize_shapes_and_determinism():
    m1 = AutoencoderModel.initialize(0.2, 3, 8, seed=42)
    m2 = AutoencoderModel.initialize(0.2, 3, 8, seed=42)
    m3 = AutoencoderModel.initialize(0.2, 3, 8, seed=43)
    for name, shape in param_shapes(3, 8).items():
        assert m1.params[name].shape == shape
        assert np.array_equal(m1.params[name], m2.params[name])
    assert not np.array_equal(m1.params["enc_fc1_w"], m3.params["enc_fc1_w"])
    assert np.array_equal(m1.params["enc_bn1_gamma"], np.ones(256))
    assert np.array_equal(m1.params["enc_fc1_b"], np.zeros(256))
    assert np.array_equal(m1.bn_stats["dec_bn_var"], np.ones(256))
    m1.validate()


def test_initialize_validation():
    with pytest.raises(ValueError, match="radius"):
        AutoencoderModel.initialize(0.0, 1, 4)
    with pytest.raises(ValueError, match=">= 1"):
        AutoencoderModel.initialize(0.2, 0, 4)


def test_save_load_round_trip_bit_exact(tmp_path, rng):
    model = AutoencoderModel.initialize(0.17, 2, 6, seed=9)
    # perturb so values are not symmetric around zero
    model.params["enc_fc1_b"] += rng.normal(size=256)
    model.bn_stats["enc_bn1_mean"] += 0.25
    model.snap_float32()
    path = tmp_path / "model.gae"
    save_model(model, path)
    back = load_model(path)
    assert back.radius == model.radius
    assert back.attr_dim == 2 and back.latent_dim == 6
    assert back.rng_seed == 9
    for name in model.params:
        assert np.array_equal(back.params[name], model.params[name]), name
    for name in model.bn_stats:
        assert np.array_equal(back.bn_stats[name], model.bn_stats[name]), name
    assert back.digest() == model.digest()
    # and the round-tripped model computes the identical forward pass
    frame = random_frame(rng, n=100, d=2)
    batch = pack_centers(frame, np.arange(5), 0.17)
    assert forward_batch(back, batch).loss == forward_batch(model, batch).loss


def test_snap_float32_is_idempotent():
    model = AutoencoderModel.initialize(0.3, 1, 4, seed=1)
    model.snap_float32()
    once = serialize_model(model)
    model.snap_float32()
    assert serialize_model(model) == once


def test_digest_tracks_content():
    a = AutoencoderModel.initialize(0.3, 1, 4, seed=1)
    b = AutoencoderModel.initialize(0.3, 1, 4, seed=1)
    assert a.digest() == b.digest()
    b.params["dec_fc_b"][0] = 1.0
    assert a.digest() != b.digest()


def test_huge_seed_survives_round_trip(tmp_path):
    model = AutoencoderModel.initialize(0.3, 1, 4, seed=2 ** 63 + 11)
    save_model(model, tmp_path / "m.gae")
    assert load_model(tmp_path / "m.gae").rng_seed == 2 ** 63 + 11


def test_model_load_errors(tmp_path):
    model = AutoencoderModel.initialize(0.3, 2, 4, seed=0)
    blob = serialize_model(model)

    with pytest.raises(LoadError, match="magic"):
        deserialize_model(b"NOPE" + blob[4:])
    with pytest.raises(LoadError, match="version"):
        deserialize_model(blob[:4] + b"\x09\x00\x00\x00" + blob[8:])
    with pytest.raises(LoadError, match="truncated"):
        deserialize_model(blob[:100])
    with pytest.raises(LoadError, match="trailing"):
        deserialize_model(blob + b"\x00\x00\x00\x00")

    # block size disagreeing with the header dims
    bad = bytearray(blob)
    bad[32:36] = (99).to_bytes(4, "little")
    with pytest.raises(LoadError, match="block"):
        deserialize_model(bytes(bad))

    # non-finite parameter payload fails validation on load
    nan_block = bytearray(blob)
    nan_block[36:40] = np.array([np.nan], "<f4").tobytes()
    with pytest.raises(LoadError, match="non-finite"):
        deserialize_model(bytes(nan_block))

    missing = tmp_path / "missing.gae"
    with pytest.raises(LoadError, match="cannot read"):
        load_model(missing)


# ---------------------------------------------------------------------------
# latent fields


def test_latents_round_trip(tmp_path, rng):
    lat = rng.normal(size=(40, 6)).astype(np.float32)
    field = LatentField(frame_id=3, latents=lat, model_hash=bytes(range(32)))
    p = tmp_path / "f3.lat1"
    save_latents(field, p)
    back = load_latents(p, frame_id=3)
    assert back.frame_id == 3
    assert back.n == 40 and back.latent_dim == 6
    assert back.model_hash == bytes(range(32))
    assert np.array_equal(back.latents, lat)


def test_latents_errors(tmp_path, rng):
    field = LatentField(frame_id=0, latents=np.zeros((4, 2), np.float32),
                        model_hash=bytes(32))
    p = tmp_path / "f.lat1"
    save_latents(field, p)
    blob = p.read_bytes()

    bad = tmp_path / "bad.lat1"
    bad.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(LoadError, match="magic"):
        load_latents(bad)
    bad.write_bytes(blob[:20])
    with pytest.raises(LoadError, match="truncated"):
        load_latents(bad)
    bad.write_bytes(blob[:-4])
    with pytest.raises(LoadError, match="payload"):
        load_latents(bad)
    nan_blob = bytearray(blob)
    nan_blob[-4:] = np.array([np.nan], "<f4").tobytes()
    bad.write_bytes(bytes(nan_blob))
    with pytest.raises(LoadError, match="non-finite"):
        load_latents(bad)

    with pytest.raises(ValueError, match="32 bytes"):
        save_latents(LatentField(0, np.zeros((1, 1), np.float32), b"short"),
                     tmp_path / "x.lat1")
