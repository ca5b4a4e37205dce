import numpy as np
import pytest

from partlat.frames import ParticleFrame


def random_frame(rng: np.random.Generator, n: int = 200, d: int = 2,
                 frame_id: int = 0) -> ParticleFrame:
    """Frame with uniform raw positions and attributes, normalized."""
    pos = rng.uniform(0.0, 10.0, size=(n, 3))
    att = rng.uniform(-5.0, 5.0, size=(n, d))
    return ParticleFrame.from_raw(pos, att,
                                  attr_names=[f"a{i}" for i in range(d)],
                                  frame_id=frame_id)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
