import numpy as np
import pytest

from diffid.schedules import make_schedule
from diffid.seeding import derive_rng
from diffid.toydata import render_sprite, sprite_identity_params

IMAGE_SHAPE = (3, 32, 16)


def sprite_world(n_identities=3, images_per_identity=6, seed=0, image_shape=IMAGE_SHAPE):
    """In-memory sprite identities: {label: [images]}."""
    world = {}
    for i in range(n_identities):
        label = f"id{i:03d}"
        params = sprite_identity_params(derive_rng(seed, "sprite-identity", label))
        world[label] = [render_sprite(params, derive_rng(seed, "sprite-image", label, k),
                                      image_shape)
                        for k in range(images_per_identity)]
    return world


@pytest.fixture(scope="session")
def world3():
    return sprite_world(3, 6, seed=0)


@pytest.fixture(scope="session")
def schedule10():
    return make_schedule(10, "cosine")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
