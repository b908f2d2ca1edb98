import numpy as np
import pytest

from diffid.backends import (
    BACKENDS,
    GenerationBackend,
    ToyDiffusionBackend,
    get_backend,
    register_backend,
)
from diffid.errors import BackendError
from diffid.prompts import build_prompts
from diffid.schedules import make_schedule

from conftest import sprite_world


@pytest.fixture(scope="module")
def backend():
    return ToyDiffusionBackend(image_shape=(3, 8, 4), cond_dim=8,
                               schedule=make_schedule(16, "cosine"), base_seed=3,
                               sample_steps=6)


def test_toy_backend_satisfies_contract(backend):
    assert isinstance(backend, GenerationBackend)


def test_fine_tune_then_sample_round_trip(backend):
    world = sprite_world(1, 4, seed=1, image_shape=(3, 8, 4))
    bundle = build_prompts("walking", "qzx")
    handle = backend.fine_tune(world["id000"], bundle, {
        "steps": 40, "learning_rate": 5.0, "seed": 2,
        "prior_lambda": 1.0, "reference_set_size": 6, "reference_seed": 9,
    })
    images = backend.sample(handle, bundle.enhanced_prompt, seed=100, n=5)
    assert len(images) == 5
    assert all(img.shape == (3, 8, 4) for img in images)
    again = backend.sample(handle, bundle.enhanced_prompt, seed=100, n=5)
    for a, b in zip(images, again):
        assert np.array_equal(a, b)
    # the base model is untouched by fine-tuning
    assert not np.array_equal(handle.params_vector, backend.base_model.params_vector)


def test_lambda_zero_needs_no_reference(backend):
    world = sprite_world(1, 3, seed=2, image_shape=(3, 8, 4))
    bundle = build_prompts("standing", "vlem")
    handle = backend.fine_tune(world["id000"], bundle,
                               {"steps": 5, "prior_lambda": 0.0, "seed": 1})
    assert backend.sample(handle, bundle.enhanced_prompt, seed=0, n=1)[0].shape == (3, 8, 4)


def test_external_backend_registry():
    class Recorder:
        def __init__(self, **kwargs):
            self.kwargs = kwargs

        def fine_tune(self, images, prompts, config):
            return "handle"

        def sample(self, handle, prompt, seed, n):
            return [np.zeros((3, 8, 4))] * n

    register_backend("recorder-test", Recorder)
    try:
        found = get_backend("recorder-test", image_shape=(3, 8, 4))
        assert isinstance(found, GenerationBackend)
        assert found.kwargs["image_shape"] == (3, 8, 4)
    finally:
        BACKENDS.pop("recorder-test")


def test_unknown_backend_rejected():
    with pytest.raises(BackendError, match="warp-drive"):
        get_backend("warp-drive")
