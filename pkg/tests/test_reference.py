import numpy as np
import pytest

from diffid.denoiser import ToyDenoiser
from diffid.diffusion import sample
from diffid.errors import IntegrityError, InvalidArgument, NotFoundError
from diffid.prompts import build_prompts, embed_prompt
from diffid.reference import build_reference_set, cache_reference_set, load_reference_set
from diffid.schedules import make_schedule

SHAPE = (3, 8, 4)


@pytest.fixture(scope="module")
def base_model():
    return ToyDenoiser(SHAPE, cond_dim=8, seed=11)


@pytest.fixture(scope="module")
def schedule():
    return make_schedule(16, "cosine")


@pytest.fixture(scope="module")
def bundle():
    return build_prompts("walking, on a street", "vlem")


def test_single_image_composes_with_sample(base_model, schedule, bundle):
    ref = build_reference_set(base_model, bundle, n=1, seed=77, s=schedule, n_steps=6)
    cond = embed_prompt(bundle.lpe_prompt, base_model.cond_dim)
    direct = sample(base_model, cond, 77, 6, schedule)
    assert np.array_equal(ref.images[0], direct)
    assert ref.prompt == bundle.lpe_prompt
    assert ref.source_model_id == base_model.model_id


def test_deterministic_given_seed(base_model, schedule, bundle):
    a = build_reference_set(base_model, bundle, n=5, seed=3, s=schedule, n_steps=6)
    b = build_reference_set(base_model, bundle, n=5, seed=3, s=schedule, n_steps=6)
    for x, y in zip(a.images, b.images):
        assert np.array_equal(x, y)


def test_default_size_and_distinct_seeds(base_model, schedule, bundle):
    ref = build_reference_set(base_model, bundle, seed=5, s=schedule, n_steps=2)
    assert len(ref.images) == 200
    assert len(ref.seeds) == 200
    assert len(set(ref.seeds)) == 200


def test_depends_only_on_lpe_prompt_not_token(base_model, schedule):
    b1 = build_prompts("same caption", "qzx")
    b2 = build_prompts("same caption", "wubo")
    r1 = build_reference_set(base_model, b1, n=3, seed=9, s=schedule, n_steps=4)
    r2 = build_reference_set(base_model, b2, n=3, seed=9, s=schedule, n_steps=4)
    for x, y in zip(r1.images, r2.images):
        assert np.array_equal(x, y)


def test_size_zero_rejected(base_model, schedule, bundle):
    with pytest.raises(InvalidArgument):
        build_reference_set(base_model, bundle, n=0, seed=0, s=schedule)


def test_cache_round_trip(tmp_path, base_model, schedule, bundle):
    ref = build_reference_set(base_model, bundle, n=3, seed=21, s=schedule, n_steps=4)
    set_id = cache_reference_set(ref, tmp_path)
    loaded = load_reference_set(tmp_path, set_id)
    assert loaded.prompt == ref.prompt
    assert loaded.seeds == ref.seeds
    assert loaded.source_model_id == ref.source_model_id
    for x, y in zip(ref.images, loaded.images):
        assert np.array_equal(x, y)
    # caching again is a no-op with the same id
    assert cache_reference_set(ref, tmp_path) == set_id


def test_unknown_id_not_found(tmp_path):
    with pytest.raises(NotFoundError):
        load_reference_set(tmp_path, "deadbeef00000000")


def test_corruption_detected(tmp_path, base_model, schedule, bundle):
    ref = build_reference_set(base_model, bundle, n=2, seed=4, s=schedule, n_steps=4)
    set_id = cache_reference_set(ref, tmp_path)
    victim = sorted((tmp_path / set_id).glob("*.npy"))[0]
    raw = bytearray(victim.read_bytes())
    raw[-1] ^= 0x01  # flip one stored byte
    victim.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        load_reference_set(tmp_path, set_id)


def test_provenance_changes_after_fine_tuning(base_model):
    tuned = base_model.copy()
    tuned.load_params_vector(tuned.params_vector + 0.01)
    assert tuned.model_id != base_model.model_id
