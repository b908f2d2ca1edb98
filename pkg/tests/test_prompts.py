from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffid.errors import BackendError, IirExhaustedError, InvalidArgument
from diffid.prompts import (
    CaptionerHandle,
    PromptBundle,
    allocate_iir,
    build_prompts,
    caption_sequence,
    default_iir_candidates,
    embed_prompt,
    register_captioner,
    stub_slots_for_image,
)



def test_build_prompts_hand_case():
    bundle = build_prompts("walking with a red bag", "qzx")
    assert bundle.enhanced_prompt == "a photo of qzx person, walking with a red bag"
    assert bundle.lpe_prompt == "a photo of person, walking with a red bag"


def test_build_prompts_empty_caption_still_valid():
    bundle = build_prompts("", "qzx")
    assert bundle.enhanced_prompt.count("qzx") == 1
    assert "qzx" not in bundle.lpe_prompt


@pytest.mark.parametrize("template", [
    "a photo of {identity} and {identity}, {caption}",  # two identity slots
    "a photo of {identity}",                            # missing caption slot
    "{caption} {caption} {identity}",                   # two caption slots
])
def test_build_prompts_malformed_template(template):
    with pytest.raises(InvalidArgument):
        build_prompts("c", "qzx", template)


def test_build_prompts_token_collision_rejected():
    with pytest.raises(InvalidArgument):
        build_prompts("a qzx moment", "qzx")


def test_bundle_invariants_enforced():
    with pytest.raises(InvalidArgument):
        PromptBundle(caption="c", iir_token="qzx",
                     enhanced_prompt="qzx and qzx person", lpe_prompt="person")
    with pytest.raises(InvalidArgument):
        PromptBundle(caption="c", iir_token="qzx",
                     enhanced_prompt="a qzx person", lpe_prompt="a qzx person")


def test_prompts_differ_in_one_contiguous_region():
    bundle = build_prompts("carrying a bag, on a street", "vlem")
    e, l = bundle.enhanced_prompt, bundle.lpe_prompt
    # strip the common prefix and suffix; the difference must be the token slot
    i = 0
    while e[i] == l[i]:
        i += 1
    j = 0
    while e[len(e) - 1 - j] == l[len(l) - 1 - j]:
        j += 1
    assert e[i:len(e) - j].strip() == "vlem"
    assert l[i:len(l) - j].strip() == ""


def test_caption_sequence_requires_images():
    with pytest.raises(InvalidArgument):
        caption_sequence([], CaptionerHandle())


def test_stub_caption_deterministic(world3):
    images = world3["id000"]
    handle = CaptionerHandle()
    assert caption_sequence(images, handle) == caption_sequence(images, handle)


def test_stub_caption_majority_vote_oracle(world3):
    images = world3["id001"][:3]
    handle = CaptionerHandle()
    caption = caption_sequence(images, handle)
    parts = caption.split(", ")
    per_image = [stub_slots_for_image(img, handle.attribute_focus) for img in images]
    from diffid.prompts import SLOT_WORDS
    for slot, part in zip(handle.attribute_focus, parts):
        votes = Counter(d[slot] for d in per_image)
        top = max(votes.values())
        winners = [w for w, c in votes.items() if c == top]
        expected = min(winners, key=SLOT_WORDS[slot].index)
        assert part == expected


def test_external_captioner_adapter_and_errors(world3):
    register_captioner("echo-test", lambda images: f"{len(images)} frames")
    assert caption_sequence(world3["id000"][:2],
                            CaptionerHandle(name="echo-test")) == "2 frames"
    with pytest.raises(BackendError):
        caption_sequence(world3["id000"], CaptionerHandle(name="missing-backend"))

    def broken(images):
        raise RuntimeError("connection refused")

    register_captioner("broken-test", broken)
    with pytest.raises(BackendError, match="broken-test"):
        caption_sequence(world3["id000"], CaptionerHandle(name="broken-test"))


def test_allocate_iir_examples():
    assert allocate_iir({"a", "person"}, ["qzx"], seed=0) == "qzx"
    with pytest.raises(IirExhaustedError):
        allocate_iir({"qzx", "vlem"}, ["qzx", "vlem"], seed=0)
    first = allocate_iir({"x"}, ["aaa", "bbb", "ccc"], seed=42)
    assert first == allocate_iir({"x"}, ["aaa", "bbb", "ccc"], seed=42)
    with pytest.raises(InvalidArgument):
        allocate_iir(set(), [], seed=0)


@settings(max_examples=200)
@given(vocab=st.sets(st.text("abcdef", min_size=1, max_size=4), max_size=30),
       extra=st.lists(st.text("abcdef", min_size=1, max_size=4), min_size=0, max_size=10),
       fresh=st.text("xyz", min_size=5, max_size=8),
       seed=st.integers(0, 2**32 - 1))
def test_allocate_iir_never_returns_vocabulary_token(vocab, extra, fresh, seed):
    candidates = extra + [fresh]  # fresh is guaranteed outside vocab's alphabet
    token = allocate_iir(vocab, candidates, seed)
    assert token not in vocab


def test_allocator_with_used_set_never_repeats():
    candidates = list(default_iir_candidates(50))
    used = set()
    for k in range(25):
        token = allocate_iir(used, candidates, seed=k)
        assert token not in used
        used.add(token)


def test_default_candidates_shape():
    cands = default_iir_candidates(10000)
    assert len(cands) == 10000
    assert len(set(cands)) == 10000
    assert all(3 <= len(c) <= 4 for c in cands)


def test_embed_prompt_distinct_and_stable():
    a = embed_prompt("a photo of qzx person, walking", 16)
    b = embed_prompt("a photo of person, walking", 16)
    assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-12)
    assert not np.allclose(a, b)  # the token changes the condition
    assert np.array_equal(a, embed_prompt("a photo of qzx person, walking", 16))
